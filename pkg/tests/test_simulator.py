import dataclasses

import numpy as np
import pytest

from vidrec.errors import DataError, UnknownEntity
from vidrec.index import VideoIndex, VideoRecord
from vidrec.rankers import Policy, RankedFeed
from vidrec.simulator import (
    Impression,
    ImpressionLog,
    WorldConfig,
    examination_probability,
    generate_world,
    gini,
    logging_log,
    run_feedback_loop,
    simulate_feed,
    simulate_feeds,
)


def test_world_is_deterministic(small_cfg, small_world):
    again = generate_world(small_cfg)
    for name in ("user_latent", "video_latent", "product_latent", "attention_ms", "request_ts"):
        assert np.array_equal(getattr(again, name), getattr(small_world, name))
    assert again.index.records == small_world.index.records
    assert again.histories == small_world.histories


def test_single_cluster_without_spread_gives_identical_users():
    w = generate_world(WorldConfig(seed=3, n_users=20, n_videos=30, n_products=20, taste_clusters=1,
                                   user_spread=0.0, noise_sigma=0.0, n_creators=5, n_hashtags=5))
    assert np.all(w.user_latent == w.user_latent[0])


def test_video_products_share_cluster():
    w = generate_world(WorldConfig(seed=1, n_users=100, n_videos=500, n_products=400, taste_clusters=4,
                                   n_creators=40, n_hashtags=40))
    for r in w.index.records:
        assert r.product_ids
        assert set(w.product_cluster[list(r.product_ids)]) == {w.video_cluster[r.video_id]}


def test_world_invariants(small_world):
    cfg = small_world.cfg
    assert len(small_world.index) == cfg.n_videos and len(small_world.histories) == cfg.n_users
    assert np.allclose(np.linalg.norm(small_world.user_latent, axis=1), 1.0)
    d = small_world.index.durations
    assert d.min() >= cfg.duration_min_ms and d.max() <= cfg.duration_max_ms
    log_start = cfg.t_end - cfg.log_days * 86_400_000
    assert all(e.ts < log_start for h in small_world.histories for e in h.events)
    with pytest.raises(UnknownEntity):
        small_world.video_row(10 ** 9)


def test_world_config_validation():
    with pytest.raises(DataError):
        WorldConfig(n_users=0)
    with pytest.raises(DataError):
        WorldConfig(duration_min_ms=5000, duration_max_ms=10)
    with pytest.raises(DataError):
        WorldConfig(gamma=-1)
    cfg = WorldConfig.from_dict({"n_users": 5, "not_a_field": 1}, seed=11)
    assert cfg.n_users == 5 and cfg.seed == 11


def controlled_world(base, durations, attention=30_000.0, aligned=True):
    """The first user with a fixed budget and videos whose latents equal (or are orthogonal to) theirs."""
    d = base.cfg.d
    u = np.zeros(d)
    u[0] = 1.0
    v = np.zeros(d)
    v[0 if aligned else 1] = 1.0
    recs = [VideoRecord(i, v, int(dur), 0, 0) for i, dur in enumerate(durations)]
    user_latent = base.user_latent.copy()
    user_latent[0] = u
    attention_ms = base.attention_ms.copy()
    attention_ms[0] = attention
    return dataclasses.replace(base, index=VideoIndex(recs), video_latent=np.tile(v, (len(recs), 1)),
                               user_latent=user_latent, attention_ms=attention_ms)


def feed_of(ids, user_id=0):
    return RankedFeed(user_id, tuple((v, 0.0, p) for p, v in enumerate(ids, 1)), Policy.RECENCY)


def test_duration_bias_example(small_world):
    w = controlled_world(small_world, [20_000, 90_000])
    short, long_ = simulate_feed(w, feed_of([0]), 1, 0, gamma=0.0, noise_sigma=0.0)[0], \
        simulate_feed(w, feed_of([1]), 2, 0, gamma=0.0, noise_sigma=0.0)[0]
    assert (short.watch_ms, short.watch_fraction, short.label) == (20_000, 1.0, 1)
    assert long_.watch_ms == 30_000 and long_.watch_fraction == pytest.approx(1 / 3) and long_.label == 0


def test_orthogonal_latents_watch_nothing(small_world):
    w = controlled_world(small_world, [20_000] * 5, aligned=False)
    imps = simulate_feed(w, feed_of(range(5)), 3, 0, gamma=0.0, noise_sigma=0.0)
    assert [i.watch_ms for i in imps] == [0] * 5


def test_gamma_zero_examines_everything(small_world):
    ids = small_world.index.ids[:10].tolist()
    imps = simulate_feed(small_world, feed_of(ids, 5), 77, 0, gamma=0.0)
    assert all(i.examined for i in imps)


def test_gamma_zero_noise_zero_is_position_independent(small_world):
    ids = small_world.index.ids[:8].tolist()
    a = simulate_feed(small_world, feed_of(ids, 4), 1, 0, gamma=0.0, noise_sigma=0.0)
    b = simulate_feed(small_world, feed_of(ids[::-1], 4), 2, 0, gamma=0.0, noise_sigma=0.0)
    by_vid = {i.video_id: i.watch_ms for i in b}
    assert all(by_vid[i.video_id] == i.watch_ms for i in a)


def test_watch_bounds_and_feed_determinism(small_world):
    lg = logging_log(small_world)
    assert np.all((lg.watch_ms >= 0) & (lg.watch_ms <= lg.duration_ms))
    assert np.all(lg.watch_ms[~lg.examined] == 0)
    assert lg.equals(logging_log(small_world))


def test_examination_rate_matches_power_law(small_world):
    ids = small_world.index.ids[:10].tolist()
    feeds = [(f, f % small_world.cfg.n_users, ids, 0) for f in range(2_000)]
    lg = simulate_feeds(small_world, feeds)
    assert len(lg) >= 10_000
    for p in range(2, 11):
        rate = lg.examined[lg.position == p].mean()
        assert abs(rate - examination_probability(p, 0.8)) <= 0.02
    assert lg.examined[lg.position == 1].all()


def test_label_prevalence_falls_with_duration(small_world):
    """Over the population, positive rate per duration quartile never rises."""
    w = small_world
    rows = np.arange(len(w.index))
    feeds = [(u, u, w.index.ids[rows[(u * 7) % 50::50]].tolist(), 0) for u in range(w.cfg.n_users)]
    lg = simulate_feeds(w, feeds)
    lg = lg.select(lg.examined)
    edges = np.quantile(lg.duration_ms, [0.25, 0.5, 0.75])
    bucket = np.searchsorted(edges, lg.duration_ms, side="right")
    rates = [lg.labels[bucket == b].mean() for b in range(4)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))


def test_streams_are_independent(small_world):
    ids = small_world.index.ids[:10].tolist()
    a = simulate_feed(small_world, feed_of(ids, 1), 5, 0, noise_sigma=0.0)
    b = simulate_feed(small_world, feed_of(ids, 1), 5, 0, noise_sigma=0.5)
    assert [i.examined for i in a] == [i.examined for i in b]


def test_impression_validation():
    with pytest.raises(DataError):
        Impression(1, 1, 1, 1, True, 20, 10, 0)
    with pytest.raises(DataError):
        Impression(1, 1, 1, 1, False, 5, 10, 0)


def test_log_roundtrip(small_world, tmp_path):
    lg = logging_log(small_world).select(np.arange(len(logging_log(small_world))) < 200)
    for name in ("log.jsonl", "log.jsonl.gz"):
        lg.write(tmp_path / name)
        assert ImpressionLog.read(tmp_path / name).equals(lg)
    (tmp_path / "bad.jsonl").write_text('{"feed_id": 1}\n')
    with pytest.raises(DataError):
        ImpressionLog.read(tmp_path / "bad.jsonl")


def test_log_concat_and_select(small_world):
    lg = logging_log(small_world)
    half = lg.select(lg.ts < np.median(lg.ts))
    rest = lg.select(lg.ts >= np.median(lg.ts))
    assert len(ImpressionLog.concat([half, rest])) == len(lg)


def test_recency_loop_accounting_and_constancy(small_world):
    one = run_feedback_loop(small_world, "recency", 1, 10)
    boot = logging_log(small_world)
    assert one.log_size == [len(boot) + small_world.cfg.n_users * 10]
    many = run_feedback_loop(small_world, "recency", 3, 10, keep_log=False)
    for series in (many.mean_duration_ms, many.popularity_skew, many.exposure_gini):
        assert len(set(series)) == 1
    assert many.log is None


def test_multimodal_loop_constant(small_world):
    rep = run_feedback_loop(small_world, "multimodal", 2, 5, keep_log=False)
    assert rep.mean_duration_ms[0] == rep.mean_duration_ms[1]


def test_conventional_loop_runs_and_reports(small_world):
    rep = run_feedback_loop(small_world, "conventional", 2, 5, bootstrap_days=3, keep_log=True)
    d = rep.to_dict()
    assert d["policy"] == "conventional" and len(d["mean_duration_ms"]) == 2
    assert rep.log_size[1] - rep.log_size[0] == small_world.cfg.n_users * 5
    with pytest.raises(DataError):
        run_feedback_loop(small_world, "recency", 0, 5)
    with pytest.raises(DataError):
        run_feedback_loop(small_world, "recency", 1, 5, bootstrap_days=0)


def test_gini_bounds():
    assert gini(np.zeros(5)) == 0.0
    assert gini(np.ones(5)) == pytest.approx(0.0)
    assert gini(np.array([0, 0, 0, 10])) == pytest.approx(0.75)
