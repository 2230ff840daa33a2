"""End-to-end offline experiment: simulate, split, train, rank, evaluate."""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from vidrec.embedding import MS_PER_DAY, EmbeddingProvider
from vidrec.errors import DataError
from vidrec.index import VideoIndex
from vidrec.metrics import EvalContext, EvalReport, evaluate_policy, format_table, platt_fit, time_split
from vidrec.profiler import ProfileConfig, global_fallback, popular_products, read_histories, user_profile, write_histories
from vidrec.rankers import (
    Policy,
    RankedFeed,
    TowerTable,
    TrainHyper,
    featurize_index,
    rank_conventional,
    rank_multimodal,
    rank_recency,
)
from vidrec.simulator import (
    ImpressionLog,
    SimWorld,
    WorldConfig,
    generate_world,
    LoopReport,
    logging_log,
    run_feedback_loop,
    simulate_feeds,
    train_on_log,
)

EVAL_FEED_BASE = 9 * 10 ** 8


def world_from_config(cfg: dict) -> SimWorld:
    return generate_world(WorldConfig.from_dict(cfg["world"], seed=cfg["seed"]))


def hyper_from_config(cfg: dict) -> TrainHyper:
    r = cfg["ranker"]
    return TrainHyper(epochs=r["epochs"], lr=r["lr"], batch_size=r["batch_size"], seed=cfg["seed"],
                      hidden=r["hidden"], loss=r["loss"])


def profile_config(world: SimWorld, cfg: dict):
    p = cfg["profile"]
    return world.profile_config(p["half_life_days"], p["max_history"], p["popular_products"])


@dataclass
class ExperimentResult:
    config: dict
    reports: dict
    feeds: dict = field(repr=False)
    world: SimWorld = field(repr=False)
    train_log: ImpressionLog = field(repr=False)
    test_log: ImpressionLog = field(repr=False)
    model: object = field(default=None, repr=False)
    timings: dict = field(default_factory=dict)

    def table(self) -> str:
        return format_table(list(self.reports.values()))


def _request_times(test_log: ImpressionLog) -> dict:
    out: dict = {}
    for u, t in zip(test_log.user_id.tolist(), test_log.ts.tolist()):
        if t > out.get(u, -1):
            out[u] = t
    return dict(sorted(out.items()))


def run_experiment(cfg: dict, policies: Sequence[str] = ("recency", "multimodal", "conventional"),
                   world: SimWorld | None = None) -> ExperimentResult:
    policies = [Policy(p) for p in policies]
    if not policies:
        raise DataError("no policies requested")
    timings = {}
    t0 = time.perf_counter()
    world = world or world_from_config(cfg)
    timings["world"] = time.perf_counter() - t0
    ev = cfg["eval"]
    k_rec, k_coh = int(ev["k_rec"]), int(ev["k_coherence"])
    k_all = max(k_rec, k_coh)

    t0 = time.perf_counter()
    log = logging_log(world)
    train, test, split_ts = time_split(log, ev["holdout_days"])
    timings["simulate"] = time.perf_counter() - t0
    requests = _request_times(test)
    index = world.index

    user_content = world.content_mean_users()
    video_content = world.content_mean_videos()

    def sim_watch(feeds):
        specs = [(EVAL_FEED_BASE + f.user_id, f.user_id, f.video_ids, requests[f.user_id]) for f in feeds]
        sim = simulate_feeds(world, specs)
        return sim.watch_ms[sim.examined]

    ctx = EvalContext(
        durations=lambda ids: index.durations[[world.video_row(v) for v in ids]],
        catalog_mean_duration_ms=float(index.durations.mean()),
        gamma=world.cfg.gamma,
        propensity_cap=ev["propensity_cap"],
        threshold=ev["threshold"],
        k_rec=k_rec,
        k_coherence=k_coh,
        user_content=lambda u: user_content[u],
        video_content=lambda ids: video_content[[world.video_row(v) for v in ids]],
        simulate_watch=sim_watch,
        catalog_size=len(index),
    )
    test_rows = np.array([world.video_row(v) for v in test.video_id], dtype=np.int64)
    train_rows = np.array([world.video_row(v) for v in train.video_id], dtype=np.int64)

    reports, all_feeds, model = {}, {}, None
    pcfg = profile_config(world, cfg)
    for policy in policies:
        t0 = time.perf_counter()
        if policy is Policy.RECENCY:
            feeds = [rank_recency(index, k_all, as_of=t, user_id=u) for u, t in requests.items()]
            raw_train = index.upload_ts[train_rows].astype(np.float64)
            scores = index.upload_ts[test_rows].astype(np.float64)
        elif policy is Policy.MULTIMODAL:
            feeds = [rank_multimodal(index, world.histories[u], world.products, t, pcfg, k_all, as_of=t)
                     for u, t in requests.items()]
            # the profile is invariant to a shift of t_now, so one per user suffices
            t_ref = int(log.ts.max())
            profiles = np.stack([user_profile(h, world.products, t_ref, pcfg) for h in world.histories])
            raw_train = np.einsum("ij,ij->i", profiles[train.user_id], index.matrix[train_rows])
            scores = np.einsum("ij,ij->i", profiles[test.user_id], index.matrix[test_rows])
        else:
            spec = world.feature_spec(cfg["ranker"]["duration_buckets"], cfg["ranker"]["creator_buckets"])
            features = featurize_index(index, world.products, world.hashtags, spec)
            model = train_on_log(world, train, spec, features, hyper_from_config(cfg))
            table = TowerTable(model, index, features)
            users = world.catalog_users.matrix(requests)
            feeds = [rank_conventional(model, index, users[i], k_all, table, user_id=u, as_of=t)
                     for i, (u, t) in enumerate(requests.items())]
            scores = np.einsum("ij,ij->i", world.catalog_users.matrix(test.user_id.tolist()), table.matrix[test_rows])
            raw_train = None
        if raw_train is None:
            probs = 0.5 * (1.0 + np.tanh(0.5 * scores))
        else:
            probs = platt_fit(raw_train, train.labels)(scores)
        reports[policy.value] = evaluate_policy(policy.value, feeds, test, scores, ctx, split_ts, probs)
        all_feeds[policy.value] = feeds
        timings[policy.value] = time.perf_counter() - t0
    return ExperimentResult(cfg, reports, all_feeds, world, train, test, model, timings)


def run_loop(cfg: dict, policy: str, world: SimWorld | None = None, progress=None) -> LoopReport:
    """Feedback loop with the rounds, k, retraining cadence and bootstrap from ``cfg``."""
    world = world or world_from_config(cfg)
    lp = cfg["loop"]
    return run_feedback_loop(world, policy, int(lp["rounds"]), int(lp["k"]), int(lp["retrain_every"]),
                             hyper=hyper_from_config(cfg), profile_cfg=profile_config(world, cfg),
                             keep_log=False, progress=progress, bootstrap_days=lp.get("bootstrap_days"))


def write_outputs(result: ExperimentResult, out_dir) -> list:
    """Per-policy report files, a combined metrics file and the comparison table."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, rep in result.reports.items():
        path = out / f"report_{name}.json"
        path.write_text(json.dumps({"config": result.config, "seed": result.config["seed"],
                                    "report": rep.to_dict()}, indent=2, sort_keys=True) + "\n")
        written.append(path)
    metrics = out / "metrics.json"
    metrics.write_text(json.dumps({"config": result.config, "seed": result.config["seed"],
                                   "reports": {k: v.to_dict() for k, v in result.reports.items()}},
                                  indent=2, sort_keys=True) + "\n")
    table = out / "comparison.txt"
    table.write_text(result.table() + "\n")
    written += [metrics, table]
    for name in result.feeds:
        path = out / f"feeds_{name}.json"
        path.write_text(json.dumps(feeds_payload(result, name), sort_keys=True) + "\n")
        written.append(path)
    return written


def run_judge(cfg: dict, feeds: Sequence[RankedFeed], world: SimWorld | None = None, mode: str | None = None,
              ks: Sequence[int] | None = None) -> dict:
    """Judge a seeded sample of ``judge.n_users`` feeds with the mock or HTTP client."""
    from vidrec import judge

    jc = cfg["judge"]
    mode = mode or jc["mode"]
    world = world or world_from_config(cfg)
    client = judge.MockJudgeClient(world) if mode == "mock" else judge.HttpJudgeClient()
    rng = np.random.default_rng([cfg["seed"], 4])
    n = min(int(jc["n_users"]), len(feeds))
    chosen = sorted(rng.choice(len(feeds), size=n, replace=False).tolist())
    return judge.judge_report(client, [feeds[i] for i in chosen], lambda u: world.histories[u],
                              list(ks or jc["k"]), world.index.__getitem__, describe=judge.world_describer(world),
                              max_in_flight=jc["max_in_flight"], retries=jc["retries"], backoff_s=jc["backoff_s"])


# -- world bundles ---------------------------------------------------------

WORLD_FILES = ("products.emb", "hashtags.emb", "catalog_users.emb", "content.emb", "index.vix", "histories.jsonl")


def dump_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_world(world: SimWorld, cfg: dict, out_dir) -> list:
    """Embedding tables, the index snapshot, histories and a manifest with sizes and digests."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world.products.save(out / "products.emb")
    world.hashtags.save(out / "hashtags.emb")
    world.catalog_users.save(out / "catalog_users.emb")
    world.content.save(out / "content.emb")
    world.index.save(out / "index.vix")
    write_histories(out / "histories.jsonl", world.histories)
    files = {}
    for name in WORLD_FILES:
        data = (out / name).read_bytes()
        files[name] = {"bytes": len(data), "sha256": hashlib.sha256(data).hexdigest()}
    manifest = out / "world.json"
    dump_json(manifest, {"config": cfg, "seed": cfg["seed"], "files": files, "counts": {
        "users": world.cfg.n_users, "videos": len(world.index), "products": len(world.products),
        "hashtags": len(world.hashtags), "dimension": world.cfg.d}})
    return [out / n for n in WORLD_FILES] + [manifest]


@dataclass
class WorldBundle:
    config: dict
    products: EmbeddingProvider
    index: VideoIndex
    histories: list

    def profile_config(self) -> ProfileConfig:
        p = self.config["profile"]
        fallback = global_fallback(popular_products(self.histories, p["popular_products"]), self.products)
        return ProfileConfig(fallback=fallback, lam=math.log(2.0) / (p["half_life_days"] * MS_PER_DAY),
                             max_history=p["max_history"])


def read_world(world_dir) -> WorldBundle:
    """What serving needs from a world written by :func:`write_world`."""
    root = Path(world_dir)
    try:
        manifest = json.loads((root / "world.json").read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read world manifest in {root}: {exc}") from None
    return WorldBundle(manifest["config"], EmbeddingProvider.load(root / "products.emb", "products"),
                       VideoIndex.load(root / "index.vix"), read_histories(root / "histories.jsonl"))


def feeds_payload(result: ExperimentResult, policy: str) -> dict:
    return {"config": result.config, "seed": result.config["seed"], "policy": policy,
            "feeds": [{"user_id": f.user_id, "items": [[v, s] for v, s, _ in f.items]}
                      for f in result.feeds[policy]]}


def feeds_from_payload(payload: dict) -> list:
    policy = Policy(payload["policy"])
    return [RankedFeed(int(f["user_id"]), tuple((int(v), float(s), i) for i, (v, s) in enumerate(f["items"], 1)),
                       policy) for f in payload["feeds"]]
