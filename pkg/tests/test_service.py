import json
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from vidrec import experiment as exp
from vidrec.errors import DataError
from vidrec.profiler import UserHistory, user_profile
from vidrec.service import MAX_K, RetrievalService, serve_in_thread


@pytest.fixture(scope="module")
def bundle(small_world_dir):
    return exp.read_world(small_world_dir)


@pytest.fixture
def service(bundle):
    return RetrievalService(bundle.products, bundle.profile_config(), {h.user_id: h for h in bundle.histories},
                            index=bundle.index)


@pytest.fixture
def live(service):
    server, _ = serve_in_thread(service)
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()
    server.server_close()


def _post(url, body: bytes):
    req = urllib.request.Request(url + "/v1/retrieve", data=body, method="POST",
                                 headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read())


def _get(url, path):
    try:
        with urllib.request.urlopen(url + path, timeout=10) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read())


def test_unloaded_service_answers_503(bundle):
    svc = RetrievalService(bundle.products, bundle.profile_config())
    assert svc.healthz()[0] == 503
    assert svc.retrieve({"user_id": 1, "k": 5})[0] == 503
    svc.load(bundle.index)
    status, body = svc.healthz()
    assert status == 200
    assert body["size"] == len(bundle.index) == bundle.config["world"]["n_videos"]
    assert body["build_ts"] == bundle.index.build_ts


def test_healthz_over_http(live, bundle):
    status, body = _get(live, "/healthz")
    assert status == 200 and body["size"] == bundle.config["world"]["n_videos"]
    assert _get(live, "/nope")[0] == 404


def test_empty_history_matches_library_fallback(service, bundle):
    status, body = service.retrieve({"events": [], "k": 20})
    assert status == 200
    t_now = bundle.index.build_ts
    query = user_profile(UserHistory(-1, ()), bundle.products, t_now, bundle.profile_config())
    expected = bundle.index.top_k(query, 20)
    assert [(r["video_id"], r["score"]) for r in body["results"]] == [(v, s) for v, s in expected]
    assert body["latency_ms"] >= 0


def test_known_user_matches_library(service, bundle):
    h = bundle.histories[3]
    status, body = service.retrieve({"user_id": h.user_id, "k": 10, "exclude": [1, 2]})
    assert status == 200
    t_now = max(h.events[-1].ts, bundle.index.build_ts)
    query = user_profile(h, bundle.products, t_now, bundle.profile_config())
    expected = bundle.index.top_k(query, 10, [1, 2])
    assert [r["video_id"] for r in body["results"]] == [v for v, _ in expected]
    assert body["user_id"] == h.user_id


def test_explicit_profile_vector(service, bundle):
    q = np.ones(bundle.index.dimension)
    status, body = service.retrieve({"profile": q.tolist(), "k": 3})
    assert status == 200
    assert [r["video_id"] for r in body["results"]] == [v for v, _ in bundle.index.top_k(q, 3)]


def test_concurrent_identical_requests_agree(live, bundle):
    h = bundle.histories[0]
    body = json.dumps({"events": [e.__dict__ | {"kind": e.kind.value} for e in h.events], "k": 25}).encode()
    with ThreadPoolExecutor(max_workers=16) as pool:
        answers = list(pool.map(lambda _: _post(live, body), range(100)))
    assert all(status == 200 for status, _ in answers)
    stripped = {json.dumps({k: v for k, v in ans.items() if k != "latency_ms"}, sort_keys=True)
                for _, ans in answers}
    assert len(stripped) == 1


@pytest.mark.parametrize("body,status", [
    ({"k": 5}, 400),
    ({"user_id": 1, "k": 0}, 400),
    ({"user_id": 1, "k": MAX_K + 1}, 400),
    ({"user_id": 1, "k": "ten"}, 400),
    ({"user_id": 1, "exclude": 3}, 400),
    ({"events": "nope"}, 400),
    ({"events": [{"ts": 5}]}, 400),
    ({"profile": [1.0, 2.0]}, 400),
    ([1, 2, 3], 400),
    ({"events": [{"product_id": 10 ** 9, "ts": 5}]}, 422),
])
def test_bad_requests(service, body, status):
    got, payload = service.retrieve(body)
    assert got == status
    assert "error" in payload


def test_invalid_json_over_http(live):
    status, body = _post(live, b"{not json")
    assert status == 400 and "error" in body


def test_load_rejects_dimension_mismatch(bundle):
    from vidrec.embedding import EmbeddingProvider

    svc = RetrievalService(EmbeddingProvider("products", 3, {1: np.ones(3)}), bundle.profile_config())
    with pytest.raises(DataError):
        svc.load(bundle.index)
