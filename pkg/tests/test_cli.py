import json
import struct
import subprocess
import sys

import pytest

from vidrec import experiment as exp
from vidrec.cli import main

from conftest import SMALL_OVERRIDES

SMALL = [a for o in SMALL_OVERRIDES for a in ("--set", o)]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["experiment", *SMALL, "--out", str(out)]) == 0
    return out


def test_gen_is_byte_identical_on_rerun(tmp_path, small_run_cfg, small_world_dir):
    assert main(["gen", *SMALL, "--out", str(tmp_path)]) == 0
    for name in (*exp.WORLD_FILES, "world.json"):
        assert (tmp_path / name).read_bytes() == (small_world_dir / name).read_bytes(), name


def test_gen_file_sizes_follow_record_formulas(small_world_dir):
    manifest = json.loads((small_world_dir / "world.json").read_text())
    d = manifest["counts"]["dimension"]
    emb_counts = {"products.emb": manifest["counts"]["products"], "hashtags.emb": manifest["counts"]["hashtags"],
                  "catalog_users.emb": manifest["counts"]["users"], "content.emb": manifest["counts"]["products"]}
    for name, n in emb_counts.items():
        path = small_world_dir / name
        dim = struct.unpack_from("<I", path.read_bytes(), 8)[0]
        # 4 magic + 4 version + 4 dimension + 8 count, then (u64 id, dim float32) per row
        assert path.stat().st_size == 20 + n * (8 + 4 * dim), name
        assert manifest["files"][name]["bytes"] == path.stat().st_size
    # index: 28-byte header; per video 28 fixed bytes, u16 + 8 per product, u16 + (u16 + len) per tag, 4d floats
    index = exp.read_world(small_world_dir).index
    expected = 28 + sum(28 + 2 + 8 * len(r.product_ids) + 2 + sum(2 + len(t.encode()) for t in r.hashtags) + 4 * d
                        for r in index.records)
    assert (small_world_dir / "index.vix").stat().st_size == expected
    assert len(index) == manifest["config"]["world"]["n_videos"]


def test_missing_config_is_usage_error(tmp_path, capsys):
    assert main(["experiment", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path)]) == 2
    assert "config file not found" in capsys.readouterr().err


def test_bad_override_is_usage_error(tmp_path):
    assert main(["gen", "--set", "world.no_such_key=3", "--out", str(tmp_path)]) == 2
    assert main(["gen", "--set", "novalue", "--out", str(tmp_path)]) == 2


def test_unknown_subcommand_and_policy(tmp_path):
    assert main(["frobnicate"]) == 2
    assert main(["experiment", *SMALL, "--policies", "random", "--out", str(tmp_path)]) == 2


def test_malformed_config_file_is_data_error(tmp_path):
    bad = tmp_path / "cfg.json"
    bad.write_text("{not json")
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path / "o")]) == 3


def test_experiment_outputs(run_dir):
    metrics = json.loads((run_dir / "metrics.json").read_text())
    assert set(metrics["reports"]) == {"recency", "multimodal", "conventional"}
    assert metrics["config"]["world"]["n_videos"] == 600
    for name in ("recency", "multimodal", "conventional"):
        rep = json.loads((run_dir / f"report_{name}.json").read_text())
        assert rep["seed"] == metrics["seed"] and rep["config"] == metrics["config"]
        assert (run_dir / f"feeds_{name}.json").is_file()
    assert "conventional" in (run_dir / "comparison.txt").read_text()


def test_single_policy_experiment(tmp_path):
    assert main(["experiment", *SMALL, "--policies", "recency", "--out", str(tmp_path)]) == 0
    assert sorted(p.name for p in tmp_path.glob("report_*.json")) == ["report_recency.json"]


def test_embedded_config_reproduces_metrics(run_dir, tmp_path):
    metrics = json.loads((run_dir / "metrics.json").read_text())
    cfg = tmp_path / "embedded.json"
    cfg.write_text(json.dumps(metrics["config"]))
    assert main(["experiment", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "metrics.json").read_bytes() == (run_dir / "metrics.json").read_bytes()


def test_judge_mock_and_report(run_dir, capsys):
    assert main(["judge", "--feeds", str(run_dir / "feeds_multimodal.json"), "--out", str(run_dir)]) == 0
    out = json.loads((run_dir / "judge_multimodal.json").read_text())
    assert out["mode"] == "mock"
    assert set(out["summary"]) == {"5", "10"}
    assert out["summary"]["5"]["n_users"] == 10
    assert 1.0 <= out["summary"]["10"]["mean"] <= 5.0
    assert main(["loop", *SMALL, "--set", "loop.rounds=2", "--policy", "recency", "--out", str(run_dir)]) == 0
    capsys.readouterr()
    assert main(["report", str(run_dir)]) == 0
    text = capsys.readouterr().out
    assert "multimodal" in text and "judge multimodal (mock)" in text and "loop recency" in text


def test_judge_missing_feeds_is_data_error(tmp_path):
    assert main(["judge", "--feeds", str(tmp_path / "feeds_none.json"), "--out", str(tmp_path)]) == 3


def test_judge_garbled_feeds_is_data_error(tmp_path):
    bad = tmp_path / "feeds.json"
    bad.write_text(json.dumps({"policy": "recency"}))
    assert main(["judge", "--feeds", str(bad), "--out", str(tmp_path)]) == 3


def test_live_judge_without_url_is_external_error(run_dir, tmp_path, monkeypatch):
    monkeypatch.delenv("JUDGE_URL", raising=False)
    code = main(["judge", "--feeds", str(run_dir / "feeds_recency.json"), "--judge-mode", "live",
                 "--out", str(tmp_path)])
    assert code == 4


def test_report_without_metrics_is_data_error(tmp_path):
    assert main(["report", str(tmp_path)]) == 3


def test_index_build_info_query(tmp_path, capsys):
    records = tmp_path / "videos.jsonl"
    rows = [
        {"video_id": 1, "embedding": [1, 0, 0], "duration_ms": 10000, "upload_ts": 5},
        {"video_id": 2, "frames": [[0, 1, 0], [0, 1, 0]], "duration_ms": 20000, "upload_ts": 6,
         "product_ids": [4], "hashtags": ["x"]},
        {"video_id": 3, "embedding": [0.5, 0.5, 0], "duration_ms": 30000, "upload_ts": 7},
    ]
    records.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    snap = tmp_path / "videos.vix"
    assert main(["index", "build", "--records", str(records), "--out", str(snap), "--build-ts", "99"]) == 0
    capsys.readouterr()
    assert main(["index", "info", str(snap)]) == 0
    assert json.loads(capsys.readouterr().out) == {"size": 3, "dimension": 3, "build_ts": 99}
    assert main(["index", "query", str(snap), "--vector", "[0, 1, 0]", "--k", "2"]) == 0
    lines = capsys.readouterr().out.split()
    assert lines == ["2", "1.000000", "3", "0.500000"]
    assert main(["index", "query", str(snap), "--vector", "[0, 1]", "--k", "2"]) == 2


def test_index_build_rejects_bad_record(tmp_path):
    records = tmp_path / "videos.jsonl"
    records.write_text('{"video_id": 1}\n')
    assert main(["index", "build", "--records", str(records), "--out", str(tmp_path / "x.vix")]) == 3


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "vidrec.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "experiment" in proc.stdout
