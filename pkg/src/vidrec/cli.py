"""``vidrec`` command line: world generation, experiments, feedback loops, judging and serving.

Exit codes: 0 success, 2 usage, 3 data error, 4 external-service error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from vidrec import experiment as exp
from vidrec.config import apply_override, load_config
from vidrec.embedding import as_embedding, mean_pool
from vidrec.errors import DataError, ExternalServiceError, VidrecError
from vidrec.index import VideoIndex, VideoRecord

log = logging.getLogger("vidrec")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_EXTERNAL = 0, 2, 3, 4
POLICIES = ("recency", "multimodal", "conventional")


class UsageError(VidrecError):
    pass


def _config(args) -> dict:
    if args.config is not None and not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    cfg = load_config(args.config)
    _overrides(cfg, args.set)
    return cfg


def _overrides(cfg: dict, assignments) -> None:
    for item in assignments or ():
        try:
            apply_override(cfg, item)
        except DataError as exc:
            raise UsageError(f"--set {item}: {exc}") from None


def _out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    return out


# -- subcommands -----------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _config(args)
    t0 = time.perf_counter()
    world = exp.world_from_config(cfg)
    paths = exp.write_world(world, cfg, _out(args.out))
    print(f"wrote {len(paths)} files to {args.out} in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK


def _read_records(path) -> list:
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            r = json.loads(line)
            if "embedding" in r:
                emb = as_embedding(r["embedding"])
            else:
                emb = mean_pool([as_embedding(f) for f in r["frames"]])
            records.append(VideoRecord(int(r["video_id"]), emb, int(r["duration_ms"]), int(r["upload_ts"]),
                                       int(r.get("creator_id", 0)), tuple(int(p) for p in r.get("product_ids", ())),
                                       tuple(str(t) for t in r.get("hashtags", ()))))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: bad video record ({exc})") from None
    return records


def cmd_index(args) -> int:
    if args.action == "build":
        index = VideoIndex(_read_records(args.records), build_ts=args.build_ts)
        index.save(args.out)
        print(f"indexed {len(index)} videos (d={index.dimension}) into {args.out}")
    elif args.action == "info":
        index = VideoIndex.load(args.path)
        print(json.dumps({"size": len(index), "dimension": index.dimension, "build_ts": index.build_ts}))
    else:
        index = VideoIndex.load(args.path)
        try:
            query = as_embedding(json.loads(args.vector), index.dimension)
        except ValueError as exc:
            raise UsageError(f"--vector must be a JSON list of {index.dimension} numbers ({exc})") from None
        for vid, score in index.top_k(query, args.k):
            print(f"{vid}\t{score:.6f}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = _config(args)
    policies = args.policies.split(",") if args.policies else list(POLICIES)
    bad = [p for p in policies if p not in POLICIES]
    if bad:
        raise UsageError(f"unknown policies {bad}; choose from {', '.join(POLICIES)}")
    out = _out(args.out)
    t0 = time.perf_counter()
    result = exp.run_experiment(cfg, policies)
    exp.write_outputs(result, out)
    print(result.table())
    print(f"done in {time.perf_counter() - t0:.1f}s; outputs in {out}")
    return EXIT_OK


def cmd_loop(args) -> int:
    cfg = _config(args)
    out = _out(args.out)
    report = exp.run_loop(cfg, args.policy, progress=lambda r: log.info("round %d done", r))
    path = out / f"loop_{args.policy}.json"
    exp.dump_json(path, {"config": cfg, "seed": cfg["seed"], "loop": report.to_dict()})
    for r, (dur, skew) in enumerate(zip(report.mean_duration_ms, report.popularity_skew), 1):
        print(f"round {r}: mean duration {dur / 1000:.2f}s, popularity skew {skew:.3f}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_judge(args) -> int:
    feeds_path = Path(args.feeds)
    if not feeds_path.is_file():
        raise DataError(f"feeds file not found: {feeds_path} (run `vidrec experiment` first)")
    try:
        payload = json.loads(feeds_path.read_text())
        cfg, policy = payload["config"], payload["policy"]
        feeds = exp.feeds_from_payload(payload)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"bad feeds file {feeds_path}: {exc!r}") from None
    _overrides(cfg, args.set)
    mode = args.judge_mode or cfg["judge"]["mode"]
    report = exp.run_judge(cfg, feeds, mode=mode, ks=args.k)
    out = _out(args.out)
    path = out / f"judge_{policy}.json"
    exp.dump_json(path, {"config": cfg, "seed": cfg["seed"], "policy": policy, "mode": mode, **report})
    for k, summ in report["summary"].items():
        mean = "n/a" if summ["mean"] is None else f"{summ['mean']:.3f}"
        print(f"{policy} top-{k}: mean {mean} over {summ['n_users']} users; histogram {summ['histogram']}")
    for fail in report["failures"]:
        print(f"user {fail['user_id']}: {fail['error']}", file=sys.stderr)
    print(f"wrote {path}")
    if report["failures"] and not report["users"]:
        return EXIT_EXTERNAL
    return EXIT_OK


def cmd_serve(args) -> int:
    from vidrec.service import RetrievalService, make_server

    bundle = exp.read_world(args.world)
    histories = {h.user_id: h for h in bundle.histories}
    service = RetrievalService(bundle.products, bundle.profile_config(), histories)
    server = make_server(service, args.host, args.port)
    service.load(bundle.index)
    print(f"serving {len(bundle.index)} videos on http://{args.host}:{server.server_address[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def cmd_report(args) -> int:
    root = Path(args.dir)
    metrics = root / "metrics.json"
    if not metrics.is_file():
        raise DataError(f"no metrics.json in {root}")
    from vidrec.metrics import EvalReport, format_table

    payload = json.loads(metrics.read_text())
    reports = [EvalReport(**r) for r in payload["reports"].values()]
    print(f"seed {payload['seed']}")
    print(format_table(reports))
    for path in sorted(root.glob("loop_*.json")):
        loop = json.loads(path.read_text())["loop"]
        durs = ", ".join(f"{d / 1000:.1f}" for d in loop["mean_duration_ms"])
        print(f"loop {loop['policy']}: mean duration per round (s) [{durs}]")
    for path in sorted(root.glob("judge_*.json")):
        jr = json.loads(path.read_text())
        parts = [f"top-{k} {s['mean']:.3f}" for k, s in jr["summary"].items() if s["mean"] is not None]
        print(f"judge {jr['policy']} ({jr['mode']}): {', '.join(parts)}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file merged over the packaged defaults")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable); values parse as JSON")

    parser = argparse.ArgumentParser(prog="vidrec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a simulated world and write its files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("index", help="build, inspect or query a video index snapshot")
    isub = p.add_subparsers(dest="action", required=True)
    b = isub.add_parser("build", help="index a JSONL file of video records")
    b.add_argument("--records", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--build-ts", type=int, default=None)
    i = isub.add_parser("info", help="print size, dimension and build time")
    i.add_argument("path")
    q = isub.add_parser("query", help="top-k for a JSON vector")
    q.add_argument("path")
    q.add_argument("--vector", required=True)
    q.add_argument("--k", type=int, default=10)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("experiment", parents=[common], help="offline comparison of ranking policies")
    p.add_argument("--policies", help="comma-separated subset of " + ",".join(POLICIES))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("loop", parents=[common], help="feedback-loop simulation for one policy")
    p.add_argument("--policy", choices=POLICIES, default="conventional")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_loop)

    p = sub.add_parser("judge", help="judge the feeds written by `experiment`")
    p.add_argument("--feeds", required=True, help="feeds_<policy>.json from an experiment run")
    p.add_argument("--k", type=int, nargs="+")
    p.add_argument("--judge-mode", choices=("mock", "live"))
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_judge)

    p = sub.add_parser("serve", help="HTTP retrieval service over a generated world")
    p.add_argument("--world", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("report", help="summarise the outputs in a run directory")
    p.add_argument("dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"vidrec: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ExternalServiceError as exc:
        print(f"vidrec: external service error: {exc}", file=sys.stderr)
        return EXIT_EXTERNAL
    except DataError as exc:
        print(f"vidrec: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
