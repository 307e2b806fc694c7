"""Command-line entry point: ``fedvisor {gen-data,train-sim,serve,client,eval}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import signal
import sys
from pathlib import Path

from .annotation import PartitionMode, SceneSpec, read_shard, write_shard
from .client import ExhaustedRetries, FLClient
from .config import ClientConfig, TaskConfig, parse_address
from .evaluate import evaluate
from .explorer import DEFAULT_TRACE, LiveProbe, TraceProbe
from .server import TaskReport, TaskRunner, run_task
from .sim import make_dataset
from .store import ModelStore, NotFound
from .transport import InProcessTransport, TcpServerTransport, run_tcp_client

log = logging.getLogger("fedvisor")

METRICS_COLUMNS = (
    "round",
    "global_loss",
    "client_losses",
    "selected",
    "participants",
    "stragglers",
    "uplink_bytes",
    "simulated_upload_s",
    "version",
    "digest",
)


class UsageError(Exception):
    pass


def store_root(arg: str | None, default: Path) -> Path:
    env = os.environ.get("FEDVISOR_STORE")
    return Path(env) if env else Path(arg) if arg else default


def _fmt(v: float) -> str:
    return repr(float(v))


def write_metrics(report: TaskReport, config: TaskConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for m in report.rounds:
            w.writerow([
                m.round,
                _fmt(m.global_loss),
                ";".join(f"{c}={_fmt(v)}" for c, v in sorted(m.client_losses.items())),
                ";".join(m.selected),
                ";".join(m.participants),
                ";".join(m.stragglers),
                m.uplink_bytes,
                _fmt(m.simulated_upload_s),
                "" if m.version is None else m.version,
                m.digest,
            ])
    doc = {
        "task_id": report.task_id,
        "status": report.status,
        "error": report.error,
        "initial_loss": report.initial_loss,
        "final_version": report.final_version,
        "final_digest": report.final_digest,
        "columns": list(METRICS_COLUMNS),
        "rounds": [{k: getattr(m, k) for k in METRICS_COLUMNS} for m in report.rounds],
    }
    (out / "metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n", encoding="utf-8")
    (out / "schedule.jsonl").write_text("".join(s + "\n" for s in report.schedule_log), encoding="utf-8")
    config.save(out / "task_config.json")


def _client_shards(data: Path):
    dirs = sorted(p for p in data.iterdir() if p.is_dir() and p.name.startswith("client_"))
    if not dirs:
        raise UsageError(f"no client_* shard directories under {data}")
    return [read_shard(d) for d in dirs]


def _traces(data: Path) -> dict[str, list]:
    out = {}
    for path in sorted((data / "clients").glob("*.json")) if (data / "clients").is_dir() else []:
        cc = ClientConfig.load(path)
        if cc.trace:
            out[cc.client_id] = cc.trace
    return out


def cmd_gen_data(args) -> int:
    if args.clients < 1:
        raise UsageError("--clients must be >= 1")
    if args.samples < args.clients:
        raise UsageError("--samples must be >= --clients")
    spec = SceneSpec(args.side, args.classes, args.max_objects)
    mode = PartitionMode.parse(args.mode)
    shards, val = make_dataset(args.samples, args.clients, args.seed, spec, mode, args.val_samples)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for shard in shards:
            write_shard(out / shard.client_id, shard)
            cfg = ClientConfig(
                client_id=shard.client_id,
                server_addr=args.server_addr,
                shard_dir=str((out / shard.client_id).resolve()),
                reconnect_limit=3,
                trace=[list(t) for t in DEFAULT_TRACE],
            )
            (out / "clients").mkdir(exist_ok=True)
            cfg.save(out / "clients" / f"{shard.client_id}.json")
        write_shard(out / "validation", val)
    except OSError as e:
        print(f"error: cannot write dataset to {out}: {e}", file=sys.stderr)
        return 1
    summary = {
        "seed": args.seed,
        "scene": {"side": spec.side, "C": spec.C, "max_objects": spec.max_objects},
        "mode": args.mode,
        "shards": {s.client_id: {"samples": len(s.samples), "class_histogram": s.class_histogram(spec.C)} for s in shards},
        "validation": {"samples": len(val.samples), "class_histogram": val.class_histogram(spec.C)},
    }
    (out / "dataset.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    for name, info in [*summary["shards"].items(), ("validation", summary["validation"])]:
        print(f"{name:12s} samples={info['samples']:5d} classes={info['class_histogram']}")
    return 0


def cmd_train_sim(args) -> int:
    config = TaskConfig.load(args.config)
    data = Path(args.data)
    out = Path(args.out)
    shards = _client_shards(data)
    validation = read_shard(data / "validation") if (data / "validation").is_dir() else None
    traces = _traces(data)
    store = ModelStore(store_root(args.store, out / "store"))
    clients = [
        FLClient(s.client_id, s, TraceProbe(traces.get(s.client_id, DEFAULT_TRACE)), config.task_id)
        for s in shards
    ]
    transport = InProcessTransport(clients, overhead_s=config.upload_overhead_s, reconnect_limit=config.reconnect_limit)
    _snapshot(store, config)
    try:
        report = run_task(config, transport, None, validation, store, min_clients=len(clients))
    finally:
        transport.close()
    write_metrics(report, config, out)
    _print_report(report)
    return 0 if report.ok else 2


def _snapshot(store: ModelStore, config: TaskConfig) -> None:
    task_dir = store.root / config.task_id
    task_dir.mkdir(parents=True, exist_ok=True)
    config.save(task_dir / "task_config.json")


def _print_report(report: TaskReport) -> None:
    for m in report.rounds:
        print(
            f"round {m.round:3d} loss={m.global_loss:.4f} participants={len(m.participants)} "
            f"uplink={m.uplink_bytes}B upload={m.simulated_upload_s:.3f}s version={m.version}"
        )
    print(f"task {report.task_id}: {report.status}" + (f" ({report.error})" if report.error else ""))
    if report.final_digest:
        print(f"final digest {report.final_digest}")


def cmd_serve(args) -> int:
    config = TaskConfig.load(args.config)
    host, port = parse_address(config.server_url)
    host = args.host or host
    port = args.port if args.port is not None else port
    out = Path(args.out)
    store = ModelStore(store_root(args.store, out / "store"))
    validation = read_shard(Path(args.validation)) if args.validation else None
    try:
        transport = TcpServerTransport(host, port, config.task_id)
    except OSError as e:
        print(f"error: cannot bind {host}:{port}: {e}", file=sys.stderr)
        return 1
    print(f"listening on {transport.address[0]}:{transport.address[1]}", flush=True)

    def _stop(signum, frame):
        raise KeyboardInterrupt

    signal.signal(signal.SIGTERM, _stop)
    _snapshot(store, config)
    runner = TaskRunner(
        config, transport, validation, store,
        min_clients=args.wait_clients, join_timeout=args.join_timeout,
    )
    code = None
    try:
        report = runner.run()
    except KeyboardInterrupt:
        # every stored version is already fsynced; record what finished and tell clients to stop
        report = runner.report
        report.status = "interrupted"
        report.error = "server received shutdown signal"
        runner.shutdown_clients("server shutting down")
        code = 130
    finally:
        transport.close()
    write_metrics(report, config, out)
    _print_report(report)
    return code if code is not None else 0 if report.ok else 2


def cmd_client(args) -> int:
    cc = ClientConfig.load(args.config)
    host, port = parse_address(cc.server_addr)
    shard_dir = Path(cc.shard_dir)
    probe = TraceProbe(cc.trace) if cc.trace else LiveProbe()
    # re-read the shard directory every round so newly labelled samples join the next round
    client = FLClient(cc.client_id, lambda: read_shard(shard_dir, cc.client_id), probe, args.task_id)
    try:
        run_tcp_client(client, host, port, cc.reconnect_limit)
    except ExhaustedRetries as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 130
    return 0


def cmd_eval(args) -> int:
    root = store_root(args.store, Path("store"))
    store = ModelStore(root)
    cfg_path = Path(args.config) if args.config else root / args.task_id / "task_config.json"
    config = TaskConfig.load(cfg_path)
    try:
        params = store.load_model(args.task_id, args.version, config.arch)
    except NotFound as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    shard = read_shard(Path(args.shard))
    report = evaluate(params, shard, threshold=args.threshold)
    if args.out:
        report.write_csv(args.out)
    print(
        f"samples={len(report.samples)} predicted_boxes={report.n_predicted} "
        f"mean_iou={report.mean_iou:.4f} class_accuracy={report.class_accuracy:.4f}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedvisor", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic client shards and a validation shard")
    g.add_argument("--clients", type=int, required=True)
    g.add_argument("--samples", type=int, required=True, help="training samples across all clients")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="data")
    g.add_argument("--side", type=int, default=12)
    g.add_argument("--classes", type=int, default=2)
    g.add_argument("--max-objects", type=int, default=1)
    g.add_argument("--val-samples", type=int, default=None)
    g.add_argument("--mode", default="iid", help="iid | skew:ALPHA | skew:ALPHA:drop")
    g.add_argument("--server-addr", default="127.0.0.1:7878")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-sim", help="run a task in-process on a simulated clock")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", default="run")
    t.add_argument("--store", default=None)
    t.set_defaults(func=cmd_train_sim)

    s = sub.add_parser("serve", help="run FL_SERVER over TCP")
    s.add_argument("--config", required=True)
    s.add_argument("--validation", default=None)
    s.add_argument("--out", default="run")
    s.add_argument("--store", default=None)
    s.add_argument("--host", default=None)
    s.add_argument("--port", type=int, default=None)
    s.add_argument("--wait-clients", type=int, default=None, help="clients to wait for before round 1")
    s.add_argument("--join-timeout", type=float, default=60.0)
    s.set_defaults(func=cmd_serve)

    c = sub.add_parser("client", help="run FL_CLIENT over TCP")
    c.add_argument("--config", required=True)
    c.add_argument("--task-id", default="task")
    c.set_defaults(func=cmd_client)

    e = sub.add_parser("eval", help="decode and score a stored model version")
    e.add_argument("--task-id", required=True)
    e.add_argument("--version", type=int, default=None, help="default: latest")
    e.add_argument("--shard", required=True)
    e.add_argument("--store", default=None)
    e.add_argument("--config", default=None, help="task config (default: snapshot in the store)")
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--out", default=None, help="per-sample CSV")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as e:
        parser.error(str(e))
    except (ValueError, json.JSONDecodeError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
