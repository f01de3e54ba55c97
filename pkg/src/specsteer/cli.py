"""Headless entry points: run a full session, replay logs, benchmark configs.

Exit codes are frozen: 0 success, 1 usage error, 2 divergence or
verification failure.
"""

from __future__ import annotations

import argparse
import json
import random
import sys
import time
from pathlib import Path

from .corpus import CorpusError
from .engine import READY, SpeculationConfig
from .quality import window_scores
from .service import Session, replay as replay_log
from .strategies import StrategyDescriptor

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFICATION = 2


class PolicyError(ValueError):
    pass


def parse_policy(text: str) -> tuple[str, float]:
    """Accepted forms: none | top1 | reject | random:<p>."""
    if text in ("none", "top1", "reject"):
        return text, 0.0
    if text.startswith("random:"):
        try:
            p = float(text.split(":", 1)[1])
        except ValueError:
            raise PolicyError(f"bad probability in policy: {text}")
        if not 0.0 <= p <= 1.0:
            raise PolicyError("policy probability must be in [0, 1]")
        return "random", p
    raise PolicyError(f"unknown policy: {text}")


def load_config(path: str | None, args) -> SpeculationConfig:
    if path:
        config = SpeculationConfig.from_dict(json.loads(Path(path).read_text("utf-8")))
    else:
        config = SpeculationConfig()
    if args.seed is not None:
        config.seed = args.seed
    if getattr(args, "trigger", None):
        config.trigger_policy = args.trigger
    if getattr(args, "budget_ms", None):
        for level in config.budgets_ms:
            config.budgets_ms[level] = float(args.budget_ms)
    return config


def _register_delay(session: Session, delay_ms: int) -> None:
    """Inject an artificially slow strategy for budget validation."""

    def sleepy(state, params, seed, stats):
        time.sleep(delay_ms / 1000.0)
        return True, f"slept {delay_ms}ms"

    session.engine.registry.register(
        StrategyDescriptor("injected_delay", f"Injected {delay_ms}ms delay", "extension"),
        sleepy,
    )
    session.config.strategy_count += 1


def drive_session(session: Session, policy: str, p: float, rng: random.Random) -> dict:
    """Run a session to stream exhaustion, resolving batches per policy."""
    trajectory = []
    accepted = 0
    rejected = 0
    while True:
        batch = session.pending_batch()
        if batch is not None and batch.ranked:
            if policy == "top1" or (policy == "random" and rng.random() < p):
                session.accept(batch.ranked[0].sandbox_id)
                accepted += 1
                rejected += len(batch.ranked) - 1
            else:
                for entry in batch.ranked:
                    if session.engine.sandboxes[entry.sandbox_id].status == READY:
                        session.reject(entry.sandbox_id)
                        rejected += 1
            continue
        if not session.main_state.buffer:
            break
        events = session.step(1)
        if not events:
            break
        if session.history.entries:
            cursor, quality = session.history.entries[-1]
            trajectory.append({"cursor": cursor, **quality.raw()})
    runtimes = sorted(
        s.runtime_ms for s in session.engine.sandboxes.values() if s.runtime_ms > 0
    )
    final_score = window_scores(session.history)[-1] if len(session.history) else 0.0
    return {
        "k": session.stats.k,
        "final_digest": session.main_state.digest(),
        "final_cursor": session.main_state.insert_cursor,
        "sandboxes": session.engine.counts_by_status(),
        "sandboxes_total": len(session.engine.sandboxes),
        "accepted": accepted,
        "rejected": rejected,
        "latency_ms": {
            "p50": percentile(runtimes, 0.50),
            "p95": percentile(runtimes, 0.95),
        },
        "final_quality_score": final_score,
        "quality_trajectory": trajectory,
    }


def percentile(values: list[float], q: float) -> float:
    if not values:
        return 0.0
    index = min(len(values) - 1, max(0, round(q * (len(values) - 1))))
    return values[index]


def cmd_run(args) -> int:
    try:
        policy, p = parse_policy(args.policy)
        config = load_config(args.config, args)
        if policy == "none":
            config.pause_on_speculation = False
        session = Session.create(args.corpus, config, log_path=args.log)
    except (PolicyError, CorpusError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.inject_delay:
        _register_delay(session, args.inject_delay)
    started = time.perf_counter()
    rng = random.Random(config.seed)
    results = drive_session(session, policy, p, rng)
    results["policy"] = args.policy
    results["trigger"] = config.trigger_policy
    results["elapsed_s"] = round(time.perf_counter() - started, 3)
    results["config"] = config.to_dict()
    out = json.dumps(results, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(out + "\n", encoding="utf-8")
    print(out)
    return EXIT_OK


def cmd_replay(args) -> int:
    path = Path(args.log)
    if not path.exists():
        print(f"error: log not found: {path}", file=sys.stderr)
        return EXIT_USAGE
    report = replay_log(path)
    if not report.ok and report.message == "no entries":
        print("error: no entries", file=sys.stderr)
        return EXIT_USAGE
    print(
        json.dumps(
            {
                "ok": report.ok,
                "final_digest": report.final_digest,
                "entries_checked": report.entries_checked,
                "divergence_seq": report.divergence_seq,
                "truncated": report.truncated,
                "message": report.message,
            },
            indent=2,
            sort_keys=True,
        )
    )
    return EXIT_OK if report.ok else EXIT_VERIFICATION


def cmd_bench(args) -> int:
    try:
        policy, p = parse_policy(args.policy)
        horizons = [int(b) for b in args.matrix_b.split(",") if b]
    except (PolicyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    rows = []
    for horizon in horizons:
        config = load_config(args.config, args)
        config.buffer_horizon = horizon
        config.trigger_policy = "every-buffer"
        if policy == "none":
            config.pause_on_speculation = False
        try:
            session = Session.create(args.corpus, config)
        except CorpusError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        if args.inject_delay:
            _register_delay(session, args.inject_delay)
        results = drive_session(session, policy, p, random.Random(config.seed))
        rows.append(
            {
                "b": horizon,
                "n": config.strategy_count,
                "policy": args.policy,
                "sandboxes": results["sandboxes_total"],
                "p50_ms": round(results["latency_ms"]["p50"], 2),
                "p95_ms": round(results["latency_ms"]["p95"], 2),
                "timed_out": results["sandboxes"].get("timed_out", 0),
                "final_quality": round(results["final_quality_score"], 4),
            }
        )
    header = ["b", "n", "policy", "sandboxes", "p50_ms", "p95_ms", "timed_out", "final_quality"]
    widths = {h: max(len(h), *(len(str(r[h])) for r in rows)) for h in header}
    lines = ["  ".join(h.ljust(widths[h]) for h in header)]
    for row in rows:
        lines.append("  ".join(str(row[h]).ljust(widths[h]) for h in header))
    table = "\n".join(lines)
    print(table)
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n", "utf-8")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .api import create_app
    from .service import SessionManager

    manager = SessionManager()
    if args.corpus:
        config = load_config(args.config, args)
        session = manager.create_session(args.corpus, config, log_path=args.log)
        print(f"session ready: {session.session_id} (k={session.stats.k})")
    app = create_app(manager, frontend_dir=args.frontend)
    uvicorn.run(app, host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specsteer")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a headless speculative session")
    run_p.add_argument("--corpus", required=True)
    run_p.add_argument("--config")
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--policy", default="reject")
    run_p.add_argument("--trigger", choices=["metric", "every-buffer", "off"], default=None)
    run_p.add_argument("--out")
    run_p.add_argument("--log")
    run_p.add_argument("--inject-delay", type=int, default=0, metavar="MS")
    run_p.add_argument("--budget-ms", type=float, default=None)
    run_p.set_defaults(func=cmd_run)

    replay_p = sub.add_parser("replay", help="verify a provenance log")
    replay_p.add_argument("--log", required=True)
    replay_p.set_defaults(func=cmd_replay)

    bench_p = sub.add_parser("bench", help="run a config matrix and print a table")
    bench_p.add_argument("--corpus", required=True)
    bench_p.add_argument("--config")
    bench_p.add_argument("--seed", type=int, default=None)
    bench_p.add_argument("--policy", default="reject")
    bench_p.add_argument("--matrix-b", default="5,10")
    bench_p.add_argument("--out")
    bench_p.add_argument("--inject-delay", type=int, default=0, metavar="MS")
    bench_p.add_argument("--budget-ms", type=float, default=None)
    bench_p.set_defaults(func=cmd_bench)

    serve_p = sub.add_parser("serve", help="serve the HTTP/websocket API and UI")
    serve_p.add_argument("--corpus")
    serve_p.add_argument("--config")
    serve_p.add_argument("--seed", type=int, default=None)
    serve_p.add_argument("--log")
    serve_p.add_argument("--frontend", default="frontend/dist")
    serve_p.add_argument("--host", default="127.0.0.1")
    serve_p.add_argument("--port", type=int, default=8400)
    serve_p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
