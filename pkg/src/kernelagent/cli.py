"""Operator entry point: run sessions, replay journals, emit reports.

Every flag has a config-file equivalent in the manifest's "run" section;
flags win on conflict. Relative paths in the run section resolve against
the manifest's directory, flag paths against the working directory.

Exit codes: 0 session Done (or replay/report succeeded), 1 configuration
error, 2 session Failed or replay divergence.
"""
from __future__ import annotations

import argparse
import glob as globlib
import sys
import tempfile
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .errors import (
    Divergence,
    JournalIncomplete,
    KernelAgentError,
    NoCorrectVersion,
    ScriptExhausted,
)
from .evaluation import Executor, MockExecutor, SubprocessExecutor
from .model import (
    ModelClient,
    RemoteConfig,
    RemoteModelClient,
    ScriptedModelClient,
    load_model_script,
)
from .profiling import ProfilingSchedule, WorkloadClass
from .session import replay_session, run_session
from .store import (
    SessionRecord,
    best_kernel,
    export_report,
    load_record,
    render_speedup_table,
)
from .task import load_manifest
from .workflow import Budget, Phase

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_FAILED = 2

# flags the run section may preset; argparse dest -> run-section key
_RUN_KEYS = ("budget_depth", "budget_debug_attempts", "budget_calls",
             "eval_timeout", "profile_start_matmul",
             "profile_start_activation", "profile_start_other",
             "executor", "model", "seed", "out", "session_id",
             "regression_factor")


class _ConfigError(KernelAgentError):
    """CLI-level misconfiguration; always maps to exit code 1."""


def _effective_options(run_options: Dict, args: argparse.Namespace) -> Dict:
    eff = {k: v for k, v in run_options.items() if k in _RUN_KEYS
           or k in ("executor_script", "model_script", "remote_config")}
    for key in _RUN_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            eff[key] = value
    return eff


def _resolve(path_s: str, *, base: Optional[Path]) -> Path:
    p = Path(path_s)
    if not p.is_absolute() and base is not None:
        p = base / p
    return p


def _build_executor(eff: Dict, manifest_dir: Path,
                    from_flag: bool) -> Executor:
    spec = eff.get("executor")
    if not spec:
        raise _ConfigError(
            "no executor configured (use --executor or the manifest's "
            "run.executor)")
    base = None if from_flag else manifest_dir
    if spec == "mock" or spec.startswith("mock:"):
        _, _, inline = spec.partition(":")
        script = inline or eff.get("executor_script")
        if not script:
            raise _ConfigError(
                "mock executor needs a replies file: use mock:<path> or "
                "set run.executor_script")
        script_base = base if inline else manifest_dir
        return MockExecutor.from_file(_resolve(script, base=script_base))
    if spec.startswith("subprocess:"):
        return SubprocessExecutor(spec.partition(":")[2])
    raise _ConfigError(f"unknown executor {spec!r} "
                       f"(expected mock[:<path>] or subprocess:<command>)")


def _build_model(eff: Dict, manifest_dir: Path, from_flag: bool) -> ModelClient:
    spec = eff.get("model")
    if not spec:
        raise _ConfigError(
            "no model configured (use --model or the manifest's run.model)")
    base = None if from_flag else manifest_dir
    if spec == "scripted" or spec.startswith("scripted:"):
        _, _, inline = spec.partition(":")
        script = inline or eff.get("model_script")
        if not script:
            raise _ConfigError(
                "scripted model needs a responses file: use scripted:<path> "
                "or set run.model_script")
        script_base = base if inline else manifest_dir
        return ScriptedModelClient(
            load_model_script(_resolve(script, base=script_base)))
    if spec == "remote" or spec.startswith("remote:"):
        _, _, inline = spec.partition(":")
        config = inline or eff.get("remote_config")
        if not config:
            raise _ConfigError(
                "remote model needs a config file: use remote:<path> or "
                "set run.remote_config")
        config_base = base if inline else manifest_dir
        return RemoteModelClient(
            RemoteConfig.from_file(_resolve(config, base=config_base)))
    raise _ConfigError(f"unknown model {spec!r} "
                       f"(expected scripted[:<path>] or remote[:<config>])")


def _build_schedule(eff: Dict) -> ProfilingSchedule:
    start = dict(ProfilingSchedule.default().start_depth)
    for key, wc in (("profile_start_matmul", WorkloadClass.MATMUL_LIKE),
                    ("profile_start_activation",
                     WorkloadClass.ACTIVATION_ELEMENTWISE),
                    ("profile_start_other", WorkloadClass.OTHER)):
        if key in eff:
            start[wc] = int(eff[key])
    return ProfilingSchedule(start_depth=start)


def _build_budget(eff: Dict) -> Budget:
    defaults = Budget()
    return Budget(
        max_depth=int(eff.get("budget_depth", defaults.max_depth)),
        max_debug_attempts_per_cycle=int(
            eff.get("budget_debug_attempts",
                    defaults.max_debug_attempts_per_cycle)),
        max_total_model_calls=int(
            eff.get("budget_calls", defaults.max_total_model_calls)),
        per_eval_timeout=float(
            eff.get("eval_timeout", defaults.per_eval_timeout)),
    )


def cmd_run(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest)
    manifest_dir = Path(args.manifest).resolve().parent
    eff = _effective_options(manifest.run_options, args)

    task = manifest.task
    if "seed" in eff:
        task = replace(task, correctness=replace(
            task.correctness, rng_seed=int(eff["seed"])))

    executor = _build_executor(eff, manifest_dir,
                               from_flag=args.executor is not None)
    model = _build_model(eff, manifest_dir, from_flag=args.model is not None)
    out_root = _resolve(str(eff.get("out", "sessions")),
                        base=None if args.out else manifest_dir)

    record = run_session(
        task, _build_budget(eff), model, executor, _build_schedule(eff),
        out_root=out_root,
        session_id=eff.get("session_id"),
        regression_factor=float(eff.get("regression_factor", 0.5)),
        log=print)

    print(f"session {record.session_id}: {record.terminal_phase.value}")
    try:
        best = best_kernel(record)
        print(f"best: {best.id} "
              f"(speedup {record.reports[best.id].speedup:.2f})")
    except NoCorrectVersion:
        print("best: none (no correct version)")
    return EXIT_OK if record.terminal_phase is Phase.DONE else EXIT_FAILED


def cmd_replay(args: argparse.Namespace) -> int:
    scratch = args.scratch
    if scratch is None:
        with tempfile.TemporaryDirectory(prefix="kernelagent-replay-") as tmp:
            return _replay_into(args.session_dir, Path(tmp))
    return _replay_into(args.session_dir, Path(scratch))


def _replay_into(session_dir: str, scratch: Path) -> int:
    try:
        _, _, diff = replay_session(Path(session_dir), scratch)
    except ScriptExhausted as e:
        # the journal holds fewer responses than the replayed session asks
        # for, which is just one more way of being incomplete
        raise JournalIncomplete(str(e))
    if diff is not None:
        raise Divergence(diff)
    print(f"replay of {session_dir}: records match (modulo timestamps)")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    record = load_record(Path(args.session_dir))
    print(export_report(record, format=args.format))
    return EXIT_OK


def _best_speedup_row(record: SessionRecord) -> Optional[Tuple[str, float]]:
    try:
        best = best_kernel(record)
    except NoCorrectVersion:
        return None
    speedup = record.reports[best.id].speedup
    assert speedup is not None
    return (record.task_id, speedup)


def cmd_bench_table(args: argparse.Namespace) -> int:
    dirs = sorted(Path(p) for p in globlib.glob(args.sessions_glob)
                  if Path(p).is_dir())
    if not dirs:
        raise _ConfigError(f"no session directories match {args.sessions_glob!r}")
    rows: List[Tuple[str, float]] = []
    skipped = []
    for d in dirs:
        if not (d / "record.json").is_file():
            continue
        row = _best_speedup_row(load_record(d))
        if row is None:
            skipped.append(d.name)
            continue
        rows.append(row)
    if not rows:
        raise _ConfigError(
            f"no sessions under {args.sessions_glob!r} produced a correct "
            f"kernel")
    print(render_speedup_table(rows, kernel_header=args.kernel_header))
    for name in skipped:
        print(f"(skipped {name}: no correct version)", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kernel-agent",
        description="drive an LLM through generate, test, debug, and "
                    "optimize rounds on a GPU kernel")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one refinement session")
    run.add_argument("manifest", help="task manifest (JSON)")
    run.add_argument("--budget-depth", dest="budget_depth", type=int)
    run.add_argument("--budget-calls", dest="budget_calls", type=int)
    run.add_argument("--budget-debug-attempts", dest="budget_debug_attempts",
                     type=int)
    run.add_argument("--eval-timeout", dest="eval_timeout", type=float)
    run.add_argument("--profile-start-matmul", dest="profile_start_matmul",
                     type=int)
    run.add_argument("--profile-start-activation",
                     dest="profile_start_activation", type=int)
    run.add_argument("--profile-start-other", dest="profile_start_other",
                     type=int)
    run.add_argument("--executor",
                     help="mock[:<replies.json>] or subprocess:<command>")
    run.add_argument("--model",
                     help="scripted[:<responses.json>] or remote[:<config>]")
    run.add_argument("--seed", type=int, help="override the evaluation seed")
    run.add_argument("--out", help="root directory for session output")
    run.add_argument("--session-id", dest="session_id")
    run.add_argument("--regression-factor", dest="regression_factor",
                     type=float)
    run.set_defaults(func=cmd_run)

    rep = sub.add_parser("replay",
                         help="re-run a session from its journal and compare")
    rep.add_argument("session_dir")
    rep.add_argument("--scratch", help="where to write the replayed session "
                                       "(default: a temporary directory)")
    rep.set_defaults(func=cmd_replay)

    report = sub.add_parser("report", help="export one session's report")
    report.add_argument("session_dir")
    report.add_argument("--format", choices=("markdown", "json"),
                        default="markdown")
    report.set_defaults(func=cmd_report)

    bench = sub.add_parser("bench-table",
                           help="speedup table across many sessions")
    bench.add_argument("sessions_glob",
                       help="glob matching session directories")
    bench.add_argument("--kernel-header", dest="kernel_header",
                       default="Kernel")
    bench.set_defaults(func=cmd_bench_table)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Divergence as e:
        print(f"replay diverged: first difference at {e}", file=sys.stderr)
        return EXIT_FAILED
    except JournalIncomplete as e:
        print(f"journal incomplete: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except KernelAgentError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
