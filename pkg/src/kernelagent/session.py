"""The session runner: drives one kernel from synthesis to Done/Failed.

This module owns all side effects the workflow engine deliberately avoids:
model calls (journaled, budget-checked), executor jobs, store writes, the
profiling cache, and the best-version/continuation bookkeeping. Each loop
iteration dispatches on the current phase, performs exactly one phase's
work, and feeds the resulting event back into the engine.

replay_session reconstructs a finished session purely from its directory:
the model script comes from the call journal, executor replies from the
recorded eval reports, and the task from the config snapshot. Equality
modulo timestamps is the replay guarantee.
"""
from __future__ import annotations

import logging
import time
import uuid
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

from .errors import NoCodeBlock, PatchError, ProfileParseError
from .evaluation import (
    CorrectnessConfig,
    EvalReport,
    EvalStatus,
    Executor,
    MockExecutor,
    TimingConfig,
    evaluate,
)
from .model import (
    JournaledClient,
    ModelClient,
    ModelRequest,
    ScriptedModelClient,
    extract_code_block,
    read_journal,
    script_from_journal,
)
from .patching import apply_patch, parse_patch
from .profiling import (
    ProfileSummary,
    ProfilingSchedule,
    WorkloadClass,
    parse_profile,
)
from .prompts import (
    GuidelineAssets,
    PromptKind,
    build_diagnosis,
    build_initial,
    build_optimization,
    build_repair,
    load_assets,
)
from .store import (
    KernelOrigin,
    KernelVersion,
    SessionRecord,
    SessionStore,
    first_difference,
    load_record,
    make_version,
    normalized_for_comparison,
)
from .task import InputTensorSpec, TaskSpec
from .workflow import (
    DEFAULT_REGRESSION_FACTOR,
    Budget,
    Continuation,
    Event,
    OPTIMIZATION_PHASES,
    Phase,
    RefinementState,
    TERMINAL_PHASES,
    TrajectoryPoint,
    WorkflowEngine,
    select_continuation,
)

logger = logging.getLogger("kernelagent.session")

CODE_REMINDER = ("\n\nREMINDER: Output the entire new code in ONE CODEBLOCK "
                 "(wrapped in ``` fences), with no other text.")
PATCH_REMINDER = ("\n\nREMINDER: Respond with edit blocks only, using the "
                  "<<<EDIT ... EDIT>>> syntax documented above.")

_EVENT_BY_STATUS = {
    EvalStatus.COMPILE_ERROR: Event.EVAL_COMPILE_ERROR,
    EvalStatus.RUNTIME_ERROR: Event.EVAL_RUNTIME_ERROR,
    EvalStatus.MISMATCH: Event.EVAL_MISMATCH,
    EvalStatus.CORRECT: Event.EVAL_CORRECT,
}


class _BudgetStop(Exception):
    """Internal control flow: the model-call budget ran out."""


def config_snapshot(task: TaskSpec, budget: Budget, schedule: ProfilingSchedule,
                    regression_factor: float) -> Dict:
    """Everything a replay needs to rebuild the run, reference source
    inlined so the snapshot outlives the original file."""
    return {
        "task": {
            "task_id": task.task_id,
            "workload_class": task.workload_class.value,
            "execution_mode": task.execution_mode,
            "description": task.description,
            "reference_source": task.reference_source(),
            "input_spec": [{"shape": list(s.shape), "dtype": s.dtype,
                            "distribution": s.distribution}
                           for s in task.input_spec],
            "correctness": {"rtol": task.correctness.rtol,
                            "atol": task.correctness.atol,
                            "num_random_trials": task.correctness.num_random_trials,
                            "rng_seed": task.correctness.rng_seed},
            "timing": {"warmup_iters": task.timing.warmup_iters,
                       "timed_iters": task.timing.timed_iters,
                       "synchronize_each_iter": task.timing.synchronize_each_iter},
        },
        "budget": {"max_depth": budget.max_depth,
                   "max_debug_attempts_per_cycle": budget.max_debug_attempts_per_cycle,
                   "max_total_model_calls": budget.max_total_model_calls,
                   "per_eval_timeout": budget.per_eval_timeout},
        "schedule": {wc.value: depth
                     for wc, depth in schedule.start_depth.items()},
        "regression_factor": regression_factor,
    }


def task_from_snapshot(snapshot: Dict, scratch_dir: Path) -> TaskSpec:
    scratch_dir = Path(scratch_dir)
    scratch_dir.mkdir(parents=True, exist_ok=True)
    ref_path = scratch_dir / "reference.py"
    ref_path.write_text(snapshot["reference_source"])
    return TaskSpec(
        task_id=snapshot["task_id"],
        workload_class=WorkloadClass(snapshot["workload_class"]),
        reference_source_path=ref_path,
        input_spec=tuple(InputTensorSpec(shape=tuple(s["shape"]),
                                         dtype=s["dtype"],
                                         distribution=s["distribution"])
                         for s in snapshot["input_spec"]),
        correctness=CorrectnessConfig(**snapshot["correctness"]),
        timing=TimingConfig(**snapshot["timing"]),
        execution_mode=snapshot["execution_mode"],
        description=snapshot["description"],
    )


class SessionRunner:
    def __init__(self, task: TaskSpec, budget: Budget, model: ModelClient,
                 executor: Executor, schedule: ProfilingSchedule, *,
                 out_root: Path, session_id: str,
                 regression_factor: float = DEFAULT_REGRESSION_FACTOR,
                 assets: Optional[GuidelineAssets] = None,
                 log: Optional[Callable[[str], None]] = None,
                 clock: Callable[[], float] = time.time):
        self.task = task
        self.budget = budget
        self.executor = executor
        self.engine = WorkflowEngine(budget, schedule, task.workload_class)
        self.regression_factor = regression_factor
        self.assets = assets or load_assets()
        self.clock = clock
        self._log_sink = log or (lambda line: logger.info("%s", line))

        self.store = SessionStore.create(
            out_root, session_id, task.task_id,
            config_snapshot(task, budget, schedule, regression_factor))
        self.model = JournaledClient(model, self.store.directory / "calls")
        self.session_id = session_id

        self.state = RefinementState()
        self.profiles: Dict[str, ProfileSummary] = {}
        self.last_failure: Optional[EvalReport] = None
        self.last_diagnosis: str = ""
        self._ref_time: Optional[float] = None
        self._best_speedup: float = float("-inf")

    # -- plumbing -------------------------------------------------------------

    def _log(self, event: str, phase: Optional[Phase] = None) -> None:
        shown = (phase or self.state.phase).value
        self._log_sink(f"{self.clock():.3f} | {shown} | {event} | "
                       f"{self.state.depth} | "
                       f"{self.state.current_version_id or '-'}")

    def _call(self, kind: PromptKind, prompt_text: str) -> str:
        if self.engine.model_calls_exhausted(self.state):
            raise _BudgetStop()
        self.state = self.engine.register_model_call(self.state)
        request = ModelRequest(
            prompt=prompt_text, kind=kind,
            request_id=f"{self.session_id}-{self.state.total_model_calls:04d}")
        return self.model.complete(request)

    def _code_from_model(self, kind: PromptKind,
                         prompt_text: str) -> Optional[str]:
        """One call plus one format-reminder retry; None if both lacked a
        code block."""
        try:
            return extract_code_block(self._call(kind, prompt_text))
        except NoCodeBlock:
            pass
        try:
            return extract_code_block(
                self._call(kind, prompt_text + CODE_REMINDER))
        except NoCodeBlock:
            return None

    def _versions_by_id(self) -> Dict[str, KernelVersion]:
        return {v.id: v for v in self.store.record.versions}

    def _current_version(self) -> KernelVersion:
        return self._versions_by_id()[self.state.current_version_id]

    def _append_new_version(self, source: str, origin: KernelOrigin,
                            parent_id: Optional[str], depth: int) -> KernelVersion:
        # sources are files; keep them newline-terminated
        if source and not source.endswith("\n"):
            source += "\n"
        seq = len(self.store.record.versions) + 1
        version = make_version(seq, source, origin, parent_id, depth,
                               created_at=self.clock())
        self.store.append_version(version)
        self.state = replace(self.state, current_version_id=version.id)
        return version

    # -- phase handlers --------------------------------------------------------

    def _do_synthesize(self) -> None:
        here = self.state.phase
        prompt = build_initial(self.task, self.assets)
        source = self._code_from_model(prompt.kind, prompt.text)
        if source is None:
            self._log("synthesis produced no code block twice; giving up", here)
            self.state = replace(self.state, phase=Phase.FAILED)
            return
        self._append_new_version(source, KernelOrigin.INITIAL, None,
                                 self.state.depth)
        self.state = self.engine.advance(self.state, Event.CODE_PRODUCED)
        self._log("code_produced", here)

    def _do_test(self) -> None:
        here = self.state.phase
        version = self._current_version()
        depth_if_correct = self.state.depth + (1 if self.state.optimizing else 0)
        want_profile = (depth_if_correct < self.budget.max_depth
                        and self.engine.profiling_at(depth_if_correct + 1))
        report = evaluate(version.source, self.task, self.task.correctness,
                          self.task.timing, self.executor,
                          timeout_s=self.budget.per_eval_timeout,
                          want_profile=want_profile,
                          cached_reference_time=self._ref_time)
        self.store.append_report(version.id, report)
        if report.status is EvalStatus.CORRECT and self._ref_time is None:
            self._ref_time = report.reference_time
        if report.profile_csv_path:
            self._capture_profile(version.id, report.profile_csv_path)

        # the cycle's scheduler decision, fixed when its prompt was built
        cycle_profiled = (self.state.optimizing
                          and self.engine.profiling_at(self.state.depth + 1))
        event = _EVENT_BY_STATUS[report.status]
        self.state = self.engine.advance(self.state, event)
        self.store.append_trajectory_point(TrajectoryPoint(
            depth=self.state.depth,
            correct=report.status is EvalStatus.CORRECT,
            version_id=version.id,
            profiling_enabled=cycle_profiled,
            wall_time=self.clock(),
            speedup=report.speedup))

        if report.status is EvalStatus.CORRECT:
            assert report.speedup is not None
            if report.speedup > self._best_speedup:
                self._best_speedup = report.speedup
                self.state = replace(self.state, best_version_id=version.id)
            if self.state.phase in OPTIMIZATION_PHASES:
                decision = select_continuation(report.speedup,
                                               self._best_speedup,
                                               self.regression_factor)
                if decision is Continuation.REVERT_TO_BEST:
                    assert self.state.best_version_id is not None
                    self.state = replace(
                        self.state,
                        current_version_id=self.state.best_version_id)
                    self._log("regressed below threshold; reverted to best",
                              here)
        else:
            self.last_failure = report
        self._log(event.value, here)

    def _capture_profile(self, version_id: str, csv_path: str) -> None:
        try:
            self.profiles[version_id] = parse_profile(Path(csv_path).read_text())
        except (OSError, ProfileParseError) as e:
            self._log(f"profile capture failed ({e}); continuing without")

    def _do_diagnose(self) -> None:
        assert self.last_failure is not None
        here = self.state.phase
        version = self._current_version()
        prompt = build_diagnosis(version.source, self.last_failure, self.assets)
        self.last_diagnosis = self._call(prompt.kind, prompt.text)
        if not self.last_diagnosis.strip():
            self.last_diagnosis = "(the diagnosis response was empty)"
        self.state = self.engine.advance(self.state, Event.DIAGNOSIS_PRODUCED)
        self._log("diagnosis_produced", here)

    def _do_repair(self) -> None:
        here = self.state.phase
        base = self._current_version()
        prompt = build_repair(base.source, self.last_diagnosis, self.assets)
        patched = self._patched_source(base, prompt.text)
        if patched is None:
            self.state = self.engine.advance(self.state, Event.PATCH_REJECTED)
            self._log("patch_rejected", here)
            return
        self._append_new_version(patched, KernelOrigin.REPAIR, base.id,
                                 self.state.depth)
        self.state = self.engine.advance(self.state, Event.PATCH_APPLIED)
        self._log("patch_applied", here)

    def _patched_source(self, base: KernelVersion,
                        prompt_text: str) -> Optional[str]:
        """One call plus one reminder retry; None when both responses
        failed to parse or apply."""
        for attempt, text in enumerate(
                (prompt_text, prompt_text + PATCH_REMINDER)):
            response = self._call(PromptKind.REPAIR, text)
            try:
                patch = parse_patch(response, base_version_id=base.id,
                                    base_fingerprint=base.fingerprint)
                return apply_patch(base.source, patch)
            except PatchError as e:
                self._log(f"patch attempt {attempt + 1} rejected: {e}")
        return None

    def _do_optimize(self) -> None:
        here = self.state.phase
        base = self._current_version()
        profile = None
        if here is Phase.PROFILE_REFINE:
            profile = self.profiles.get(base.id)
            if profile is None:
                self._log("profiling scheduled but no capture for "
                          f"{base.id}; prompt goes out without summary", here)
        prompt = build_optimization(base.source, self.assets, profile=profile)
        source = self._code_from_model(prompt.kind, prompt.text)
        if source is None:
            # stay in this phase; the next iteration re-prompts and the
            # call budget bounds the retries
            self._log("optimization response had no code block twice", here)
            return
        self._append_new_version(source, KernelOrigin.OPTIMIZATION, base.id,
                                 self.state.depth + 1)
        self.state = self.engine.advance(self.state, Event.CODE_PRODUCED)
        self._log("code_produced", here)

    # -- main loop -------------------------------------------------------------

    def run(self) -> SessionRecord:
        handlers = {
            Phase.SYNTHESIZE: self._do_synthesize,
            Phase.TEST: self._do_test,
            Phase.DIAGNOSE: self._do_diagnose,
            Phase.REPAIR: self._do_repair,
            Phase.OPTIMIZE: self._do_optimize,
            Phase.PROFILE_REFINE: self._do_optimize,
        }
        try:
            with self.store:
                try:
                    while self.state.phase not in TERMINAL_PHASES:
                        handlers[self.state.phase]()
                except _BudgetStop:
                    self.state = self.engine.advance(self.state,
                                                     Event.BUDGET_HIT)
                    self._log("budget_hit")
                self.store.finalize(self.state.phase)
                self._log("finalized")
                return self.store.record
        finally:
            self.store.close()


def run_session(task: TaskSpec, budget: Budget, model: ModelClient,
                executor: Executor, schedule: ProfilingSchedule, *,
                out_root: Path, session_id: Optional[str] = None,
                regression_factor: float = DEFAULT_REGRESSION_FACTOR,
                log: Optional[Callable[[str], None]] = None) -> SessionRecord:
    sid = session_id or f"{task.task_id}-{uuid.uuid4().hex[:8]}"
    runner = SessionRunner(task, budget, model, executor, schedule,
                           out_root=Path(out_root), session_id=sid,
                           regression_factor=regression_factor, log=log)
    return runner.run()


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------

def reply_from_report(report: EvalReport) -> Dict:
    """Reconstruct the executor reply a recorded report came from."""
    reply: Dict = {
        "status": report.status.value,
        "diagnostics": report.diagnostics,
        "max_abs_err": report.max_abs_err,
        "max_rel_err": report.max_rel_err,
        "failing_seed": report.failing_seed,
    }
    if report.status is EvalStatus.CORRECT:
        reply["reference_time_s"] = report.reference_time
        reply["candidate_time_s"] = report.candidate_time
        reply["candidate_time_std_s"] = report.candidate_time_std
    if report.profile_csv_path:
        reply["profile_csv_path"] = report.profile_csv_path
    return reply


def replay_session(session_dir: Path, scratch_root: Path,
                   log: Optional[Callable[[str], None]] = None
                   ) -> Tuple[SessionRecord, SessionRecord, Optional[str]]:
    """Re-run a recorded session from its journal and report the first
    difference (None when the replay matches modulo timestamps)."""
    session_dir = Path(session_dir)
    scratch_root = Path(scratch_root)
    original = load_record(session_dir)
    script = script_from_journal(read_journal(session_dir / "calls"))

    cfg = original.config
    task = task_from_snapshot(cfg["task"], scratch_root / "task")
    budget = Budget(**cfg["budget"])
    schedule = ProfilingSchedule(start_depth={
        WorkloadClass(k): v for k, v in cfg["schedule"].items()})
    replies: List[Dict] = [reply_from_report(original.reports[v.id])
                           for v in original.versions]

    reproduced = run_session(
        task, budget, ScriptedModelClient(script), MockExecutor(replies),
        schedule, out_root=scratch_root / "sessions",
        session_id=original.session_id,
        regression_factor=cfg.get("regression_factor",
                                  DEFAULT_REGRESSION_FACTOR),
        log=log)
    diff = first_difference(normalized_for_comparison(original),
                            normalized_for_comparison(reproduced))
    return original, reproduced, diff
