"""Correctness and timing evaluation through a pluggable executor.

The evaluator never runs kernel code in-process. It serializes one job per
candidate over a JSON stdin/stdout protocol, validates the reply shape, and
folds the outcome into an EvalReport. Timing appears on a report only when
the candidate passed every randomized trial.
"""
from __future__ import annotations

import json
import shlex
import statistics
import subprocess
import uuid
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, NamedTuple, Optional, Protocol

from .errors import (
    EmptySamples,
    ExecutorTimeout,
    ExecutorUnavailable,
    NonPositiveTime,
    ProtocolViolation,
)

if TYPE_CHECKING:
    from .task import TaskSpec

WIRE_STATUSES = ("compile_error", "runtime_error", "mismatch", "correct")


class EvalStatus(Enum):
    COMPILE_ERROR = "compile_error"
    RUNTIME_ERROR = "runtime_error"
    MISMATCH = "mismatch"
    CORRECT = "correct"


@dataclass(frozen=True)
class CorrectnessConfig:
    rtol: float = 1e-3
    atol: float = 1e-3
    num_random_trials: int = 5
    rng_seed: int = 1000

    def __post_init__(self) -> None:
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("tolerances must be positive")
        if self.num_random_trials < 1:
            raise ValueError("num_random_trials must be >= 1")


@dataclass(frozen=True)
class TimingConfig:
    warmup_iters: int = 10
    timed_iters: int = 100
    synchronize_each_iter: bool = True

    def __post_init__(self) -> None:
        if self.warmup_iters < 1:
            raise ValueError("warmup_iters must be >= 1 (cold runs skew timing)")
        if self.timed_iters < 1:
            raise ValueError("timed_iters must be >= 1")


class TimingStats(NamedTuple):
    mean: float
    std: float


@dataclass(frozen=True)
class EvalReport:
    status: EvalStatus
    diagnostics: str = ""
    max_abs_err: Optional[float] = None
    max_rel_err: Optional[float] = None
    failing_seed: Optional[int] = None
    candidate_time: Optional[float] = None
    candidate_time_std: Optional[float] = None
    reference_time: Optional[float] = None
    speedup: Optional[float] = None
    profile_csv_path: Optional[str] = None

    def __post_init__(self) -> None:
        timing = (self.candidate_time, self.reference_time, self.speedup)
        if self.status is EvalStatus.CORRECT:
            if any(v is None for v in timing):
                raise ValueError("Correct report must carry timing data")
        else:
            if any(v is not None for v in timing):
                raise ValueError(
                    f"{self.status.value} report must not carry timing data")


class Executor(Protocol):
    def run_job(self, job: Dict, timeout_s: float) -> Dict: ...


class MockExecutor:
    """Replays scripted replies in order; used for desk-scale sessions,
    fixtures, and journal replay. Records every job it was given."""

    def __init__(self, replies: List[Dict]):
        self._replies = list(replies)
        self._cursor = 0
        self.jobs: List[Dict] = []

    @classmethod
    def from_file(cls, path: Path) -> "MockExecutor":
        path = Path(path)
        data = json.loads(path.read_text())
        if not isinstance(data, dict) or "replies" not in data:
            raise ExecutorUnavailable(f"{path}: expected an object with 'replies'")
        replies = [dict(r) for r in data["replies"]]
        for r in replies:
            # relative CSV paths in fixtures resolve against the script file
            csv_path = r.get("profile_csv_path")
            if csv_path and not Path(csv_path).is_absolute():
                r["profile_csv_path"] = str((path.parent / csv_path).resolve())
        return cls(replies)

    def remaining(self) -> int:
        return len(self._replies) - self._cursor

    def run_job(self, job: Dict, timeout_s: float) -> Dict:
        self.jobs.append(job)
        if self._cursor >= len(self._replies):
            raise ExecutorUnavailable(
                f"mock executor script exhausted after {self._cursor} jobs")
        reply = dict(self._replies[self._cursor])
        self._cursor += 1
        reply["job_id"] = job["job_id"]
        return reply


class SubprocessExecutor:
    """Runs one harness process per job: job JSON on stdin, reply on stdout."""

    # headroom over the job's own timeout so the child can report first
    GRACE_S = 10.0

    def __init__(self, command: str):
        if not command.strip():
            raise ExecutorUnavailable("empty executor command")
        self.argv = shlex.split(command)

    def run_job(self, job: Dict, timeout_s: float) -> Dict:
        try:
            proc = subprocess.run(
                self.argv, input=json.dumps(job), capture_output=True,
                text=True, timeout=timeout_s + self.GRACE_S)
        except FileNotFoundError as e:
            raise ExecutorUnavailable(f"executor binary not found: {e}")
        except subprocess.TimeoutExpired:
            raise ExecutorTimeout(
                f"executor gave no reply within {timeout_s + self.GRACE_S:.0f}s")
        if proc.returncode != 0:
            raise ProtocolViolation(
                f"executor exited {proc.returncode}; stderr: "
                f"{proc.stderr.strip()[:500]}")
        try:
            return json.loads(proc.stdout)
        except json.JSONDecodeError as e:
            raise ProtocolViolation(f"executor reply is not JSON: {e}")


def compute_speedup(reference_time: float, candidate_time: float) -> float:
    """Ratio of reference to candidate runtime; >1 means the candidate won."""
    if reference_time <= 0 or candidate_time <= 0:
        raise NonPositiveTime(
            f"times must be positive, got ref={reference_time} "
            f"cand={candidate_time}")
    return reference_time / candidate_time


def aggregate_timing(samples: List[float]) -> TimingStats:
    """Mean and sample (n-1) standard deviation; no outlier trimming."""
    if not samples:
        raise EmptySamples("no timing samples")
    mean = statistics.fmean(samples)
    std = statistics.stdev(samples) if len(samples) > 1 else 0.0
    return TimingStats(mean=mean, std=std)


def build_job(kernel_source: str, task: "TaskSpec", cc: CorrectnessConfig,
              tc: TimingConfig, *, timeout_s: float, want_profile: bool,
              job_id: Optional[str] = None) -> Dict:
    job = {
        "job_id": job_id or uuid.uuid4().hex,
        "mode": task.execution_mode,
        "reference_source": task.reference_source(),
        "candidate_source": kernel_source,
        "input_spec": [
            {"shape": list(s.shape), "dtype": s.dtype,
             "distribution": s.distribution}
            for s in task.input_spec
        ],
        "rtol": cc.rtol,
        "atol": cc.atol,
        "trials": cc.num_random_trials,
        "seed": cc.rng_seed,
        "warmup_iters": tc.warmup_iters,
        "timed_iters": tc.timed_iters,
        "timeout_s": timeout_s,
        "isolation": True,
    }
    if want_profile:
        job["profile"] = True
    return job


def _require_number(reply: Dict, key: str) -> float:
    v = reply.get(key)
    if not isinstance(v, (int, float)) or isinstance(v, bool):
        raise ProtocolViolation(f"reply field {key} missing or non-numeric: {v!r}")
    return float(v)


def _opt_number(reply: Dict, key: str) -> Optional[float]:
    v = reply.get(key)
    if v is None:
        return None
    if not isinstance(v, (int, float)) or isinstance(v, bool):
        raise ProtocolViolation(f"reply field {key} must be numeric, got {v!r}")
    return float(v)


def evaluate(kernel_source: str, task: "TaskSpec", cc: CorrectnessConfig,
             tc: TimingConfig, executor: Executor, *,
             timeout_s: float = 300.0, want_profile: bool = False,
             cached_reference_time: Optional[float] = None) -> EvalReport:
    """Issue exactly one executor job and fold the reply into a report.

    A timeout is downgraded to a RuntimeError report rather than raised:
    from the refinement loop's view a hung kernel is a broken kernel.
    cached_reference_time, when given, pins the speedup baseline so every
    report in a session compares against the same reference measurement.
    """
    job = build_job(kernel_source, task, cc, tc, timeout_s=timeout_s,
                    want_profile=want_profile)
    try:
        reply = executor.run_job(job, timeout_s)
    except ExecutorTimeout as e:
        return EvalReport(status=EvalStatus.RUNTIME_ERROR,
                          diagnostics=f"executor timeout: {e}")

    if not isinstance(reply, dict):
        raise ProtocolViolation(f"reply must be an object, got {type(reply).__name__}")
    if reply.get("job_id") != job["job_id"]:
        raise ProtocolViolation(
            f"reply job_id {reply.get('job_id')!r} does not match "
            f"{job['job_id']!r}")
    status_s = reply.get("status")
    if status_s not in WIRE_STATUSES:
        raise ProtocolViolation(f"unknown reply status: {status_s!r}")
    status = EvalStatus(status_s)

    diagnostics = str(reply.get("diagnostics") or "")
    profile_path = reply.get("profile_csv_path")

    if status is not EvalStatus.CORRECT:
        failing = reply.get("failing_seed")
        if failing is not None and not isinstance(failing, int):
            raise ProtocolViolation(f"failing_seed must be an integer: {failing!r}")
        return EvalReport(
            status=status,
            diagnostics=diagnostics,
            max_abs_err=_opt_number(reply, "max_abs_err"),
            max_rel_err=_opt_number(reply, "max_rel_err"),
            failing_seed=failing,
            profile_csv_path=profile_path,
        )

    cand = _require_number(reply, "candidate_time_s")
    cand_std = _opt_number(reply, "candidate_time_std_s") or 0.0
    ref = _require_number(reply, "reference_time_s")
    if cand <= 0 or ref <= 0:
        raise ProtocolViolation(
            f"correct reply carries non-positive timing: ref={ref} cand={cand}")
    baseline = cached_reference_time if cached_reference_time is not None else ref
    return EvalReport(
        status=EvalStatus.CORRECT,
        diagnostics=diagnostics,
        max_abs_err=_opt_number(reply, "max_abs_err"),
        max_rel_err=_opt_number(reply, "max_rel_err"),
        candidate_time=cand,
        candidate_time_std=cand_std,
        reference_time=baseline,
        speedup=compute_speedup(baseline, cand),
        profile_csv_path=profile_path,
    )
