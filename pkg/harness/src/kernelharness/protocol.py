"""Wire protocol for one-shot kernel evaluation jobs.

One JSON document arrives on stdin, one JSON reply leaves on stdout, and
the process exits. Exit code 0 means a well-formed reply was emitted,
including replies that report failures; exit code 3 means stdin could not
be parsed as a job at all. Nothing else is ever written to stdout.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

EXIT_REPLY = 0
EXIT_UNPARSEABLE = 3

STATUSES = ("compile_error", "runtime_error", "mismatch", "correct")
MODES = ("evaluate", "evaluate_stub")
DTYPES = ("f32", "f16")
DISTRIBUTIONS = ("normal", "uniform")

# tracebacks from arbitrary user code can be enormous; keep replies bounded
DIAGNOSTICS_LIMIT = 20_000


class JobError(Exception):
    """stdin held no job document; there is no job_id to address a reply to."""


class HarnessError(Exception):
    """A parseable job that cannot be run as requested.

    Reported on the wire as status runtime_error so the reply stays
    well-formed for the caller.
    """


def parse_job(text: str) -> Dict:
    """First gate: anything that fails here exits 3 instead of replying."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise JobError(f"stdin is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise JobError(f"job must be a JSON object, got {type(data).__name__}")
    job_id = data.get("job_id")
    if not isinstance(job_id, str) or not job_id:
        raise JobError("job_id is missing or not a non-empty string")
    return data


@dataclass(frozen=True)
class InputSpec:
    shape: Tuple[int, ...]
    dtype: str
    distribution: str


@dataclass(frozen=True)
class JobSpec:
    """A validated job. Field names mirror the wire document."""

    job_id: str
    mode: str
    reference_source: str
    candidate_source: str
    inputs: Tuple[InputSpec, ...]
    rtol: float
    atol: float
    trials: int
    seed: int
    warmup_iters: int
    timed_iters: int
    timeout_s: float
    isolation: bool = True
    profile: bool = False

    @classmethod
    def from_dict(cls, raw: Dict) -> "JobSpec":
        def text(key: str) -> str:
            v = raw.get(key)
            if not isinstance(v, str):
                raise HarnessError(f"job field {key!r} must be a string")
            return v

        def positive_number(key: str) -> float:
            v = raw.get(key)
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise HarnessError(f"job field {key!r} must be a number")
            if v <= 0:
                raise HarnessError(f"job field {key!r} must be positive")
            return float(v)

        def integer(key: str, minimum: int) -> int:
            v = raw.get(key)
            if isinstance(v, bool) or not isinstance(v, int):
                raise HarnessError(f"job field {key!r} must be an integer")
            if v < minimum:
                raise HarnessError(f"job field {key!r} must be >= {minimum}")
            return v

        def flag(key: str, default: bool) -> bool:
            v = raw.get(key, default)
            if not isinstance(v, bool):
                raise HarnessError(f"job field {key!r} must be a boolean")
            return v

        mode = text("mode")
        if mode not in MODES:
            raise HarnessError(
                f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")

        raw_inputs = raw.get("input_spec")
        if not isinstance(raw_inputs, list) or not raw_inputs:
            raise HarnessError("job field 'input_spec' must be a non-empty list")
        specs = []
        for i, entry in enumerate(raw_inputs):
            if not isinstance(entry, dict):
                raise HarnessError(f"input_spec[{i}] must be an object")
            shape = entry.get("shape")
            if (not isinstance(shape, list) or not shape
                    or any(isinstance(d, bool) or not isinstance(d, int) or d <= 0
                           for d in shape)):
                raise HarnessError(
                    f"input_spec[{i}].shape must be a list of positive integers")
            dtype = entry.get("dtype", "f32")
            if dtype not in DTYPES:
                raise HarnessError(
                    f"input_spec[{i}].dtype must be one of {', '.join(DTYPES)}")
            distribution = entry.get("distribution", "normal")
            if distribution not in DISTRIBUTIONS:
                raise HarnessError(
                    f"input_spec[{i}].distribution must be one of "
                    f"{', '.join(DISTRIBUTIONS)}")
            specs.append(InputSpec(shape=tuple(shape), dtype=dtype,
                                   distribution=distribution))

        return cls(
            job_id=str(raw["job_id"]),
            mode=mode,
            reference_source=text("reference_source"),
            candidate_source=text("candidate_source"),
            inputs=tuple(specs),
            rtol=positive_number("rtol"),
            atol=positive_number("atol"),
            trials=integer("trials", 1),
            seed=integer("seed", 0),
            warmup_iters=integer("warmup_iters", 1),
            timed_iters=integer("timed_iters", 1),
            timeout_s=positive_number("timeout_s"),
            isolation=flag("isolation", True),
            profile=flag("profile", False),
        )


def _clip(text: str) -> str:
    if len(text) <= DIAGNOSTICS_LIMIT:
        return text
    return text[:DIAGNOSTICS_LIMIT] + "\n[... diagnostics truncated ...]"


def make_reply(job_id: str, status: str, *, diagnostics: str = "",
               max_abs_err: Optional[float] = None,
               max_rel_err: Optional[float] = None,
               failing_seed: Optional[int] = None,
               reference_time_s: Optional[float] = None,
               candidate_time_s: Optional[float] = None,
               candidate_time_std_s: Optional[float] = None,
               profile_csv_path: Optional[str] = None) -> Dict:
    """Shape one reply document. Every reply carries the same key set so
    callers never branch on presence; profile_csv_path appears only when a
    CSV was actually written."""
    if status not in STATUSES:
        raise ValueError(f"unknown reply status {status!r}")
    timing = (reference_time_s, candidate_time_s, candidate_time_std_s)
    if status == "correct":
        if any(v is None for v in timing):
            raise ValueError("a correct reply must carry all timing fields")
    elif any(v is not None for v in timing):
        # timing only ever follows full correctness validation
        raise ValueError(f"a {status} reply must not carry timing fields")
    reply = {
        "job_id": job_id,
        "status": status,
        "diagnostics": _clip(diagnostics),
        "max_abs_err": max_abs_err,
        "max_rel_err": max_rel_err,
        "failing_seed": failing_seed,
        "reference_time_s": reference_time_s,
        "candidate_time_s": candidate_time_s,
        "candidate_time_std_s": candidate_time_std_s,
    }
    if profile_csv_path is not None:
        reply["profile_csv_path"] = profile_csv_path
    return reply
