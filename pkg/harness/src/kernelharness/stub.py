"""CPU protocol mode: sources are plain host functions over numpy arrays.

In ``evaluate_stub`` mode both reference_source and candidate_source must
define ``kernel(*arrays) -> array`` at module top level, taking one
argument per entry in the job's input spec. Functions are expected to be
pure; each trial's inputs are generated once and handed to both sides
without defensive copies, so a mutating kernel will show up as a mismatch.

The gating order matches the real mode: load the candidate, load the
reference, run every randomized correctness trial, and only then warm up
and time. A candidate that fails any gate is never timed.
"""
from __future__ import annotations

import os
import statistics
import tempfile
import time
import traceback
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from .protocol import InputSpec, JobSpec, make_reply

ENTRY_POINT = "kernel"

_NP_DTYPES = {"f32": np.float32, "f16": np.float16}

# relative error is reported against |reference| floored here, so a zero
# reference value cannot push the metric to infinity and break the JSON reply
_REL_ERR_FLOOR = 1e-12

# perf_counter ticks are finite; a measured mean of exactly zero would
# violate the positive-time contract on correct replies
_MIN_MEAN_TIME_S = 1e-9

PROFILE_CSV_HEADER = (
    "grid_x,grid_y,grid_z,block_x,block_y,block_z,regs_per_thread,"
    "static_smem,dynamic_smem,duration_us,achieved_occupancy_pct,"
    "mem_throughput_pct,compute_throughput_pct")

# canned single-launch measurement for protocol tests; the numbers describe
# a bandwidth-bound elementwise pass
STUB_PROFILE_ROW = "4096,1,1,256,1,1,16,0,0,12.40,88.0,91.5,18.2"


class SourceLoadError(Exception):
    """The source failed to compile, execute at import, or define kernel()."""


def load_host_fn(source: str, label: str) -> Callable:
    try:
        code = compile(source, f"<{label}>", "exec")
    except SyntaxError:
        raise SourceLoadError(traceback.format_exc(limit=0))
    namespace: Dict = {"__name__": f"harness_{label}"}
    try:
        exec(code, namespace)
    except Exception:
        raise SourceLoadError(traceback.format_exc())
    fn = namespace.get(ENTRY_POINT)
    if not callable(fn):
        raise SourceLoadError(
            f"{label} source does not define a callable {ENTRY_POINT}()")
    return fn


def generate_inputs(specs: Sequence[InputSpec], seed: int) -> List[np.ndarray]:
    """Deterministic per seed. Draws happen in float32 and are narrowed to
    float16 afterwards when asked for; numpy's generators cannot fill half
    precision directly."""
    rng = np.random.default_rng(seed)
    arrays = []
    for spec in specs:
        if spec.distribution == "normal":
            a = rng.standard_normal(spec.shape, dtype=np.float32)
        else:
            a = rng.random(spec.shape, dtype=np.float32)
        wanted = _NP_DTYPES[spec.dtype]
        arrays.append(a if a.dtype == wanted else a.astype(wanted))
    return arrays


def error_magnitudes(actual: np.ndarray,
                     expected: np.ndarray) -> Tuple[float, float]:
    diff = np.abs(np.subtract(actual, expected, dtype=np.float64))
    max_abs = float(diff.max())
    denom = np.maximum(np.abs(expected.astype(np.float64)), _REL_ERR_FLOOR)
    max_rel = float((diff / denom).max())
    return max_abs, max_rel


def time_host_fn(fn: Callable, inputs: Sequence[np.ndarray],
                 warmup_iters: int, timed_iters: int) -> Tuple[float, float]:
    """Mean and sample standard deviation over timed_iters single calls,
    after warmup_iters untimed calls."""
    for _ in range(warmup_iters):
        fn(*inputs)
    samples = []
    for _ in range(timed_iters):
        start = time.perf_counter()
        fn(*inputs)
        samples.append(time.perf_counter() - start)
    mean = max(statistics.fmean(samples), _MIN_MEAN_TIME_S)
    std = statistics.stdev(samples) if len(samples) > 1 else 0.0
    return mean, std


def write_stub_profile() -> str:
    """Emit the canned profiler CSV to a temp file and return its path.

    The parent process reads the file after this process exits, so cleanup
    is the caller's responsibility."""
    fd, path = tempfile.mkstemp(prefix="stub_profile_", suffix=".csv")
    with os.fdopen(fd, "w") as fh:
        fh.write(PROFILE_CSV_HEADER + "\n" + STUB_PROFILE_ROW + "\n")
    return path


def run_stub(job: JobSpec) -> Dict:
    try:
        candidate = load_host_fn(job.candidate_source, "candidate")
    except SourceLoadError as e:
        return make_reply(job.job_id, "compile_error", diagnostics=str(e))
    try:
        reference = load_host_fn(job.reference_source, "reference")
    except SourceLoadError as e:
        # not the candidate's fault, so it must not read as a compile failure
        return make_reply(job.job_id, "runtime_error",
                          diagnostics=f"reference source failed to load: {e}")

    worst_abs = 0.0
    worst_rel = 0.0
    for trial in range(1, job.trials + 1):
        trial_seed = job.seed + trial
        inputs = generate_inputs(job.inputs, trial_seed)
        try:
            expected = np.asarray(reference(*inputs))
        except Exception:
            return make_reply(job.job_id, "runtime_error",
                              diagnostics="reference raised:\n"
                                          + traceback.format_exc())
        try:
            actual = np.asarray(candidate(*inputs))
        except Exception:
            return make_reply(job.job_id, "runtime_error",
                              diagnostics=traceback.format_exc())
        if actual.shape != expected.shape:
            return make_reply(
                job.job_id, "mismatch",
                diagnostics=(f"trial {trial} (seed {trial_seed}): output "
                             f"shape {actual.shape} does not match reference "
                             f"shape {expected.shape}"),
                failing_seed=trial_seed)
        abs_err, rel_err = error_magnitudes(actual, expected)
        if not np.allclose(actual, expected, rtol=job.rtol, atol=job.atol):
            return make_reply(
                job.job_id, "mismatch",
                diagnostics=(f"trial {trial} (seed {trial_seed}): max abs err "
                             f"{abs_err:.6e}, max rel err {rel_err:.6e} "
                             f"outside rtol={job.rtol} atol={job.atol}"),
                max_abs_err=abs_err, max_rel_err=rel_err,
                failing_seed=trial_seed)
        worst_abs = max(worst_abs, abs_err)
        worst_rel = max(worst_rel, rel_err)
        # keep at most one trial's tensors alive at a time
        del inputs, expected, actual

    timing_inputs = generate_inputs(job.inputs, job.seed)
    try:
        ref_mean, _ = time_host_fn(reference, timing_inputs,
                                   job.warmup_iters, job.timed_iters)
        cand_mean, cand_std = time_host_fn(candidate, timing_inputs,
                                           job.warmup_iters, job.timed_iters)
    except Exception:
        return make_reply(job.job_id, "runtime_error",
                          diagnostics=traceback.format_exc())

    profile_path = write_stub_profile() if job.profile else None
    return make_reply(job.job_id, "correct",
                      max_abs_err=worst_abs, max_rel_err=worst_rel,
                      reference_time_s=ref_mean,
                      candidate_time_s=cand_mean,
                      candidate_time_std_s=cand_std,
                      profile_csv_path=profile_path)
