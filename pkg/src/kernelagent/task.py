"""Task manifests: what kernel to produce and how to judge it.

One JSON manifest per task. The manifest states the reference
implementation, tensor shapes, workload class, and any correctness or
timing overrides; an optional "run" section holds config-file equivalents
of the CLI flags (flags win on conflict).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Tuple

from .errors import ManifestError
from .evaluation import CorrectnessConfig, TimingConfig
from .profiling import WorkloadClass

DTYPES = ("f32", "f16")
DISTRIBUTIONS = ("normal", "uniform")
EXECUTION_MODES = ("evaluate", "evaluate_stub")


@dataclass(frozen=True)
class InputTensorSpec:
    shape: Tuple[int, ...]
    dtype: str = "f32"
    distribution: str = "normal"

    def __post_init__(self) -> None:
        if not self.shape or any(d <= 0 for d in self.shape):
            raise ValueError(f"shape must be non-empty and positive: {self.shape}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {DTYPES}, got {self.dtype!r}")
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(
                f"distribution must be one of {DISTRIBUTIONS}, "
                f"got {self.distribution!r}")


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    workload_class: WorkloadClass
    reference_source_path: Path
    input_spec: Tuple[InputTensorSpec, ...]
    correctness: CorrectnessConfig = CorrectnessConfig()
    timing: TimingConfig = TimingConfig()
    # "evaluate" runs real kernels; "evaluate_stub" asks the harness for its
    # CPU protocol-conformance mode where candidates are host functions
    execution_mode: str = "evaluate"
    description: str = ""

    def __post_init__(self) -> None:
        if not self.task_id:
            raise ValueError("task_id must be non-empty")
        if not self.input_spec:
            raise ValueError("input_spec must name at least one tensor")
        if self.execution_mode not in EXECUTION_MODES:
            raise ValueError(
                f"execution_mode must be one of {EXECUTION_MODES}, "
                f"got {self.execution_mode!r}")

    def reference_source(self) -> str:
        return self.reference_source_path.read_text()


@dataclass(frozen=True)
class Manifest:
    task: TaskSpec
    # config-file equivalents of CLI flags; the CLI overlays real flags on top
    run_options: Dict = field(default_factory=dict)


def _correctness_from(obj: Dict) -> CorrectnessConfig:
    return CorrectnessConfig(
        rtol=float(obj.get("rtol", 1e-3)),
        atol=float(obj.get("atol", 1e-3)),
        num_random_trials=int(obj.get("num_random_trials", 5)),
        rng_seed=int(obj.get("rng_seed", 1000)),
    )


def _timing_from(obj: Dict) -> TimingConfig:
    return TimingConfig(
        warmup_iters=int(obj.get("warmup_iters", 10)),
        timed_iters=int(obj.get("timed_iters", 100)),
        synchronize_each_iter=bool(obj.get("synchronize_each_iter", True)),
    )


def load_manifest(path: Path) -> Manifest:
    """Parse and validate a task manifest; all errors carry the file path."""
    path = Path(path)
    try:
        raw = path.read_text()
    except OSError as e:
        raise ManifestError(f"{path}: cannot read manifest: {e}")
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}:{e.lineno}: invalid JSON: {e.msg}")
    if not isinstance(data, dict):
        raise ManifestError(f"{path}: manifest must be a JSON object")

    def need(key: str):
        if key not in data:
            raise ManifestError(f"{path}: missing required field {key!r}")
        return data[key]

    try:
        workload = WorkloadClass.parse(str(need("workload_class")))
    except ValueError as e:
        raise ManifestError(f"{path}: {e}")

    ref_rel = str(need("reference_source_path"))
    ref_path = (path.parent / ref_rel).resolve()
    if not ref_path.is_file():
        raise ManifestError(f"{path}: reference source not found: {ref_path}")

    raw_inputs = need("input_spec")
    if not isinstance(raw_inputs, list) or not raw_inputs:
        raise ManifestError(f"{path}: input_spec must be a non-empty list")
    specs = []
    for i, entry in enumerate(raw_inputs):
        try:
            specs.append(InputTensorSpec(
                shape=tuple(int(d) for d in entry["shape"]),
                dtype=str(entry.get("dtype", "f32")),
                distribution=str(entry.get("distribution", "normal")),
            ))
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestError(f"{path}: input_spec[{i}]: {e}")

    try:
        task = TaskSpec(
            task_id=str(need("task_id")),
            workload_class=workload,
            reference_source_path=ref_path,
            input_spec=tuple(specs),
            correctness=_correctness_from(data.get("correctness", {})),
            timing=_timing_from(data.get("timing", {})),
            execution_mode=str(data.get("execution_mode", "evaluate")),
            description=str(data.get("description", "")),
        )
    except ValueError as e:
        raise ManifestError(f"{path}: {e}")

    run_options = data.get("run", {})
    if not isinstance(run_options, dict):
        raise ManifestError(f"{path}: 'run' section must be an object")
    return Manifest(task=task, run_options=run_options)
