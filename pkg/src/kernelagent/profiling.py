"""Hardware profile parsing and the per-workload profiling schedule.

The executor harness exports one CSV row per kernel launch; this module
distills that into a short structured summary for the optimization prompt
and decides, per workload class and refinement depth, whether the summary
is included at all.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Tuple

from .errors import MissingColumn, ProfileParseError, UnparseableValue

CSV_COLUMNS = (
    "grid_x", "grid_y", "grid_z",
    "block_x", "block_y", "block_z",
    "regs_per_thread", "static_smem", "dynamic_smem",
    "duration_us", "achieved_occupancy_pct",
    "mem_throughput_pct", "compute_throughput_pct",
)

_INT_COLUMNS = CSV_COLUMNS[:9]
_FLOAT_COLUMNS = CSV_COLUMNS[9:]


class WorkloadClass(Enum):
    MATMUL_LIKE = "matmul_like"
    ACTIVATION_ELEMENTWISE = "activation_elementwise"
    OTHER = "other"

    @classmethod
    def parse(cls, name: str) -> "WorkloadClass":
        try:
            return cls(name)
        except ValueError:
            valid = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown workload class {name!r}; one of: {valid}")


@dataclass(frozen=True)
class ProfileSummary:
    grid_dims: Tuple[int, int, int]
    block_dims: Tuple[int, int, int]
    registers_per_thread: int
    static_smem_bytes: int
    dynamic_smem_bytes: int
    duration_us: float
    achieved_occupancy_pct: float
    memory_throughput_pct: float
    compute_throughput_pct: float
    diagnostics: Tuple[str, ...] = ()


@dataclass(frozen=True)
class ProfilingSchedule:
    """Maps each workload class to the first depth at which profiling
    feedback enters the optimization prompt."""
    start_depth: Dict[WorkloadClass, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for wc in WorkloadClass:
            if wc not in self.start_depth:
                raise ValueError(f"schedule missing class {wc.value}")
            if self.start_depth[wc] < 0:
                raise ValueError(f"start depth for {wc.value} must be >= 0")

    @classmethod
    def default(cls) -> "ProfilingSchedule":
        # matmul optimization runs structural passes first; elementwise
        # workloads have little structure to find, so feedback starts at 1
        return cls(start_depth={
            WorkloadClass.MATMUL_LIKE: 11,
            WorkloadClass.ACTIVATION_ELEMENTWISE: 1,
            WorkloadClass.OTHER: 1,
        })


def profiling_enabled(workload_class: WorkloadClass, depth: int,
                      schedule: ProfilingSchedule) -> bool:
    """True iff an optimization prompt targeting this depth should carry
    the profiling summary. Depth counts completed optimization iterations,
    so callers pass >= 1."""
    return depth >= schedule.start_depth[workload_class]


def _derive_diagnostics(mem: float, compute: float, occupancy: float) -> Tuple[str, ...]:
    findings: List[str] = []
    if mem > 80.0 and compute < 40.0:
        findings.append(
            f"memory-bound: memory throughput {mem:.1f}% with compute at "
            f"{compute:.1f}%; reduce global traffic or improve reuse")
    if mem < 40.0 and compute < 40.0:
        findings.append(
            f"latency-bound: memory ({mem:.1f}%) and compute ({compute:.1f}%) "
            f"are both underutilized; expose more parallelism or overlap")
    if occupancy < 50.0:
        findings.append(
            f"occupancy-limited: achieved occupancy {occupancy:.1f}% is below "
            f"50%; check register and shared-memory pressure")
    return tuple(findings)


def parse_profile(raw: str) -> ProfileSummary:
    """Parse a profiler CSV export into a summary of the dominant launch.

    Requires every documented column (extras are ignored). With several
    rows, the one with the largest duration_us wins: that launch is where
    optimization effort pays off.
    """
    reader = csv.DictReader(io.StringIO(raw))
    if reader.fieldnames is None:
        raise ProfileParseError("profile export is empty")
    missing = [c for c in CSV_COLUMNS if c not in reader.fieldnames]
    if missing:
        raise MissingColumn("profile export lacks columns: " + ", ".join(missing))

    rows: List[Dict[str, object]] = []
    for lineno, raw_row in enumerate(reader, start=2):
        parsed: Dict[str, object] = {}
        for col in _INT_COLUMNS:
            try:
                parsed[col] = int(raw_row[col])
            except (TypeError, ValueError):
                raise UnparseableValue(
                    f"line {lineno}, column {col}: {raw_row[col]!r} is not an integer")
        for col in _FLOAT_COLUMNS:
            try:
                parsed[col] = float(raw_row[col])
            except (TypeError, ValueError):
                raise UnparseableValue(
                    f"line {lineno}, column {col}: {raw_row[col]!r} is not a number")
        for col in ("achieved_occupancy_pct", "mem_throughput_pct",
                    "compute_throughput_pct"):
            v = parsed[col]
            if not 0.0 <= v <= 100.0:  # type: ignore[operator]
                raise UnparseableValue(
                    f"line {lineno}, column {col}: {v} outside 0..100")
        for col in ("grid_x", "grid_y", "grid_z", "block_x", "block_y", "block_z"):
            if parsed[col] <= 0:  # type: ignore[operator]
                raise UnparseableValue(
                    f"line {lineno}, column {col}: dims must be positive, got {parsed[col]}")
        rows.append(parsed)

    if not rows:
        raise ProfileParseError("profile export has a header but no launches")

    dominant = max(rows, key=lambda r: r["duration_us"])  # type: ignore[arg-type]
    mem = float(dominant["mem_throughput_pct"])    # type: ignore[arg-type]
    cmp_ = float(dominant["compute_throughput_pct"])  # type: ignore[arg-type]
    occ = float(dominant["achieved_occupancy_pct"])   # type: ignore[arg-type]
    return ProfileSummary(
        grid_dims=(int(dominant["grid_x"]), int(dominant["grid_y"]),
                   int(dominant["grid_z"])),
        block_dims=(int(dominant["block_x"]), int(dominant["block_y"]),
                    int(dominant["block_z"])),
        registers_per_thread=int(dominant["regs_per_thread"]),
        static_smem_bytes=int(dominant["static_smem"]),
        dynamic_smem_bytes=int(dominant["dynamic_smem"]),
        duration_us=float(dominant["duration_us"]),
        achieved_occupancy_pct=occ,
        memory_throughput_pct=mem,
        compute_throughput_pct=cmp_,
        diagnostics=_derive_diagnostics(mem, cmp_, occ),
    )


def summarize_for_prompt(summary: ProfileSummary) -> str:
    """Render the fixed-layout text block embedded under the PROFILING
    SUMMARY heading of optimization prompts. Stays well under 40 lines."""
    g = summary.grid_dims
    b = summary.block_dims
    lines = [
        "Launch configuration:",
        f"  grid dims:  ({g[0]}, {g[1]}, {g[2]})",
        f"  block dims: ({b[0]}, {b[1]}, {b[2]})",
        f"  registers per thread: {summary.registers_per_thread}",
        f"  static shared memory:  {summary.static_smem_bytes} bytes",
        f"  dynamic shared memory: {summary.dynamic_smem_bytes} bytes",
        "Timing:",
        f"  kernel duration: {summary.duration_us:.2f} us",
        "Utilization:",
        f"  achieved occupancy:  {summary.achieved_occupancy_pct:.1f}%",
        f"  memory throughput:   {summary.memory_throughput_pct:.1f}%",
        f"  compute throughput:  {summary.compute_throughput_pct:.1f}%",
        "Diagnostics:",
    ]
    if summary.diagnostics:
        lines.extend(f"  - {d}" for d in summary.diagnostics)
    else:
        lines.append("  - no bottleneck indicated by threshold rules")
    return "\n".join(lines)
