"""Durable per-session storage: versions, reports, trajectory, record.

Layout, one directory per session:

    <dir>/record.json          rewritten atomically (temp + rename)
    <dir>/versions/<id>.src    immutable kernel sources
    <dir>/calls/<seq>.*        model-call journal (written by the client)
    <dir>/lock                 single-writer file lock

Every append flushes before returning, and version sources land on disk
before the record references them, so a crash at any point reloads to a
valid prefix of the session.
"""
from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from filelock import FileLock

from .errors import DuplicateId, NoCorrectVersion, StoreError, UnknownVersionId
from .evaluation import EvalReport, EvalStatus
from .patching import fingerprint
from .workflow import Phase, TrajectoryPoint

SCHEMA_VERSION = 1


class KernelOrigin(Enum):
    INITIAL = "initial"
    REPAIR = "repair"
    OPTIMIZATION = "optimization"


@dataclass(frozen=True)
class KernelVersion:
    id: str
    parent_id: Optional[str]
    source: str
    fingerprint: str
    origin: KernelOrigin
    depth_at_creation: int
    created_at: float

    def __post_init__(self) -> None:
        if self.fingerprint != fingerprint(self.source):
            raise ValueError(f"version {self.id}: fingerprint does not match source")
        if self.origin is KernelOrigin.INITIAL and self.parent_id is not None:
            raise ValueError("initial version cannot have a parent")
        if self.origin is not KernelOrigin.INITIAL and self.parent_id is None:
            raise ValueError(f"{self.origin.value} version needs a parent")


def version_id_for(seq: int, source: str) -> str:
    return f"v{seq:03d}-{fingerprint(source)[:12]}"


def make_version(seq: int, source: str, origin: KernelOrigin,
                 parent_id: Optional[str], depth: int,
                 created_at: Optional[float] = None) -> KernelVersion:
    return KernelVersion(
        id=version_id_for(seq, source),
        parent_id=parent_id,
        source=source,
        fingerprint=fingerprint(source),
        origin=origin,
        depth_at_creation=depth,
        created_at=time.time() if created_at is None else created_at,
    )


@dataclass(frozen=True)
class SessionRecord:
    session_id: str
    task_id: str
    config: Dict
    versions: Tuple[KernelVersion, ...] = ()
    reports: Dict[str, EvalReport] = field(default_factory=dict)
    trajectory: Tuple[TrajectoryPoint, ...] = ()
    terminal_phase: Optional[Phase] = None


def best_kernel(record: SessionRecord) -> KernelVersion:
    """Correct version with the highest speedup; earliest wins ties."""
    best: Optional[KernelVersion] = None
    best_speedup = float("-inf")
    for v in record.versions:
        report = record.reports.get(v.id)
        if report is None or report.status is not EvalStatus.CORRECT:
            continue
        assert report.speedup is not None
        if report.speedup > best_speedup:
            best, best_speedup = v, report.speedup
    if best is None:
        raise NoCorrectVersion(f"session {record.session_id} has no correct version")
    return best


# ---------------------------------------------------------------------------
# (de)serialization
# ---------------------------------------------------------------------------

def _report_to_dict(r: EvalReport) -> Dict:
    d = asdict(r)
    d["status"] = r.status.value
    return d


def _report_from_dict(d: Dict) -> EvalReport:
    d = dict(d)
    d["status"] = EvalStatus(d["status"])
    return EvalReport(**d)


def _version_to_dict(v: KernelVersion) -> Dict:
    return {"id": v.id, "parent_id": v.parent_id, "fingerprint": v.fingerprint,
            "origin": v.origin.value, "depth_at_creation": v.depth_at_creation,
            "created_at": v.created_at}


def _point_to_dict(p: TrajectoryPoint) -> Dict:
    return asdict(p)


def record_to_dict(record: SessionRecord, *, include_sources: bool = False) -> Dict:
    d = {
        "schema_version": SCHEMA_VERSION,
        "session_id": record.session_id,
        "task_id": record.task_id,
        "config": record.config,
        "terminal_phase": (record.terminal_phase.value
                           if record.terminal_phase else None),
        "versions": [_version_to_dict(v) for v in record.versions],
        "reports": {vid: _report_to_dict(r)
                    for vid, r in record.reports.items()},
        "trajectory": [_point_to_dict(p) for p in record.trajectory],
    }
    if include_sources:
        d["sources"] = {v.id: v.source for v in record.versions}
    return d


def record_from_dict(d: Dict, sources: Dict[str, str]) -> SessionRecord:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise StoreError(f"unsupported record schema: {d.get('schema_version')!r}")
    versions = []
    for vd in d["versions"]:
        if vd["id"] not in sources:
            raise StoreError(f"record references missing source {vd['id']}")
        versions.append(KernelVersion(
            id=vd["id"], parent_id=vd["parent_id"], source=sources[vd["id"]],
            fingerprint=vd["fingerprint"], origin=KernelOrigin(vd["origin"]),
            depth_at_creation=vd["depth_at_creation"],
            created_at=vd["created_at"]))
    return SessionRecord(
        session_id=d["session_id"],
        task_id=d["task_id"],
        config=d["config"],
        versions=tuple(versions),
        reports={vid: _report_from_dict(rd) for vid, rd in d["reports"].items()},
        trajectory=tuple(TrajectoryPoint(**pd) for pd in d["trajectory"]),
        terminal_phase=(Phase(d["terminal_phase"])
                        if d["terminal_phase"] else None),
    )


def normalized_for_comparison(record: SessionRecord) -> Dict:
    """Record as a dict with wall-clock fields zeroed, for replay equality."""
    d = record_to_dict(record, include_sources=True)
    for vd in d["versions"]:
        vd["created_at"] = 0.0
    for pd in d["trajectory"]:
        pd["wall_time"] = 0.0
    d["session_id"] = ""
    return d


def first_difference(a: Dict, b: Dict, path: str = "record") -> Optional[str]:
    """Path to the first structural difference between two record dicts."""
    if type(a) is not type(b):
        return f"{path}: {type(a).__name__} vs {type(b).__name__}"
    if isinstance(a, dict):
        for key in sorted(set(a) | set(b)):
            if key not in a:
                return f"{path}.{key}: only in replay"
            if key not in b:
                return f"{path}.{key}: only in original"
            diff = first_difference(a[key], b[key], f"{path}.{key}")
            if diff:
                return diff
        return None
    if isinstance(a, list):
        if len(a) != len(b):
            return f"{path}: length {len(a)} vs {len(b)}"
        for i, (x, y) in enumerate(zip(a, b)):
            diff = first_difference(x, y, f"{path}[{i}]")
            if diff:
                return diff
        return None
    if a != b:
        return f"{path}: {a!r} vs {b!r}"
    return None


# ---------------------------------------------------------------------------
# disk store
# ---------------------------------------------------------------------------

class SessionStore:
    """Single-writer persistence for one session directory.

    Use as a context manager; the file lock is held for the store's
    lifetime and concurrent readers go through load_record.
    """

    def __init__(self, directory: Path, record: SessionRecord):
        self.directory = Path(directory)
        self._record = record
        self._lock = FileLock(str(self.directory / "lock"))

    # -- lifecycle -----------------------------------------------------------

    @classmethod
    def create(cls, root: Path, session_id: str, task_id: str,
               config: Dict) -> "SessionStore":
        directory = Path(root) / session_id
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "versions").mkdir(exist_ok=True)
        (directory / "calls").mkdir(exist_ok=True)
        if (directory / "record.json").exists():
            raise StoreError(f"session directory already initialized: {directory}")
        store = cls(directory, SessionRecord(session_id=session_id,
                                             task_id=task_id, config=config))
        store._lock.acquire(timeout=10)
        store._flush()
        return store

    def close(self) -> None:
        if self._lock.is_locked:
            self._lock.release()

    def __enter__(self) -> "SessionStore":
        if not self._lock.is_locked:
            self._lock.acquire(timeout=10)
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    @property
    def record(self) -> SessionRecord:
        return self._record

    # -- appends -------------------------------------------------------------

    def append_version(self, version: KernelVersion) -> SessionRecord:
        known = {v.id for v in self._record.versions}
        if version.id in known:
            raise DuplicateId(f"version {version.id} already recorded")
        if version.parent_id is not None and version.parent_id not in known:
            raise UnknownVersionId(f"parent {version.parent_id} not recorded")
        src_path = self.directory / "versions" / f"{version.id}.src"
        tmp = src_path.with_suffix(".src.tmp")
        tmp.write_text(version.source)
        os.replace(tmp, src_path)
        self._record = replace(self._record,
                               versions=self._record.versions + (version,))
        self._flush()
        return self._record

    def append_report(self, version_id: str, report: EvalReport) -> SessionRecord:
        if version_id not in {v.id for v in self._record.versions}:
            raise UnknownVersionId(f"report for unknown version {version_id}")
        if version_id in self._record.reports:
            raise DuplicateId(f"version {version_id} already has a report")
        reports = dict(self._record.reports)
        reports[version_id] = report
        self._record = replace(self._record, reports=reports)
        self._flush()
        return self._record

    def append_trajectory_point(self, point: TrajectoryPoint) -> SessionRecord:
        report = self._record.reports.get(point.version_id)
        if report is None:
            raise UnknownVersionId(
                f"trajectory point references {point.version_id} which has "
                f"no report yet")
        if point.correct and point.speedup != report.speedup:
            raise StoreError(
                f"trajectory speedup {point.speedup} disagrees with report "
                f"{report.speedup} for {point.version_id}")
        self._record = replace(self._record,
                               trajectory=self._record.trajectory + (point,))
        self._flush()
        return self._record

    def finalize(self, terminal_phase: Phase) -> SessionRecord:
        if terminal_phase not in (Phase.DONE, Phase.FAILED):
            raise StoreError(f"cannot finalize into {terminal_phase.value}")
        self._record = replace(self._record, terminal_phase=terminal_phase)
        self._flush()
        return self._record

    # -- io ------------------------------------------------------------------

    def _flush(self) -> None:
        payload = json.dumps(record_to_dict(self._record), indent=2,
                             sort_keys=True)
        target = self.directory / "record.json"
        tmp = self.directory / "record.json.tmp"
        with open(tmp, "w") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, target)


def load_record(directory: Path) -> SessionRecord:
    """Read-only load; safe concurrently with a writer thanks to the
    atomic record.json replace."""
    directory = Path(directory)
    record_path = directory / "record.json"
    if not record_path.is_file():
        raise StoreError(f"not a session directory: {directory}")
    d = json.loads(record_path.read_text())
    sources = {}
    for vd in d.get("versions", []):
        src_path = directory / "versions" / f"{vd['id']}.src"
        if not src_path.is_file():
            raise StoreError(f"missing source file for version {vd['id']}")
        sources[vd["id"]] = src_path.read_text()
    return record_from_dict(d, sources)


# ---------------------------------------------------------------------------
# report rendering
# ---------------------------------------------------------------------------

def render_speedup_table(rows: List[Tuple[str, float]],
                         kernel_header: str = "Kernel") -> str:
    """Markdown speedup table: one row per kernel at two decimals, then an
    arithmetic-mean row at three."""
    lines = [f"| {kernel_header} | Speedup |", "|---|---|"]
    for name, speedup in rows:
        lines.append(f"| {name} | {speedup:.2f} |")
    if rows:
        mean = sum(s for _, s in rows) / len(rows)
        lines.append(f"| Arithmetic mean | {mean:.3f} |")
    return "\n".join(lines)


def export_report(record: SessionRecord, format: str = "markdown") -> str:
    """Render a finished session: JSON is the lossless record; markdown is
    the kernel/speedup table plus the depth-to-speedup series."""
    if format == "json":
        return json.dumps(record_to_dict(record, include_sources=True),
                          indent=2, sort_keys=True)
    if format != "markdown":
        raise ValueError(f"unknown report format: {format!r}")

    lines = [f"# Session {record.session_id}", ""]
    lines.append(f"- task: {record.task_id}")
    terminal = record.terminal_phase.value if record.terminal_phase else "running"
    lines.append(f"- terminal phase: {terminal}")
    try:
        best = best_kernel(record)
        best_speedup = record.reports[best.id].speedup
        lines.append(f"- best version: {best.id} "
                     f"(depth {best.depth_at_creation})")
        lines.append("")
        lines.append("## Speedup")
        lines.append("")
        lines.append(render_speedup_table([(record.task_id, best_speedup)]))
    except NoCorrectVersion:
        lines.append("- best version: none (no correct kernel)")
    lines.append("")
    lines.append("## Trajectory")
    lines.append("")
    lines.append("| depth | version | correct | speedup | profiling |")
    lines.append("|---|---|---|---|---|")
    for p in record.trajectory:
        speedup = f"{p.speedup:.2f}" if p.speedup is not None else "-"
        lines.append(f"| {p.depth} | {p.version_id} | "
                     f"{'yes' if p.correct else 'no'} | {speedup} | "
                     f"{'on' if p.profiling_enabled else 'off'} |")
    lines.append("")
    return "\n".join(lines)
