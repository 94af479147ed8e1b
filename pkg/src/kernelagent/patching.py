"""Constrained line-level patch format: parse, validate, apply.

The model repairs the current kernel by emitting edit blocks; each block
targets 1-based line numbers of the exact source that was shown to it.
The concrete wire syntax is documented in docs/patch-format.md and in the
patch_format prompt asset; both describe this module bit-exactly.

All functions are pure; nothing here touches disk.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import List, NamedTuple, Tuple

from .errors import (
    EmptyPatch,
    FingerprintMismatch,
    MalformedPatch,
    OverlappingEdits,
    RangeOutOfBounds,
)

BLOCK_OPEN = "<<<EDIT"
BLOCK_CLOSE = "EDIT>>>"

_HEADER_RE = re.compile(r"^(REPLACE|DELETE|INSERT)\s+(\d+)(?:\s+(\d+))?\s*$")


class EditKind(Enum):
    INSERT = "insert"
    DELETE = "delete"
    REPLACE = "replace"


@dataclass(frozen=True)
class PatchEdit:
    """One line-level edit.

    For INSERT, new_lines are placed before start_line (end_line is unused
    and mirrors start_line). For DELETE/REPLACE the range start_line..end_line
    is inclusive.
    """
    kind: EditKind
    start_line: int
    end_line: int
    new_lines: Tuple[str, ...] = ()

    def span(self) -> Tuple[int, int]:
        """Half-open occupied interval; an insert occupies the zero-width
        boundary before start_line."""
        if self.kind is EditKind.INSERT:
            return (self.start_line, self.start_line)
        return (self.start_line, self.end_line + 1)


@dataclass(frozen=True)
class Patch:
    """An ordered, validated set of edits against one base source."""
    base_version_id: str
    base_fingerprint: str
    edits: Tuple[PatchEdit, ...] = field(default_factory=tuple)


class DiffStat(NamedTuple):
    inserted: int
    deleted: int
    replaced: int


def fingerprint(source: str) -> str:
    """Stable content hash of a source text (sha256, hex)."""
    return hashlib.sha256(source.encode("utf-8")).hexdigest()


def split_lines(source: str) -> Tuple[List[str], bool]:
    """Split into lines plus a had-trailing-newline flag, so the convention
    survives a round trip through join_lines."""
    if source == "":
        return [], False
    trailing = source.endswith("\n")
    lines = source.split("\n")
    if trailing:
        lines.pop()
    return lines, trailing


def join_lines(lines: List[str], trailing: bool) -> str:
    if not lines:
        return ""
    return "\n".join(lines) + ("\n" if trailing else "")


def parse_patch(text: str, *, base_version_id: str = "",
                base_fingerprint: str = "") -> Patch:
    """Parse edit blocks out of a model response body.

    Structural validation only (header shape, body presence, start<=end);
    bounds and overlap checks happen at apply time, against the real source.
    Raises MalformedPatch on any broken block and EmptyPatch when the text
    carries no block at all.
    """
    lines = text.split("\n")
    edits: List[PatchEdit] = []
    i = 0
    while i < len(lines):
        if lines[i].strip() != BLOCK_OPEN:
            i += 1
            continue
        header_idx = i + 1
        if header_idx >= len(lines):
            raise MalformedPatch("edit block truncated: missing header line")
        header = lines[header_idx].strip()
        m = _HEADER_RE.match(header)
        if not m:
            raise MalformedPatch(f"unrecognized edit header: {header!r}")
        op, start_s, end_s = m.groups()
        start = int(start_s)

        body: List[str] = []
        j = header_idx + 1
        while j < len(lines) and lines[j].strip() != BLOCK_CLOSE:
            body.append(lines[j])
            j += 1
        if j >= len(lines):
            raise MalformedPatch(f"edit block opened at line {i + 1} never closed "
                                 f"(missing {BLOCK_CLOSE})")

        if start < 1:
            raise MalformedPatch(f"{op}: line numbers are 1-based, got {start}")
        if op == "INSERT":
            if end_s is not None:
                raise MalformedPatch("INSERT takes a single line number")
            if not body:
                raise MalformedPatch("INSERT requires at least one body line")
            edits.append(PatchEdit(EditKind.INSERT, start, start, tuple(body)))
        else:
            if end_s is None:
                raise MalformedPatch(f"{op} requires start and end line numbers")
            end = int(end_s)
            if end < start:
                raise MalformedPatch(f"{op} {start} {end}: end before start")
            if op == "DELETE":
                if body:
                    raise MalformedPatch("DELETE takes no body lines")
                edits.append(PatchEdit(EditKind.DELETE, start, end))
            else:
                if not body:
                    raise MalformedPatch("REPLACE requires at least one body line")
                edits.append(PatchEdit(EditKind.REPLACE, start, end, tuple(body)))
        i = j + 1

    if not edits:
        raise EmptyPatch("response contained no edit blocks")

    # Inserts sort before same-line deletes/replaces so that reverse-order
    # application lands insert bodies ahead of the replaced range.
    edits.sort(key=lambda e: (e.start_line, 0 if e.kind is EditKind.INSERT else 1))
    return Patch(base_version_id=base_version_id,
                 base_fingerprint=base_fingerprint,
                 edits=tuple(edits))


def _check_bounds(edit: PatchEdit, line_count: int) -> None:
    if edit.kind is EditKind.INSERT:
        if not (1 <= edit.start_line <= line_count + 1):
            raise RangeOutOfBounds(
                f"insert at line {edit.start_line} outside 1..{line_count + 1}")
    else:
        if not (1 <= edit.start_line <= edit.end_line <= line_count):
            raise RangeOutOfBounds(
                f"{edit.kind.value} {edit.start_line}..{edit.end_line} outside "
                f"1..{line_count}")


def _check_overlaps(edits: Tuple[PatchEdit, ...]) -> None:
    for a, b in zip(edits, edits[1:]):
        a_lo, a_hi = a.span()
        b_lo, b_hi = b.span()
        if a_lo < b_hi and b_lo < a_hi:
            raise OverlappingEdits(
                f"{a.kind.value} {a.start_line}..{a.end_line} overlaps "
                f"{b.kind.value} {b.start_line}..{b.end_line}")


def apply_edit(lines: List[str], edit: PatchEdit) -> List[str]:
    """Splice a single edit into a line list (0-based internally)."""
    s = edit.start_line - 1
    if edit.kind is EditKind.INSERT:
        return lines[:s] + list(edit.new_lines) + lines[s:]
    e = edit.end_line  # exclusive in 0-based slicing
    if edit.kind is EditKind.DELETE:
        return lines[:s] + lines[e:]
    return lines[:s] + list(edit.new_lines) + lines[e:]


def apply_patch(source: str, patch: Patch) -> str:
    """Apply all edits to the source and return the new text.

    Validates fingerprint, bounds, and overlaps before touching anything,
    so a rejected patch leaves no partial result. Edits are spliced in
    descending start_line order so earlier indices stay valid.
    """
    if patch.base_fingerprint != fingerprint(source):
        raise FingerprintMismatch(
            f"patch targets {patch.base_fingerprint[:12]}..., source is "
            f"{fingerprint(source)[:12]}...")

    lines, trailing = split_lines(source)
    for edit in patch.edits:
        _check_bounds(edit, len(lines))
    _check_overlaps(patch.edits)

    for edit in reversed(patch.edits):
        lines = apply_edit(lines, edit)
    return join_lines(lines, trailing)


def diff_stat(patch: Patch) -> DiffStat:
    """Line counts per edit category; a replace counts max(old, new) lines."""
    inserted = deleted = replaced = 0
    for e in patch.edits:
        if e.kind is EditKind.INSERT:
            inserted += len(e.new_lines)
        elif e.kind is EditKind.DELETE:
            deleted += e.end_line - e.start_line + 1
        else:
            replaced += max(e.end_line - e.start_line + 1, len(e.new_lines))
    return DiffStat(inserted, deleted, replaced)
