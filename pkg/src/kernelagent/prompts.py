"""Deterministic prompt assembly for every stage of the refinement loop.

Four prompt kinds exist. Synthesis and optimization prompts ask for a whole
kernel in one fenced block; diagnosis asks for analysis only; repair asks
for line-level patch blocks against a numbered listing. The guideline
assets ship as plain text files and the load path verifies content hashes,
so a drive-by edit of the guidance cannot slip through silently.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from typing import Optional

from .errors import (
    AssetIntegrityError,
    MissingReferenceSource,
    TemplatePlaceholderMissing,
)
from .evaluation import EvalReport, EvalStatus
from .profiling import ProfileSummary, summarize_for_prompt
from .task import TaskSpec

KERNEL_PLACEHOLDER = "<NODE_PRV_SRC>"
PROFILING_HEADING = "PROFILING SUMMARY"
TRUNCATION_MARKER = "\n[... diagnosis truncated ...]"
DEFAULT_DIAGNOSIS_CHAR_BUDGET = 8000

# Pinned content hashes for assets whose wording must never drift.
# Regenerate a pin only when the asset change is deliberate:
#   python3 -c "import hashlib,sys;print(hashlib.sha256(open(sys.argv[1],'rb').read()).hexdigest())" <file>
ASSET_PINS = {
    "debug_guide.txt":
        "55428020542ed5e1ccec1c9ff41dac7359b281947dc394cad01c943f4072789b",
    "optimization_template.txt":
        "64a86e054b8d4d6986195a219e479b0665c3edaae4281f85aa9a84772c6e7e23",
    "cute_exemplar.txt":
        "2ba9e3a5f495ecb92b06ad4c4ae0e65210ffbb55d9504daf032e18f0e933b2da",
}

_REQUIRED_FRAGMENTS = {
    "debug_guide.txt": ["DO NOT change the intent of the code"],
    "optimization_template.txt": [
        "Implement ONLY ONE optimization attempt", "(A)", "(B)", "(C)"],
}


class PromptKind(Enum):
    INITIAL_SYNTHESIS = "initial_synthesis"
    DIAGNOSIS = "diagnosis"
    REPAIR = "repair"
    OPTIMIZATION = "optimization"


@dataclass(frozen=True)
class Prompt:
    kind: PromptKind
    text: str


@dataclass(frozen=True)
class GuidelineAssets:
    debug_guide: str
    optimization_template: str
    cute_exemplar: str
    initial_template: str
    patch_doc: str


def _read_asset(name: str) -> str:
    ref = resources.files("kernelagent.assets.prompts").joinpath(name)
    try:
        data = ref.read_bytes()
    except FileNotFoundError:
        raise AssetIntegrityError(f"prompt asset missing: {name}")
    pin = ASSET_PINS.get(name)
    if pin is not None:
        digest = hashlib.sha256(data).hexdigest()
        if digest != pin:
            raise AssetIntegrityError(
                f"{name}: content hash {digest[:12]}... does not match the "
                f"pinned {pin[:12]}...; refusing to build prompts from an "
                f"edited asset")
    text = data.decode("utf-8")
    for fragment in _REQUIRED_FRAGMENTS.get(name, []):
        if fragment not in text:
            raise AssetIntegrityError(f"{name}: required fragment missing: "
                                      f"{fragment!r}")
    return text


def load_assets() -> GuidelineAssets:
    return GuidelineAssets(
        debug_guide=_read_asset("debug_guide.txt"),
        optimization_template=_read_asset("optimization_template.txt"),
        cute_exemplar=_read_asset("cute_exemplar.txt"),
        initial_template=_read_asset("initial_synthesis.txt"),
        patch_doc=_read_asset("patch_format.txt"),
    )


def number_source(source: str) -> str:
    """Render source with 1-based line numbers, the coordinate system the
    patch format addresses."""
    lines = source.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return "\n".join(f"{i:4d} | {line}" for i, line in enumerate(lines, start=1))


def _render_input_spec(task: TaskSpec) -> str:
    rows = []
    for i, spec in enumerate(task.input_spec, start=1):
        shape = ", ".join(str(d) for d in spec.shape)
        rows.append(f"- tensor {i}: shape ({shape}), dtype {spec.dtype}, "
                    f"distribution {spec.distribution}")
    return "\n".join(rows)


def _substitute(template: str, mapping: dict, asset_name: str) -> str:
    out = template
    for placeholder, value in mapping.items():
        if placeholder not in out:
            raise TemplatePlaceholderMissing(
                f"{asset_name}: placeholder {placeholder} not found")
        out = out.replace(placeholder, value)
    return out


def build_initial(task: TaskSpec, assets: GuidelineAssets) -> Prompt:
    """First prompt of a session: task, reference, shapes, exemplar."""
    reference = task.reference_source()
    if not reference.strip():
        raise MissingReferenceSource(
            f"reference source is empty: {task.reference_source_path}")
    description = task.description or (
        f"Reimplement the reference module below as a custom GPU kernel "
        f"(task id: {task.task_id}).")
    text = _substitute(assets.initial_template, {
        "<TASK_DESCRIPTION>": description,
        "<REFERENCE_SOURCE>": reference.rstrip("\n"),
        "<INPUT_SPEC>": _render_input_spec(task),
        "<EXEMPLAR>": assets.cute_exemplar.rstrip("\n"),
    }, "initial_synthesis.txt")
    return Prompt(PromptKind.INITIAL_SYNTHESIS, text)


def _fmt_err(value: Optional[float]) -> str:
    return "unreported" if value is None else f"{value:g}"


def _evidence_section(report: EvalReport) -> str:
    if report.status is EvalStatus.COMPILE_ERROR:
        return ("The kernel failed to compile. COMPILER OUTPUT:\n\n"
                + (report.diagnostics or "(compiler produced no output)"))
    if report.status is EvalStatus.RUNTIME_ERROR:
        return ("The kernel compiled but crashed or hung. RUNTIME TRACE:\n\n"
                + (report.diagnostics or "(no trace captured)"))
    lines = [
        "The kernel ran but produced wrong values. MISMATCH STATISTICS:",
        "",
        f"max abs error {_fmt_err(report.max_abs_err)}",
        f"max rel error {_fmt_err(report.max_rel_err)}",
        f"failing input seed: "
        f"{report.failing_seed if report.failing_seed is not None else 'unreported'}",
    ]
    if report.diagnostics:
        lines += ["", report.diagnostics]
    return "\n".join(lines)


def build_diagnosis(kernel: str, report: EvalReport,
                    assets: GuidelineAssets) -> Prompt:
    """Stage one of debugging: explain the failure, produce no code."""
    if report.status is EvalStatus.CORRECT:
        raise ValueError("diagnosis requires a failing report")
    parts = [
        assets.debug_guide.rstrip("\n"),
        "",
        "## Current kernel (numbered)",
        number_source(kernel),
        "",
        "## Failure evidence",
        _evidence_section(report),
        "",
        "## Your task",
        "Analyze the failure and explain the most likely root causes and the",
        "lines involved. Respond with analysis only. DO NOT output any code",
        "or patch blocks yet.",
    ]
    return Prompt(PromptKind.DIAGNOSIS, "\n".join(parts))


def build_repair(kernel: str, diagnosis: str, assets: GuidelineAssets, *,
                 diagnosis_char_budget: int = DEFAULT_DIAGNOSIS_CHAR_BUDGET) -> Prompt:
    """Stage two of debugging: turn the diagnosis into patch blocks."""
    if not diagnosis.strip():
        raise ValueError("repair requires a non-empty diagnosis")
    if len(diagnosis) > diagnosis_char_budget:
        diagnosis = diagnosis[:diagnosis_char_budget] + TRUNCATION_MARKER
    parts = [
        "## Current kernel (numbered)",
        number_source(kernel),
        "",
        "## Diagnosis",
        diagnosis,
        "",
        "## " + assets.patch_doc.rstrip("\n"),
        "",
        "## Your task",
        "Fix the kernel per the diagnosis. Keep the change minimal and DO NOT",
        "change the intent of the code. Emit only edit blocks in the format",
        "above; any other text is ignored.",
    ]
    return Prompt(PromptKind.REPAIR, "\n".join(parts))


def build_optimization(kernel: str, assets: GuidelineAssets,
                       profile: Optional[ProfileSummary] = None) -> Prompt:
    """Optimization round: whole-kernel rewrite, one transformation."""
    if KERNEL_PLACEHOLDER not in assets.optimization_template:
        raise TemplatePlaceholderMissing(
            f"optimization_template.txt: placeholder {KERNEL_PLACEHOLDER} "
            f"not found")
    text = assets.optimization_template.replace(KERNEL_PLACEHOLDER, kernel)
    if profile is not None:
        text = (text.rstrip("\n")
                + f"\n\n==== {PROFILING_HEADING} ====\n"
                + summarize_for_prompt(profile)
                + "\n==== END OF SUMMARY ====\n"
                + "Use this measurement to pick the single most promising "
                  "optimization.\n")
    return Prompt(PromptKind.OPTIMIZATION, text)
