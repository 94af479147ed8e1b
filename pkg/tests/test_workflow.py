"""State machine tests: the pinned transition rows double as the generator
for the matrix in docs/state-machine.md, so doc and code stay in lockstep."""
from __future__ import annotations

import random
from dataclasses import replace
from pathlib import Path

import pytest

from kernelagent.errors import IllegalTransition
from kernelagent.profiling import ProfilingSchedule, WorkloadClass
from kernelagent.workflow import (
    Budget,
    Continuation,
    Event,
    Phase,
    RefinementState,
    TrajectoryPoint,
    WorkflowEngine,
    select_continuation,
)

DOCS_MATRIX = Path(__file__).parent.parent / "docs" / "state-machine.md"


def engine(max_depth=12, attempts=8, calls=400,
           workload=WorkloadClass.MATMUL_LIKE) -> WorkflowEngine:
    return WorkflowEngine(
        Budget(max_depth=max_depth, max_debug_attempts_per_cycle=attempts,
               max_total_model_calls=calls),
        ProfilingSchedule.default(), workload)


def st(phase=Phase.SYNTHESIZE, depth=0, attempts=0, calls=0, current="",
       best=None, optimizing=False) -> RefinementState:
    return RefinementState(phase=phase, depth=depth,
                           debug_attempts_in_cycle=attempts,
                           total_model_calls=calls,
                           current_version_id=current,
                           best_version_id=best, optimizing=optimizing)


# ---------------------------------------------------------------------------
# pinned transition rows (also render docs/state-machine.md's matrix)
# ---------------------------------------------------------------------------

# (label, engine, state, event, expected phase, extra-check)
ROWS = [
    ("synthesize, model returned code",
     engine(), st(), Event.CODE_PRODUCED, Phase.TEST, {}),
    ("synthesize, budget hit, nothing correct yet",
     engine(), st(), Event.BUDGET_HIT, Phase.FAILED, {}),
    ("first test failed, attempts below cap",
     engine(), st(phase=Phase.TEST), Event.EVAL_MISMATCH, Phase.DIAGNOSE,
     {"debug_attempts_in_cycle": 1}),
    ("first correctness, depth budget open (matmul)",
     engine(), st(phase=Phase.TEST, best="v001"), Event.EVAL_CORRECT,
     Phase.OPTIMIZE, {"depth": 0, "optimizing": True}),
    ("first correctness, depth budget zero",
     engine(max_depth=0), st(phase=Phase.TEST), Event.EVAL_CORRECT,
     Phase.DONE, {"depth": 0}),
    ("pre-correctness debug attempts exhausted",
     engine(attempts=8), st(phase=Phase.TEST, attempts=8),
     Event.EVAL_COMPILE_ERROR, Phase.FAILED, {}),
    ("optimized kernel re-validated, budget open (matmul, depth 3)",
     engine(), st(phase=Phase.TEST, depth=3, best="v005", optimizing=True),
     Event.EVAL_CORRECT, Phase.OPTIMIZE,
     {"depth": 4, "debug_attempts_in_cycle": 0}),
    ("optimized kernel re-validated into profiled region (matmul, depth 10)",
     engine(max_depth=15),
     st(phase=Phase.TEST, depth=10, best="v009", optimizing=True),
     Event.EVAL_CORRECT, Phase.PROFILE_REFINE, {"depth": 11}),
    ("optimized kernel re-validated at final depth",
     engine(max_depth=12),
     st(phase=Phase.TEST, depth=11, best="v010", optimizing=True),
     Event.EVAL_CORRECT, Phase.DONE, {"depth": 12}),
    ("optimization attempt unrepairable, revert to best",
     engine(attempts=8),
     st(phase=Phase.TEST, depth=5, attempts=8, current="v014", best="v009",
        optimizing=True),
     Event.EVAL_RUNTIME_ERROR, Phase.OPTIMIZE,
     {"depth": 5, "debug_attempts_in_cycle": 0, "current_version_id": "v009"}),
    ("diagnosis produced",
     engine(), st(phase=Phase.DIAGNOSE, attempts=1), Event.DIAGNOSIS_PRODUCED,
     Phase.REPAIR, {}),
    ("patch applied cleanly",
     engine(), st(phase=Phase.REPAIR, attempts=1), Event.PATCH_APPLIED,
     Phase.TEST, {"depth": 0}),
    ("patch rejected, attempts below cap",
     engine(), st(phase=Phase.REPAIR, attempts=2), Event.PATCH_REJECTED,
     Phase.DIAGNOSE, {"debug_attempts_in_cycle": 3}),
    ("patch rejected at cap mid-optimization, revert to best",
     engine(attempts=4),
     st(phase=Phase.REPAIR, depth=2, attempts=4, current="v008", best="v006",
        optimizing=True),
     Event.PATCH_REJECTED, Phase.OPTIMIZE, {"current_version_id": "v006"}),
    ("optimization rewrite produced",
     engine(), st(phase=Phase.OPTIMIZE, depth=1, optimizing=True),
     Event.CODE_PRODUCED, Phase.TEST, {}),
    ("profiled optimization rewrite produced",
     engine(), st(phase=Phase.PROFILE_REFINE, depth=11, optimizing=True),
     Event.CODE_PRODUCED, Phase.TEST, {}),
    ("budget hit with a correct version banked",
     engine(), st(phase=Phase.OPTIMIZE, depth=4, best="v007"),
     Event.BUDGET_HIT, Phase.DONE, {}),
]


@pytest.mark.parametrize("label,eng,state,event,want_phase,extra",
                         ROWS, ids=[r[0] for r in ROWS])
def test_transition_rows(label, eng, state, event, want_phase, extra):
    out = eng.advance(state, event)
    assert out.phase is want_phase
    for attr, expected in extra.items():
        assert getattr(out, attr) == expected, f"{label}: {attr}"


def render_matrix() -> str:
    lines = [
        "| scenario | phase | event | next phase | state change |",
        "|---|---|---|---|---|",
    ]
    for label, eng, state, event, _, _ in ROWS:
        out = eng.advance(state, event)
        deltas = []
        for attr in ("depth", "debug_attempts_in_cycle", "current_version_id",
                     "optimizing"):
            before, after = getattr(state, attr), getattr(out, attr)
            if before != after:
                deltas.append(f"{attr}: {before!r} -> {after!r}")
        lines.append(
            f"| {label} | {state.phase.value} | {event.value} "
            f"| {out.phase.value} | {'; '.join(deltas) or 'none'} |")
    return "\n".join(lines)


def test_docs_matrix_matches_engine():
    text = DOCS_MATRIX.read_text()
    begin = text.index("<!-- matrix:begin -->")
    end = text.index("<!-- matrix:end -->")
    documented = text[begin + len("<!-- matrix:begin -->"):end].strip()
    assert documented == render_matrix(), (
        "docs/state-machine.md is stale; regenerate the matrix block from "
        "tests/test_workflow.py::render_matrix")


# ---------------------------------------------------------------------------
# illegal transitions
# ---------------------------------------------------------------------------

def test_terminal_phases_accept_nothing():
    for phase in (Phase.DONE, Phase.FAILED):
        for event in Event:
            with pytest.raises(IllegalTransition):
                engine().advance(st(phase=phase), event)


def test_out_of_phase_events_are_rejected():
    bad = [
        (Phase.SYNTHESIZE, Event.EVAL_CORRECT),
        (Phase.SYNTHESIZE, Event.PATCH_APPLIED),
        (Phase.TEST, Event.CODE_PRODUCED),
        (Phase.TEST, Event.DIAGNOSIS_PRODUCED),
        (Phase.DIAGNOSE, Event.EVAL_CORRECT),
        (Phase.DIAGNOSE, Event.PATCH_APPLIED),
        (Phase.REPAIR, Event.CODE_PRODUCED),
        (Phase.OPTIMIZE, Event.EVAL_CORRECT),
        (Phase.OPTIMIZE, Event.PATCH_APPLIED),
        (Phase.PROFILE_REFINE, Event.DIAGNOSIS_PRODUCED),
    ]
    for phase, event in bad:
        with pytest.raises(IllegalTransition):
            engine().advance(st(phase=phase, best="v001"), event)


# ---------------------------------------------------------------------------
# budgets, counters, continuation policy
# ---------------------------------------------------------------------------

def test_budget_validation():
    assert Budget(max_depth=0).max_depth == 0
    with pytest.raises(ValueError):
        Budget(max_depth=-1)
    with pytest.raises(ValueError):
        Budget(max_debug_attempts_per_cycle=0)
    with pytest.raises(ValueError):
        Budget(max_total_model_calls=0)
    with pytest.raises(ValueError):
        Budget(per_eval_timeout=0.0)


def test_model_call_accounting():
    eng = engine(calls=2)
    s = st()
    assert not eng.model_calls_exhausted(s)
    s = eng.register_model_call(s)
    s = eng.register_model_call(s)
    assert s.total_model_calls == 2
    assert eng.model_calls_exhausted(s)


def test_select_continuation_policy():
    keep = Continuation.CONTINUE_FROM_CURRENT
    revert = Continuation.REVERT_TO_BEST
    assert select_continuation(1.8, 2.0) is keep
    assert select_continuation(0.9, 2.0) is revert
    assert select_continuation(1.0, 1.0) is keep
    assert select_continuation(1.0, 2.0) is keep      # exactly at the factor
    assert select_continuation(0.2, 1.0, regression_factor=0.1) is keep


def test_trajectory_point_invariants():
    TrajectoryPoint(depth=1, correct=True, version_id="v1",
                    profiling_enabled=False, wall_time=0.0, speedup=1.2)
    with pytest.raises(ValueError):
        TrajectoryPoint(depth=1, correct=True, version_id="v1",
                        profiling_enabled=False, wall_time=0.0)
    with pytest.raises(ValueError):
        TrajectoryPoint(depth=1, correct=False, version_id="v1",
                        profiling_enabled=False, wall_time=0.0, speedup=1.2)


def test_profiling_phase_selection_by_depth():
    matmul = engine(max_depth=20)
    for target in range(1, 11):
        assert matmul.optimization_phase_for(target) is Phase.OPTIMIZE
    for target in range(11, 21):
        assert matmul.optimization_phase_for(target) is Phase.PROFILE_REFINE
    act = engine(workload=WorkloadClass.ACTIVATION_ELEMENTWISE)
    assert act.optimization_phase_for(1) is Phase.PROFILE_REFINE


# ---------------------------------------------------------------------------
# random legal walks: depth monotonicity and termination
# ---------------------------------------------------------------------------

LEGAL = {
    Phase.SYNTHESIZE: [Event.CODE_PRODUCED],
    Phase.TEST: [Event.EVAL_CORRECT, Event.EVAL_COMPILE_ERROR,
                 Event.EVAL_RUNTIME_ERROR, Event.EVAL_MISMATCH],
    Phase.DIAGNOSE: [Event.DIAGNOSIS_PRODUCED],
    Phase.REPAIR: [Event.PATCH_APPLIED, Event.PATCH_REJECTED],
    Phase.OPTIMIZE: [Event.CODE_PRODUCED],
    Phase.PROFILE_REFINE: [Event.CODE_PRODUCED],
}


def walk(seed: int, eng: WorkflowEngine) -> list:
    """Drive random legal events as a session would, tracking depth."""
    rng = random.Random(seed)
    s = st()
    depths = [s.depth]
    versions = 0
    while s.phase not in (Phase.DONE, Phase.FAILED):
        if eng.model_calls_exhausted(s):
            s = eng.advance(s, Event.BUDGET_HIT)
            depths.append(s.depth)
            break
        event = rng.choice(LEGAL[s.phase])
        if event in (Event.CODE_PRODUCED, Event.DIAGNOSIS_PRODUCED,
                     Event.PATCH_APPLIED, Event.PATCH_REJECTED):
            s = eng.register_model_call(s)
        prev = s
        s = eng.advance(s, event)
        # session-level bookkeeping the engine leaves to its caller
        if event is Event.EVAL_CORRECT:
            versions += 1
            vid = f"v{versions:03d}"
            s = replace(s, best_version_id=s.best_version_id or vid,
                        current_version_id=vid)
        assert s.depth >= prev.depth
        assert s.depth - prev.depth <= 1
        if s.depth > prev.depth:
            assert event is Event.EVAL_CORRECT and prev.optimizing
        depths.append(s.depth)
    assert s.phase in (Phase.DONE, Phase.FAILED)
    return depths


def test_random_walks_terminate_with_monotone_depth():
    for seed in range(60):
        eng = engine(max_depth=5, attempts=3, calls=120)
        depths = walk(seed, eng)
        assert depths == sorted(depths)
        assert depths[-1] <= 5


def test_depth_zero_covers_all_presynthesis_debugging():
    eng = engine(attempts=8)
    s = st(phase=Phase.TEST)
    for _ in range(5):  # five failed repair cycles, all at depth 0
        s = eng.advance(s, Event.EVAL_MISMATCH)
        assert s.depth == 0
        s = eng.advance(s, Event.DIAGNOSIS_PRODUCED)
        s = eng.advance(s, Event.PATCH_APPLIED)
    assert s.phase is Phase.TEST
    assert s.debug_attempts_in_cycle == 5
