"""The refinement state machine.

One kernel evolves through synthesize, test, diagnose, repair, and optimize
phases. Depth counts completed optimization iterations: it increments only
when a modified kernel re-validates as Correct, so depth 0 spans all of
initial synthesis and its debugging. Transitions are pure; the session
runner owns side effects and feeds events in.

The full phase/event matrix is documented in docs/state-machine.md; the
table there is generated from this module's logic by the tests, so the two
cannot drift apart.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

from .errors import IllegalTransition
from .profiling import ProfilingSchedule, WorkloadClass, profiling_enabled

DEFAULT_REGRESSION_FACTOR = 0.5


class Phase(Enum):
    SYNTHESIZE = "synthesize"
    TEST = "test"
    DIAGNOSE = "diagnose"
    REPAIR = "repair"
    OPTIMIZE = "optimize"
    PROFILE_REFINE = "profile_refine"
    DONE = "done"
    FAILED = "failed"


TERMINAL_PHASES = (Phase.DONE, Phase.FAILED)
OPTIMIZATION_PHASES = (Phase.OPTIMIZE, Phase.PROFILE_REFINE)


class Event(Enum):
    CODE_PRODUCED = "code_produced"
    EVAL_CORRECT = "eval_correct"
    EVAL_COMPILE_ERROR = "eval_compile_error"
    EVAL_RUNTIME_ERROR = "eval_runtime_error"
    EVAL_MISMATCH = "eval_mismatch"
    DIAGNOSIS_PRODUCED = "diagnosis_produced"
    PATCH_APPLIED = "patch_applied"
    PATCH_REJECTED = "patch_rejected"
    BUDGET_HIT = "budget_hit"


FAILURE_EVENTS = (Event.EVAL_COMPILE_ERROR, Event.EVAL_RUNTIME_ERROR,
                  Event.EVAL_MISMATCH)


class Continuation(Enum):
    CONTINUE_FROM_CURRENT = "continue_from_current"
    REVERT_TO_BEST = "revert_to_best"


@dataclass(frozen=True)
class Budget:
    max_depth: int = 12
    max_debug_attempts_per_cycle: int = 8
    max_total_model_calls: int = 400
    per_eval_timeout: float = 300.0

    def __post_init__(self) -> None:
        # max_depth 0 is the degenerate "stop at first correct" budget
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.max_debug_attempts_per_cycle < 1:
            raise ValueError("max_debug_attempts_per_cycle must be >= 1")
        if self.max_total_model_calls < 1:
            raise ValueError("max_total_model_calls must be >= 1")
        if self.per_eval_timeout <= 0:
            raise ValueError("per_eval_timeout must be positive")


@dataclass(frozen=True)
class RefinementState:
    phase: Phase = Phase.SYNTHESIZE
    depth: int = 0
    debug_attempts_in_cycle: int = 0
    total_model_calls: int = 0
    current_version_id: str = ""
    best_version_id: Optional[str] = None
    # true once the kernel under test came from an optimization rewrite;
    # decides whether EvalCorrect advances depth and how debug exhaustion
    # resolves (fail vs revert)
    optimizing: bool = False


@dataclass(frozen=True)
class TrajectoryPoint:
    depth: int
    correct: bool
    version_id: str
    profiling_enabled: bool
    wall_time: float
    speedup: Optional[float] = None

    def __post_init__(self) -> None:
        if self.correct:
            if self.speedup is None or self.speedup <= 0:
                raise ValueError("correct point needs a positive speedup")
        elif self.speedup is not None:
            raise ValueError("speedup is recorded only for correct points")


def select_continuation(latest_speedup: float, best_speedup: float,
                        regression_factor: float = DEFAULT_REGRESSION_FACTOR
                        ) -> Continuation:
    """Keep exploring from the latest Correct kernel unless it regressed
    below regression_factor of the best; equality continues."""
    if latest_speedup < regression_factor * best_speedup:
        return Continuation.REVERT_TO_BEST
    return Continuation.CONTINUE_FROM_CURRENT


class WorkflowEngine:
    """Pure transition logic parameterized by budget and profiling schedule."""

    def __init__(self, budget: Budget, schedule: ProfilingSchedule,
                 workload_class: WorkloadClass):
        self.budget = budget
        self.schedule = schedule
        self.workload_class = workload_class

    # -- helpers ------------------------------------------------------------

    def profiling_at(self, target_depth: int) -> bool:
        return profiling_enabled(self.workload_class, target_depth,
                                 self.schedule)

    def optimization_phase_for(self, target_depth: int) -> Phase:
        return (Phase.PROFILE_REFINE if self.profiling_at(target_depth)
                else Phase.OPTIMIZE)

    def model_calls_exhausted(self, state: RefinementState) -> bool:
        return state.total_model_calls >= self.budget.max_total_model_calls

    def register_model_call(self, state: RefinementState) -> RefinementState:
        return replace(state, total_model_calls=state.total_model_calls + 1)

    def _finish(self, state: RefinementState) -> RefinementState:
        terminal = Phase.DONE if state.best_version_id else Phase.FAILED
        return replace(state, phase=terminal)

    def _after_correct(self, state: RefinementState) -> RefinementState:
        """Shared tail of both EvalCorrect rows: stop at max_depth or open
        the next optimization cycle."""
        if state.depth >= self.budget.max_depth:
            return replace(state, phase=Phase.DONE,
                           debug_attempts_in_cycle=0, optimizing=False)
        return replace(state,
                       phase=self.optimization_phase_for(state.depth + 1),
                       debug_attempts_in_cycle=0, optimizing=True)

    def _on_debug_failure(self, state: RefinementState) -> RefinementState:
        exhausted = (state.debug_attempts_in_cycle
                     >= self.budget.max_debug_attempts_per_cycle)
        if not exhausted:
            return replace(state, phase=Phase.DIAGNOSE,
                           debug_attempts_in_cycle=state.debug_attempts_in_cycle + 1)
        if not state.optimizing or state.best_version_id is None:
            # pre-correctness: nothing to fall back to
            return replace(state, phase=Phase.FAILED)
        # mid-optimization: drop the broken attempt, revert, try a fresh
        # optimization at the same target depth (depth did not advance)
        return replace(state,
                       phase=self.optimization_phase_for(state.depth + 1),
                       debug_attempts_in_cycle=0,
                       current_version_id=state.best_version_id)

    # -- the transition function ---------------------------------------------

    def advance(self, state: RefinementState, event: Event) -> RefinementState:
        phase = state.phase
        if phase in TERMINAL_PHASES:
            raise IllegalTransition(f"session already terminal in {phase.value}")
        if event is Event.BUDGET_HIT:
            return self._finish(state)

        if phase is Phase.SYNTHESIZE:
            if event is Event.CODE_PRODUCED:
                return replace(state, phase=Phase.TEST)

        elif phase is Phase.TEST:
            if event is Event.EVAL_CORRECT:
                if state.optimizing:
                    state = replace(state, depth=state.depth + 1)
                return self._after_correct(state)
            if event in FAILURE_EVENTS:
                return self._on_debug_failure(state)

        elif phase is Phase.DIAGNOSE:
            if event is Event.DIAGNOSIS_PRODUCED:
                return replace(state, phase=Phase.REPAIR)

        elif phase is Phase.REPAIR:
            if event is Event.PATCH_APPLIED:
                return replace(state, phase=Phase.TEST)
            if event is Event.PATCH_REJECTED:
                return self._on_debug_failure(state)

        elif phase in OPTIMIZATION_PHASES:
            if event is Event.CODE_PRODUCED:
                return replace(state, phase=Phase.TEST)

        raise IllegalTransition(
            f"event {event.value} not legal in phase {phase.value}")
