"""Exception hierarchy shared across the package.

Every error the engine can surface to an operator derives from
KernelAgentError; programming errors (illegal state transitions) derive
from it too but are never caught internally.
"""


class KernelAgentError(Exception):
    """Base class for all errors raised by this package."""


class ManifestError(KernelAgentError):
    """Task manifest missing, unparseable, or failing validation."""


# --- patch engine ---------------------------------------------------------

class PatchError(KernelAgentError):
    pass


class MalformedPatch(PatchError):
    """An edit block could not be parsed; message carries the parse error."""


class EmptyPatch(PatchError):
    """Response contained zero edit blocks (treated as a model refusal)."""


class FingerprintMismatch(PatchError):
    """Patch base fingerprint does not match the source being patched."""


class RangeOutOfBounds(PatchError):
    """An edit addresses lines outside the source."""


class OverlappingEdits(PatchError):
    """Two edits address intersecting line ranges."""


# --- prompt builder -------------------------------------------------------

class PromptError(KernelAgentError):
    pass


class MissingReferenceSource(PromptError):
    pass


class TemplatePlaceholderMissing(PromptError):
    """A prompt asset lost its substitution placeholder (asset corrupted)."""


class AssetIntegrityError(PromptError):
    """A prompt asset no longer matches its pinned content hash."""


# --- model client ---------------------------------------------------------

class ModelError(KernelAgentError):
    pass


class ModelUnavailable(ModelError):
    """Remote endpoint unreachable after retries."""


class ScriptExhausted(ModelError):
    """Scripted backend has no response for the requested (kind, occurrence)."""


class ResponseTooLarge(ModelError):
    pass


class NoCodeBlock(ModelError):
    """Response carried no fenced code block."""


# --- evaluator / executor -------------------------------------------------

class EvaluationError(KernelAgentError):
    pass


class ExecutorUnavailable(EvaluationError):
    pass


class ExecutorTimeout(EvaluationError):
    """Job exceeded its wall-clock deadline (mapped to a runtime_error report)."""


class ProtocolViolation(EvaluationError):
    """Executor reply was not a well-formed protocol document."""


class NonPositiveTime(EvaluationError):
    pass


class EmptySamples(EvaluationError):
    pass


# --- profiler -------------------------------------------------------------

class ProfileParseError(KernelAgentError):
    pass


class MissingColumn(ProfileParseError):
    pass


class UnparseableValue(ProfileParseError):
    pass


# --- session store --------------------------------------------------------

class StoreError(KernelAgentError):
    pass


class UnknownVersionId(StoreError):
    pass


class DuplicateId(StoreError):
    pass


class NoCorrectVersion(StoreError):
    pass


class JournalIncomplete(StoreError):
    """Journal is missing a response (or meta) for a recorded request."""


class Divergence(StoreError):
    """Replay produced a record that differs from the stored one."""


# --- workflow engine ------------------------------------------------------

class IllegalTransition(KernelAgentError):
    """Event not legal for the current phase. Always a programming error."""
