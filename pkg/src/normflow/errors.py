"""Exception types shared across the package.

The split mirrors the CLI exit codes: malformed input documents (exit 2),
violated mathematical preconditions (exit 3), and broken internal
invariants that indicate a bug or a genuinely failed certificate (exit 4).
"""


class InputError(ValueError):
    """An input document or argument failed validation."""


class PreconditionError(ValueError):
    """A documented mathematical precondition does not hold for this input."""


class NearResonanceError(PreconditionError):
    """A small divisor is nonzero but below the resonance tolerance.

    In this regime the resonant/nonresonant classification is not
    trustworthy and every downstream quantity built on it would be noise,
    so the computation refuses to proceed.
    """


class InternalCheckError(RuntimeError):
    """An internal invariant that should hold by construction failed."""
