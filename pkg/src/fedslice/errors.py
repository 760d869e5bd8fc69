"""Error types shared across the simulator."""


class DimensionError(ValueError):
    """Shapes of the operands do not satisfy the operation's contract."""


class ContractError(ValueError):
    """A precondition on values or state was violated."""


class MaskReuse(RuntimeError):
    """A one-time pad was presented for masking a second time."""


class SecurityBreach(RuntimeError):
    """A plaintext tensor was about to be exposed to the untrusted domain.

    Raised by the secure executor as a test surface; secure runs never
    recover from it.
    """


class ProtocolError(RuntimeError):
    """A federation message violated the round protocol."""
