"""Exception hierarchy shared by the library and the command line."""

from typing import Any, Dict, List, Optional


class PairedInvError(Exception):
    """Base class for all pairedinv failures."""


class ConfigError(PairedInvError, ValueError):
    """Invalid configuration, arguments or inputs (exit code 2)."""


class PairedInvRuntimeError(PairedInvError, RuntimeError):
    """Runtime or numeric failure (exit code 3)."""


class ContractError(PairedInvRuntimeError):
    """A shape or mode contract between callers was broken."""


class NumericError(PairedInvRuntimeError):
    """Non-finite values appeared where finite ones are required."""


class CFLViolation(PairedInvRuntimeError):
    """Time step too large for the fastest velocity on the grid."""

    def __init__(self, ratio: float, limit: float):
        self.ratio = ratio
        self.limit = limit
        super().__init__(
            f"CFL violation: c_max*dt/h = {ratio:.6g} exceeds {limit:.6g}"
        )


class BlowUpError(NumericError):
    """The wavefield became non-finite during time stepping."""

    def __init__(self, step: int, source: Optional[int] = None):
        self.step = step
        self.source = source
        where = f" (source {source})" if source is not None else ""
        super().__init__(f"Non-finite wavefield at time step {step}{where}")


class StorageError(PairedInvRuntimeError):
    """Adjoint wavefield storage would exceed the configured cap."""

    def __init__(self, required: int, limit: int):
        self.required = required
        self.limit = limit
        super().__init__(
            f"Wavefield storage needs {required / 2**20:.1f} MiB "
            f"({required} bytes), cap is {limit} bytes"
        )


class FormatError(PairedInvRuntimeError):
    """A container file is corrupt or truncated."""

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class TrainingDiverged(NumericError):
    """Training loss kept growing far above its initial value."""

    def __init__(self, message: str, log: List[Dict[str, Any]]):
        self.log = log
        super().__init__(message)
