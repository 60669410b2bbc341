class DiffcoreError(Exception):
    pass


class ShapeError(DiffcoreError, ValueError):
    """Inconsistent shapes at a named node."""

    def __init__(self, node: str, message: str):
        self.node = node
        super().__init__(f"{node}: {message}")


class NumericError(DiffcoreError, ArithmeticError):
    def __init__(self, node: str, message: str):
        self.node = node
        super().__init__(f"{node}: {message}")


class StateError(DiffcoreError, RuntimeError):
    pass


class OracleError(DiffcoreError):
    """The finite-difference oracle could not be trusted (non-deterministic loss)."""


class StepAbortedError(DiffcoreError, ArithmeticError):
    def __init__(self, pid: str):
        self.pid = pid
        super().__init__(f"non-finite gradient in parameter {pid!r}; step aborted")


class CheckpointFormatError(DiffcoreError, ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte {offset})")
