"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: anything that is the user's fault
(bad arguments, malformed files, invalid prune configs) exits 2, while
an optimizer blow-up exits 3.
"""


class LdrfError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgumentError(LdrfError, ValueError):
    """An operation was called with inconsistent or out-of-range inputs."""


class FormatError(LdrfError, ValueError):
    """A model or dataset file is malformed.

    ``offset`` is the byte position at which the problem was detected,
    when that is meaningful.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DegenerateLayerError(LdrfError, ValueError):
    """A layer's weights carry no signal (e.g. all-zero singular values)."""


class UnsupportedStructureError(LdrfError, ValueError):
    """The network wiring does not match what an operation requires."""


class DivergenceError(LdrfError, RuntimeError):
    """Layer optimization diverged; carries the layer name and any
    partial per-layer report collected before the abort."""

    def __init__(self, layer, message=None, partial_report=None):
        super().__init__(message or f"optimization diverged in layer {layer!r}")
        self.layer = layer
        self.partial_report = partial_report or []
