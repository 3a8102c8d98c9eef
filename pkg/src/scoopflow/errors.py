"""Exception types shared across the package."""


class ScoopError(Exception):
    """Base class for all scoopflow errors."""


class InvalidInput(ScoopError):
    """An argument violates a documented precondition."""


class ShapeMismatch(ScoopError):
    """Array lengths or dimensions do not line up."""


class ParseError(ScoopError):
    """A cloud or feature file is malformed.

    Carries the byte offset at which parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class DegenerateFeature(ScoopError):
    """A feature row has zero norm, so cosine similarity is undefined."""


class DegenerateTransport(ScoopError):
    """A scaling iteration hit a zero row or column of the kernel.

    ``axis`` is "row" or "column"; ``index`` refers to the original
    cost-matrix indexing.
    """

    def __init__(self, axis: str, index: int):
        super().__init__(f"zero {axis} {index} in transport kernel")
        self.axis = axis
        self.index = index


class NumericalDivergence(ScoopError):
    """The refinement optimizer produced a non-finite value."""

    def __init__(self, step: int, what: str = "objective"):
        super().__init__(f"non-finite {what} at refinement step {step}")
        self.step = step
