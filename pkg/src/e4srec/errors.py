class E4SRecError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(E4SRecError, ValueError):
    pass


class NumericError(E4SRecError, FloatingPointError):
    pass


class ContractError(E4SRecError, ValueError):
    pass


class EmptyDatasetError(E4SRecError, ValueError):
    pass


class OutOfRangeError(E4SRecError, IndexError):
    pass


class StageOrderError(E4SRecError, RuntimeError):
    """A pipeline stage was requested before the stage it depends on."""

    def __init__(self, stage: str, missing: str, detail: str = ""):
        self.stage = stage
        self.missing = missing
        msg = f"stage '{stage}' requires stage '{missing}' to run first"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DivergenceError(E4SRecError, RuntimeError):
    pass


class BundleCorruptError(E4SRecError, ValueError):
    pass


class IncompatibleBundleError(E4SRecError, ValueError):
    pass
