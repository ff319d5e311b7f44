"""Exception hierarchy shared by every atnl module."""


class AtnlError(Exception):
    """Base class for all library errors."""


class DimensionError(AtnlError, ValueError):
    pass


class DegenerateRowError(AtnlError, ValueError):
    """A softmax row has no finite entry (every key masked out)."""


class ConfigError(AtnlError, ValueError):
    pass


class ContractError(AtnlError, ValueError):
    """A documented precondition of a call was violated."""


class VocabularyError(AtnlError, KeyError):
    pass


class LengthError(AtnlError, ValueError):
    pass


class NonFiniteError(AtnlError, FloatingPointError):
    pass


class DegenerateBatchError(AtnlError, ValueError):
    pass


class OversizePairError(AtnlError, ValueError):
    pass


class IncompatibleCheckpointError(AtnlError, ValueError):
    pass


class CheckpointFormatError(AtnlError, ValueError):
    pass
