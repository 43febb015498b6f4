"""Exception types shared across the package."""


class DCFormerError(Exception):
    pass


class DimensionError(DCFormerError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(DCFormerError, ValueError):
    """A precondition of an operation was violated."""


class NumericError(DCFormerError, FloatingPointError):
    """A NaN or infinity appeared where finite values are required."""


class BatchTooSmallError(ContractError):
    pass


class SamplerContractError(ContractError):
    """Batch or dataset does not satisfy the P x K identity structure."""


class ConfigError(DCFormerError, ValueError):
    pass


class ManifestError(DCFormerError, ValueError):
    """Checkpoint or dump manifest does not match what the caller expects."""


class DegenerateProjectionError(DCFormerError, ValueError):
    pass
