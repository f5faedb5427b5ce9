class ConfigError(ValueError):
    """Invalid run configuration or operation argument."""


class PartitionError(ValueError):
    """Requested device partition cannot be realized from the dataset."""


class NumericError(ArithmeticError):
    """Non-finite values reached a model evaluation."""
