class StructuralError(ValueError):
    """Malformed batch layout, target matrix, or mismatched shapes."""


class ConfigError(ValueError):
    """Invalid configuration value."""


class DegenerateBatchError(ValueError):
    """No anchor in the batch has a positive."""


class ZeroNormError(ValueError):
    def __init__(self, row: int):
        super().__init__(f"embedding row {row} has zero norm")
        self.row = row


class NonFiniteError(FloatingPointError):
    """Non-finite values surfaced during a forward or backward pass."""
