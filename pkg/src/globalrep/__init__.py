"""Few-shot learning with jointly trained global class representations."""
from .errors import ConfigError, ContractError, GlobalRepError, IngestionError, IntegrityError, NumericalAbort

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractError", "GlobalRepError", "IngestionError", "IntegrityError",
           "NumericalAbort", "__version__"]
