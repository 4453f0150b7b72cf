"""Two-stage hybrid generator: a discrete-token autoregressive prior conditioning
a masked continuous-token generator with a per-token diffusion head, trained
and evaluated on a synthetic world with known statistics."""

from .errors import ConfigError, ContractError, D2CError, DimensionError, FormatError, InputError, NumericError

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "D2CError", "DimensionError", "FormatError", "InputError", "NumericError",
    "__version__",
]
