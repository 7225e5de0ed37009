"""Two-stage unsupervised low-light image enhancement.

Stage I predicts a Retinex illumination map adversarially from unpaired
images; Stage II removes the amplified noise with a denoiser trained on
pseudo triples.
"""
from .errors import ConfigError, DataError, NumericAbort
from .imaging import DomainError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "DomainError", "NumericAbort", "__version__"]
