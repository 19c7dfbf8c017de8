"""Four-modality embedding alignment with Gramian volume contrastive training."""

__version__ = "0.1.0"

from .modality import MODALITY_ORDER, Modality

__all__ = ["Modality", "MODALITY_ORDER", "__version__"]
