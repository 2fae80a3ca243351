"""Hierarchical motion video autoencoder with a flow-matching decoder."""

__version__ = "0.1.0"

from .config import RunConfig, preset_config  # noqa: F401
from .pipeline import HiVaeModel, load_model, save_model  # noqa: F401
