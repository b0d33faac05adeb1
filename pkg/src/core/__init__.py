"""Core functionality for seasonal contrastive pre-training."""

from .catalog import CatalogError, LocalDirectoryCatalog, SyntheticCatalog, TileCatalog
from .config import ConfigError, RunConfig, load_config
from .geosampler import SeasonalStackDataset, build_dataset, load_cities
from .learner import SecoState, info_nce, load_encoder, pretrain, seco_loss
from .models import ChangePair, MaskMetrics, SeasonalStack, ViewSet

__all__ = [
    "CatalogError",
    "ChangePair",
    "ConfigError",
    "LocalDirectoryCatalog",
    "MaskMetrics",
    "RunConfig",
    "SeasonalStack",
    "SeasonalStackDataset",
    "SecoState",
    "SyntheticCatalog",
    "TileCatalog",
    "ViewSet",
    "build_dataset",
    "info_nce",
    "load_cities",
    "load_config",
    "load_encoder",
    "pretrain",
    "seco_loss",
]
