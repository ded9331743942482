"""DPA prospecting at desk scale: factorization event predictor, conversion and
trending prospecting models, a multi-stage serving pipeline, and evaluation tools."""

from .catalog import Catalog, CatalogEntry, ProductKey, ProductStats
from .offset import Event, FeatureSchema, ModelState, derive_dims, predict, train_batch

__all__ = ["Catalog", "CatalogEntry", "Event", "FeatureSchema", "ModelState", "ProductKey",
           "ProductStats", "derive_dims", "predict", "train_batch"]
