"""Catalogs, scene records, embeddings and the synthetic scene generator."""
from .catalog import CATEGORIES, CatalogError, PredicateCatalog, load_catalog, save_catalog
from .embeddings import EmbeddingProvider, embed_label
from .geometry import BoxPair, box_geometry, iou, normalized_pos
from .scenes import (
    ObjectInstance,
    SceneDataset,
    SceneRecord,
    SceneSchemaError,
    catalog_with_counts,
    load_scenes_json,
    save_scenes_json,
)
from .synthetic import SyntheticConfig, generate_synthetic

__all__ = [
    "CATEGORIES",
    "CatalogError",
    "PredicateCatalog",
    "load_catalog",
    "save_catalog",
    "EmbeddingProvider",
    "embed_label",
    "BoxPair",
    "box_geometry",
    "iou",
    "normalized_pos",
    "ObjectInstance",
    "SceneDataset",
    "SceneRecord",
    "SceneSchemaError",
    "catalog_with_counts",
    "load_scenes_json",
    "save_scenes_json",
    "SyntheticConfig",
    "generate_synthetic",
]
