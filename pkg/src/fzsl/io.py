"""Data directory layout shared by the command-line tools."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import Dataset, load_dataset, save_dataset, write_features
from .semantics import EmbeddingTable, load_embedding_table, write_embedding_table

TRAIN_FEATURES = "features.train.txt"
TEST_FEATURES = "features.test.txt"
ATTRIBUTES = "attrs.txt"
SPLIT = "split.txt"
EMBEDDINGS = "embed.txt"


def write_data_dir(out_dir, dataset: Dataset, embeddings: EmbeddingTable | None = None, digest=None):
    """Seen rows go to the train file, unseen rows to the test file."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, test = dataset.subset("train"), dataset.subset("test")
    save_dataset(train, out_dir / TRAIN_FEATURES, out_dir / ATTRIBUTES, out_dir / SPLIT, digest)
    write_features(out_dir / TEST_FEATURES, test.features, test.labels, digest)
    if embeddings is not None:
        write_embedding_table(out_dir / EMBEDDINGS, embeddings, digest)
    return out_dir


def load_data_dir(data_dir) -> tuple[Dataset, EmbeddingTable | None]:
    """Both views merged into one dataset, plus the embedding table if present."""
    data_dir = Path(data_dir)
    attrs, split = data_dir / ATTRIBUTES, data_dir / SPLIT
    train = load_dataset(data_dir / TRAIN_FEATURES, attrs, split, view="train")
    parts = [train]
    if (data_dir / TEST_FEATURES).exists():
        parts.append(load_dataset(data_dir / TEST_FEATURES, attrs, split, view="test"))
    merged = Dataset(
        np.concatenate([p.features for p in parts]),
        np.concatenate([p.labels for p in parts]),
        train.class_names,
        train.attributes,
        train.seen_classes,
        train.unseen_classes,
    )
    embed_path = data_dir / EMBEDDINGS
    return merged, (load_embedding_table(embed_path) if embed_path.exists() else None)
