"""Latent nearest-neighbour index over all training images.

Prediction takes the label of the single nearest training embedding; the
"NN reconstruction" decodes that stored embedding instead of the query's own
code.  Search is an exact linear scan over squared L2 distance with ties
broken by ``(scene_id, variant_id)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .dataset import DatasetManifest, Label
from .model import images_to_batch, state_fingerprint

INDEX_FORMAT = "illumnorm-index/1"


class IndexMismatch(ValueError):
    pass


@dataclass(frozen=True)
class IndexEntry:
    embedding: np.ndarray
    scene_id: int
    variant_id: int
    label: Label
    distance: float = 0.0


class LatentIndex:
    def __init__(self, embeddings, scene_ids, variant_ids, labels, fingerprint: str = ""):
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2:
            raise ValueError("embeddings must be a 2-D array")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValueError("embeddings must be finite")
        self.scene_ids = np.asarray(scene_ids, dtype=np.int64)
        self.variant_ids = np.asarray(variant_ids, dtype=np.int64)
        self.labels = list(labels)
        if not len(self.scene_ids) == len(self.variant_ids) == len(self.labels) == len(self.embeddings):
            raise ValueError("index columns have differing lengths")
        self.fingerprint = fingerprint

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def entry(self, i: int, distance: float = 0.0) -> IndexEntry:
        return IndexEntry(self.embeddings[i], int(self.scene_ids[i]), int(self.variant_ids[i]), self.labels[i], distance)

    def check_model(self, model) -> None:
        fp = state_fingerprint(model)
        if self.fingerprint and fp != self.fingerprint:
            raise IndexMismatch("index was built with a different checkpoint")

    def save(self, path) -> None:
        """Tab-separated table: ``scene_id, variant_id, label, e_0 .. e_{d-1}``."""
        with open(path, "w") as fh:
            fh.write(f"# {INDEX_FORMAT}\tfingerprint={self.fingerprint}\td={self.dim}\n")
            fh.write("\t".join(["scene_id", "variant_id", "label"] + [f"e{i}" for i in range(self.dim)]) + "\n")
            for i in range(len(self)):
                vals = "\t".join(repr(float(v)) for v in self.embeddings[i])
                fh.write(f"{self.scene_ids[i]}\t{self.variant_ids[i]}\t{self.labels[i].key}\t{vals}\n")

    @classmethod
    def load(cls, path) -> "LatentIndex":
        lines = Path(path).read_text().splitlines()
        if not lines or not lines[0].startswith(f"# {INDEX_FORMAT}"):
            raise ValueError(f"{path} is not an index file")
        meta = dict(part.split("=", 1) for part in lines[0][2:].split("\t")[1:])
        d = int(meta["d"])
        sids, vids, labels, emb = [], [], [], []
        for line in lines[2:]:
            cols = line.split("\t")
            sids.append(int(cols[0]))
            vids.append(int(cols[1]))
            labels.append(Label.from_key(cols[2]))
            emb.append([float(v) for v in cols[3:]])
        return cls(np.array(emb).reshape(-1, d), sids, vids, labels, meta["fingerprint"])


@torch.no_grad()
def embed_images(model, images, batch_size: int = 256) -> np.ndarray:
    """Deterministic embeddings (``mu`` for the VAE) of ``(N, H, W, C)`` images."""
    images = np.asarray(images)
    out = []
    for start in range(0, len(images), batch_size):
        out.append(model.embed(images_to_batch(images[start : start + batch_size])).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, model.arch.latent_dim))


def build_index(model, manifest: DatasetManifest) -> LatentIndex:
    """One entry per variant of every scene."""
    h, w, c = model.arch.input_shape
    if tuple(manifest.image_shape) != (h, w, c):
        raise ValueError(f"manifest images {manifest.image_shape} do not match model input {(h, w, c)}")
    embs, sids, vids, labels = [], [], [], []
    for s in manifest.scenes:
        embs.append(embed_images(model, s.images()))
        sids += [s.scene_id] * s.n
        vids += list(range(s.n))
        labels += [s.label] * s.n
    return LatentIndex(np.concatenate(embs), sids, vids, labels, state_fingerprint(model))


def _ranked(index: LatentIndex, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.dim:
        raise ValueError(f"query has length {q.shape[0]}, index dimension is {index.dim}")
    d2 = np.sum((index.embeddings - q) ** 2, axis=1)
    order = np.lexsort((index.variant_ids, index.scene_ids, d2))
    return order, d2


def knn(index: LatentIndex, query, k: int = 1) -> list[IndexEntry]:
    """The ``k`` nearest entries by squared Euclidean distance, ascending."""
    if not 1 <= k <= len(index):
        raise ValueError(f"k must be in [1, {len(index)}], got {k}")
    order, d2 = _ranked(index, query)
    return [index.entry(i, float(d2[i])) for i in order[:k]]


def nearest_indices(index: LatentIndex, queries: np.ndarray) -> np.ndarray:
    """Row index of the 1-NN for each query (same tie rule as ``knn``)."""
    if len(index) == 0:
        raise ValueError("empty index")
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    out = np.empty(len(queries), dtype=np.int64)
    # (scene_id, variant_id) ascending = position in a stable presorted order
    pre = np.lexsort((index.variant_ids, index.scene_ids))
    emb = index.embeddings[pre]
    for i, q in enumerate(queries):
        d2 = np.sum((emb - q) ** 2, axis=1)
        out[i] = pre[int(np.argmin(d2))]
    return out


def predict_label(index: LatentIndex, model, x: np.ndarray) -> Label:
    """Label of the nearest training embedding to ``encode(x)`` for one ``(H, W, C)`` image."""
    return predict_labels(index, model, np.asarray(x)[None])[0]


def predict_labels(index: LatentIndex, model, images: np.ndarray) -> list[Label]:
    if len(index) == 0:
        raise ValueError("empty index")
    nn = nearest_indices(index, embed_images(model, images))
    return [index.labels[i] for i in nn]


@torch.no_grad()
def nn_reconstruct(index: LatentIndex, model, x: np.ndarray) -> np.ndarray:
    """Decode the stored embedding of the query's nearest neighbour; returns ``(H, W, C)``."""
    return nn_reconstruct_batch(index, model, np.asarray(x)[None])[0]


@torch.no_grad()
def nn_reconstruct_batch(index: LatentIndex, model, images: np.ndarray) -> np.ndarray:
    if len(index) == 0:
        raise ValueError("empty index")
    nn = nearest_indices(index, embed_images(model, images))
    z = torch.as_tensor(index.embeddings[nn], dtype=torch.float32)
    return model.decode(z).numpy().transpose(0, 2, 3, 1)


@torch.no_grad()
def reconstruct(model, images: np.ndarray) -> np.ndarray:
    """Direct ``decode(embed(x))`` for ``(N, H, W, C)`` images."""
    return model.reconstruct(images_to_batch(images)).numpy().transpose(0, 2, 3, 1)
