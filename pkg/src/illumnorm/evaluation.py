"""Evaluation protocol: NN accuracy over seeds, invariance scores, diagnostics.

Accuracy is per test image (every illumination variant counts) with a
per-scene majority vote reported alongside.  Table variance is the population
variance of the per-seed accuracies, in percentage points squared.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import statistics
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .dataset import DatasetManifest, Label, SceneRecord, TripletSampler, get_policy, seat_label_index
from .latent_index import LatentIndex, build_index, embed_images, nearest_indices, reconstruct
from .model import ArchConfig, images_to_batch, load_checkpoint, save_checkpoint
from .ssim import DEFAULT_SSIM, SsimConfig, ssim_per_image
from .training import TrainConfig, TrainingDiverged, train

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (0, 1, 2, 3, 4)
ENCODER_SETUPS = ("ae", "vae", "tae", "ae-v", "vae-v", "tae-v")
CLASSIFIER_SETUPS = ("cnn-ns", "cnn-es")
ALL_SETUPS = ENCODER_SETUPS + CLASSIFIER_SETUPS


# -- accuracy --------------------------------------------------------------


@dataclass
class AccuracyResult:
    accuracy: float
    per_scene_accuracy: float
    confusion: np.ndarray  # rows: true label, cols: predicted label
    labels: list[Label]
    n_images: int


def _confusion(true: list[Label], pred: list[Label]):
    labels = sorted(set(true) | set(pred))
    pos = {lb: i for i, lb in enumerate(labels)}
    conf = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for t, p in zip(true, pred):
        conf[pos[t], pos[p]] += 1
    return conf, labels


def accuracy_from_predictions(true: list[Label], pred: list[Label], scene_of: list[int]) -> AccuracyResult:
    if not true:
        raise ValueError("empty test set")
    correct = [t == p for t, p in zip(true, pred)]
    by_scene: dict[int, list] = {}
    for sid, t, p in zip(scene_of, true, pred):
        by_scene.setdefault(sid, [t, Counter()])[1][p] += 1
    scene_hits = []
    for t, votes in by_scene.values():
        top = max(votes.values())
        winner = min(lb for lb, c in votes.items() if c == top)
        scene_hits.append(winner == t)
    conf, labels = _confusion(true, pred)
    return AccuracyResult(float(np.mean(correct)), float(np.mean(scene_hits)), conf, labels, len(true))


def classification_accuracy(index: LatentIndex, model, test_manifest: DatasetManifest) -> AccuracyResult:
    """Fraction of test images whose 1-NN training label equals the full ground-truth label."""
    if len(test_manifest) == 0:
        raise ValueError("empty test set")
    true, pred, scene_of = [], [], []
    for s in test_manifest.scenes:
        nn_ = nearest_indices(index, embed_images(model, s.images()))
        pred += [index.labels[i] for i in nn_]
        true += [s.label] * s.n
        scene_of += [s.scene_id] * s.n
    return accuracy_from_predictions(true, pred, scene_of)


# -- invariance and reconstruction diagnostics -----------------------------


def _mean_pairwise_ssim(batch: torch.Tensor, cfg: SsimConfig) -> float:
    pairs = list(itertools.combinations(range(batch.shape[0]), 2))
    i, j = (list(t) for t in zip(*pairs))
    return float(ssim_per_image(batch[i].double(), batch[j].double(), cfg).mean())


@torch.no_grad()
def invariance_score(model, manifest: DatasetManifest, ssim_cfg: SsimConfig = DEFAULT_SSIM) -> tuple[float, float]:
    """``(recon_score, input_score)``: mean pairwise SSIM within scenes, of reconstructions and of raw inputs."""
    recon_scores, input_scores = [], []
    for s in manifest.scenes:
        if s.n < 2:
            raise ValueError(f"scene {s.scene_id} has fewer than 2 variants")
        x = images_to_batch(s.images())
        recon_scores.append(_mean_pairwise_ssim(model.reconstruct(x), ssim_cfg))
        input_scores.append(_mean_pairwise_ssim(x, ssim_cfg))
    return float(np.mean(recon_scores)), float(np.mean(input_scores))


@torch.no_grad()
def recon_extremes(model, scene: SceneRecord, ssim_cfg: SsimConfig = DEFAULT_SSIM) -> dict:
    """Compare the first variant's reconstruction against the other reconstructions and inputs."""
    if scene.n < 2:
        raise ValueError(f"scene {scene.scene_id} has fewer than 2 variants")
    x = images_to_batch(scene.images()).double()
    recon = model.reconstruct(x.float()).double()
    first = recon[:1].expand_as(recon)
    recon_sim = ssim_per_image(first, recon, ssim_cfg).numpy()
    input_sim = ssim_per_image(first, x, ssim_cfg).numpy()
    others = np.arange(1, scene.n)
    max_div = int(others[np.argmin(recon_sim[1:])])
    closest, furthest = int(np.argmax(input_sim)), int(np.argmin(input_sim))

    def img(t):
        return t.numpy().transpose(1, 2, 0)

    return {
        "first_recon": img(recon[0]),
        "max_divergent_recon": img(recon[max_div]),
        "max_divergent_variant": max_div,
        "max_divergent_ssim": float(recon_sim[max_div]),
        "closest_input": img(x[closest]),
        "closest_variant": closest,
        "closest_ssim": float(input_sim[closest]),
        "furthest_input": img(x[furthest]),
        "furthest_variant": furthest,
        "furthest_ssim": float(input_sim[furthest]),
    }


# -- triplet margin diagnostics ----------------------------------------------


def triplet_violation_rate(model, manifest: DatasetManifest, margin: float, policy: str = "seat", n_triplets: int = 1000, seed: int = 0) -> float:
    """Fraction of sampled triplets with ``|a-p|^2 - |a-n|^2 + margin > 0`` on deterministic embeddings."""
    sampler = TripletSampler(manifest, get_policy(policy))
    anchors = sampler.anchors
    if not anchors:
        raise ValueError("no scene can serve as an anchor")
    emb = {s.scene_id: embed_images(model, s.images()) for s in manifest.scenes}
    rng = np.random.default_rng([seed, 3])
    violations = 0
    for _ in range(n_triplets):
        t = sampler.sample(anchors[int(rng.integers(len(anchors)))], rng)
        a, p, n = (emb[m.scene_id][m.a] for m in t.members)
        if np.sum((a - p) ** 2) - np.sum((a - n) ** 2) + margin > 0:
            violations += 1
    return violations / n_triplets


# -- latent export -----------------------------------------------------------


def pca2(x: np.ndarray) -> np.ndarray:
    """Project rows onto the top-2 principal components of the centered set."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 2:
        raise ValueError("pca2 needs embeddings with at least 2 dimensions")
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return centered @ vt[:2].T


@dataclass
class LatentExport:
    scene_ids: list[int]
    variant_ids: list[int]
    labels: list[Label]
    coords: np.ndarray

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scene_id", "variant_id", "label"] + [f"x{i}" for i in range(self.coords.shape[1])])
            for row in zip(self.scene_ids, self.variant_ids, self.labels, self.coords):
                w.writerow([row[0], row[1], row[2].key] + [repr(float(v)) for v in row[3]])


def export_latents(model, manifest: DatasetManifest, projection: str = "none") -> LatentExport:
    index = build_index(model, manifest)
    emb = index.embeddings
    if projection == "none":
        coords = emb.copy()
    elif projection == "pca2":
        if emb.shape[1] < 2:
            raise ValueError("pca2 requires latent_dim >= 2")
        coords = pca2(emb)
    else:
        raise ValueError(f"unknown projection {projection!r}")
    return LatentExport(index.scene_ids.tolist(), index.variant_ids.tolist(), index.labels, coords)


# -- from-scratch classifier baseline ---------------------------------------


@dataclass(frozen=True)
class ClassifierConfig:
    widths: tuple[int, ...] = (16, 32, 64, 128)
    epochs: int = 60
    batch_size: int = 16
    lr: float = 1e-4
    val_fraction: float = 0.2
    patience: int = 10


class ConvClassifier(nn.Module):
    def __init__(self, input_shape, widths, n_classes: int):
        super().__init__()
        h, w, c = input_shape
        layers = []
        for width in widths:
            layers += [nn.Conv2d(c, width, 3, padding=1), nn.ReLU(inplace=True), nn.MaxPool2d(2)]
            c = width
        self.features = nn.Sequential(*layers)
        f = 2 ** len(widths)
        self.head = nn.Linear(c * (h // f) * (w // f), n_classes)

    def forward(self, x):
        return self.head(self.features(x).flatten(1))


def _class_space(labels: list[Label]):
    if all(lb.seats is not None for lb in labels):
        n_seats = len(labels[0].seats)
        return (lambda lb: seat_label_index(lb)), 4**n_seats
    cats = sorted({lb.category for lb in labels})
    pos = {c: i for i, c in enumerate(cats)}
    return (lambda lb: pos.get(lb.category, -1)), len(cats)


def scene_split(scene_ids, val_fraction: float, rng: np.random.Generator):
    """Split scene ids (not images) into train/validation parts."""
    ids = np.asarray(scene_ids)
    perm = ids[rng.permutation(len(ids))]
    n_val = int(round(len(ids) * val_fraction))
    return sorted(perm[n_val:].tolist()), sorted(perm[:n_val].tolist())


def train_classifier(manifest: DatasetManifest, config: ClassifierConfig, seed: int, early_stopping: bool):
    """Train on one randomly chosen variant per scene per epoch; returns ``(model, label_fn, info)``."""
    torch.manual_seed(seed)
    rng = np.random.default_rng([seed, 2])
    label_fn, n_classes = _class_space(manifest.labels())
    model = ConvClassifier(manifest.image_shape, config.widths, n_classes)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    ids = [s.scene_id for s in manifest.scenes]
    val_ids: list[int] = []
    if early_stopping:
        ids, val_ids = scene_split(ids, config.val_fraction, rng)
    images = {s.scene_id: s.images() for s in manifest.scenes}
    targets = {s.scene_id: label_fn(s.label) for s in manifest.scenes}
    best = (-1.0, None, 0)
    stale = 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = np.asarray(ids)[rng.permutation(len(ids))]
        for start in range(0, len(order), config.batch_size):
            chunk = order[start : start + config.batch_size]
            x = images_to_batch(np.stack([images[k][rng.integers(len(images[k]))] for k in chunk]))
            y = torch.tensor([targets[k] for k in chunk])
            loss = nn.functional.cross_entropy(model(x), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
        if early_stopping and val_ids:
            acc = _classifier_accuracy(model, [manifest.scene(k) for k in val_ids], label_fn)
            if acc > best[0]:
                best = (acc, {k: v.clone() for k, v in model.state_dict().items()}, epoch)
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    if early_stopping and best[1] is not None:
        model.load_state_dict(best[1])
    model.eval()
    info = {"train_scenes": ids, "val_scenes": val_ids, "best_epoch": best[2], "best_val_accuracy": best[0]}
    return model, label_fn, info


@torch.no_grad()
def _classifier_accuracy(model, scenes, label_fn) -> float:
    model.eval()
    hits = total = 0
    for s in scenes:
        pred = model(images_to_batch(s.images())).argmax(1).numpy()
        hits += int(np.sum(pred == label_fn(s.label)))
        total += s.n
    model.train()
    return hits / total


def baseline_classifier(train_manifest: DatasetManifest, test_manifest: DatasetManifest, config: ClassifierConfig, seeds=DEFAULT_SEEDS) -> dict:
    """Per-seed test accuracy of the from-scratch CNN, without (``cnn-ns``) and with (``cnn-es``) early stopping."""
    out = {"cnn-ns": [], "cnn-es": []}
    for name, es in (("cnn-ns", False), ("cnn-es", True)):
        for seed in seeds:
            model, label_fn, _ = train_classifier(train_manifest, config, seed, es)
            out[name].append(_classifier_accuracy(model, test_manifest.scenes, label_fn))
    return out


# -- multi-seed report -------------------------------------------------------


def setup_configs(setup: str, arch: ArchConfig, config: TrainConfig) -> tuple[ArchConfig, TrainConfig]:
    variant, _, suffix = setup.partition("-")
    if setup not in ENCODER_SETUPS:
        raise ValueError(f"unknown encoder-decoder setup {setup!r}")
    mode = "vanilla" if suffix == "v" else "impossible"
    return replace(arch, variant=variant), replace(config, loss_mode=mode)


def data_fingerprint(manifest: DatasetManifest) -> str:
    h = hashlib.sha256()
    for s in manifest.scenes:
        h.update(f"{s.scene_id}:{s.label.key}".encode())
        h.update(np.ascontiguousarray(s.images()).tobytes())
    return h.hexdigest()[:16]


def run_key(arch: ArchConfig, config: TrainConfig, data_fp: str) -> str:
    blob = json.dumps({"arch": asdict(arch), "train": asdict(config), "data": data_fp}, sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def train_or_load(manifest: DatasetManifest, arch: ArchConfig, config: TrainConfig, cache_dir=None, data_fp: str | None = None):
    """Train, or reuse a checkpoint cached under ``cache_dir`` for the identical run."""
    if cache_dir is None:
        model, hist = train(manifest, arch, config)
        return model, hist.epochs()
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    key = run_key(arch, config, data_fp or data_fingerprint(manifest))
    path = cache_dir / f"{arch.variant}-{config.loss_mode}-s{config.seed}-{key}.pt"
    if path.exists():
        ck = load_checkpoint(path)
        return ck.model, ck.history
    model, hist = train(manifest, arch, config)
    save_checkpoint(path, model, asdict(config), config.seed, hist.epochs())
    return model, hist.epochs()


@dataclass
class SetupResult:
    setup: str
    seeds: list[int]
    accuracy: list  # per seed; None where the run failed
    per_scene_accuracy: list = field(default_factory=list)
    recon_score: list = field(default_factory=list)
    input_score: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    run_keys: list = field(default_factory=list)
    confusion: dict = field(default_factory=dict)  # {"labels": [...], "matrix": [[...]]}, summed over seeds

    def add_confusion(self, labels: list[Label], matrix: np.ndarray) -> None:
        counts: dict[tuple[str, str], int] = {}
        old = self.confusion.get("labels", [])
        for i, row in enumerate(self.confusion.get("matrix", [])):
            for j, v in enumerate(row):
                counts[(old[i], old[j])] = v
        keys = [lb.key for lb in labels]
        for i, row in enumerate(matrix):
            for j, v in enumerate(row):
                counts[(keys[i], keys[j])] = counts.get((keys[i], keys[j]), 0) + int(v)
        merged = sorted(set(old) | set(keys), key=lambda k: Label.from_key(k))
        self.confusion = {"labels": merged, "matrix": [[counts.get((a, b), 0) for b in merged] for a in merged]}

    @property
    def ok(self) -> list[float]:
        return [a for a in self.accuracy if a is not None]

    @property
    def mean(self) -> float | None:
        return float(statistics.mean(self.ok)) if self.ok else None

    @property
    def variance(self) -> float | None:
        # exact rational arithmetic: identical accuracies give exactly 0
        return float(statistics.pvariance(self.ok)) if self.ok else None

    @property
    def std(self) -> float | None:
        return float(statistics.pstdev(self.ok)) if self.ok else None

    def to_json(self) -> dict:
        d = asdict(self)
        d.update(mean=self.mean, variance=self.variance, std=self.std, failed=len(self.accuracy) - len(self.ok))
        return d


@dataclass
class EvalReport:
    rows: list[SetupResult]
    config: dict = field(default_factory=dict)

    def row(self, setup: str) -> SetupResult:
        return next(r for r in self.rows if r.setup == setup)

    def to_json(self) -> dict:
        return {"format": "illumnorm-report/1", "config": self.config, "rows": [r.to_json() for r in self.rows]}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    def table(self) -> str:
        """Aligned text table: accuracy mean ± variance (percent, percent squared), std, per-scene mean."""
        lines = [f"{'Model':<10} {'Accuracy (%)':>16} {'std':>6} {'per-scene':>10} {'failed':>7}"]
        for r in self.rows:
            if r.mean is None:
                lines.append(f"{r.setup.upper():<10} {'failed':>16}")
                continue
            acc = f"{100 * r.mean:.1f} ± {1e4 * r.variance:.2g}"
            ps = [a for a in r.per_scene_accuracy if a is not None]
            per_scene = f"{100 * np.mean(ps):.1f}" if ps else "-"
            lines.append(
                f"{r.setup.upper():<10} {acc:>16} {100 * r.std:>6.2f} {per_scene:>10} {len(r.accuracy) - len(r.ok):>7}"
            )
        return "\n".join(lines)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["format", "config", "rows"],
    "properties": {
        "format": {"const": "illumnorm-report/1"},
        "config": {"type": "object"},
        "rows": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["setup", "seeds", "accuracy", "mean", "variance", "std", "failed"],
                "properties": {
                    "setup": {"enum": list(ALL_SETUPS)},
                    "seeds": {"type": "array", "items": {"type": "integer"}},
                    "accuracy": {"type": "array", "items": {"type": ["number", "null"], "minimum": 0, "maximum": 1}},
                    "per_scene_accuracy": {"type": "array", "items": {"type": ["number", "null"]}},
                    "recon_score": {"type": "array", "items": {"type": ["number", "null"]}},
                    "input_score": {"type": "array", "items": {"type": ["number", "null"]}},
                    "errors": {"type": "array", "items": {"type": "string"}},
                    "run_keys": {"type": "array", "items": {"type": ["string", "null"]}},
                    "confusion": {
                        "type": "object",
                        "properties": {
                            "labels": {"type": "array", "items": {"type": "string"}},
                            "matrix": {"type": "array", "items": {"type": "array", "items": {"type": "integer", "minimum": 0}}},
                        },
                    },
                    "mean": {"type": ["number", "null"]},
                    "variance": {"type": ["number", "null"], "minimum": 0},
                    "std": {"type": ["number", "null"], "minimum": 0},
                    "failed": {"type": "integer", "minimum": 0},
                },
            },
        },
    },
}


def _run_encoder_seed(setup, arch, config, seed, train_manifest, test_manifest, cache_dir, data_fp):
    a, c = setup_configs(setup, arch, config)
    c = replace(c, seed=seed)
    key = run_key(a, c, data_fp)
    try:
        model, _ = train_or_load(train_manifest, a, c, cache_dir, data_fp)
    except TrainingDiverged as e:
        return dict(key=key, error=f"seed {seed}: {e}")
    index = build_index(model, train_manifest)
    acc = classification_accuracy(index, model, test_manifest)
    rs, ins = invariance_score(model, train_manifest)
    return dict(key=key, acc=acc, recon=rs, input=ins, error=None)


def multi_seed_report(
    arch: ArchConfig,
    config: TrainConfig,
    train_manifest: DatasetManifest,
    test_manifest: DatasetManifest,
    seeds=DEFAULT_SEEDS,
    setups=ALL_SETUPS,
    classifier: ClassifierConfig | None = None,
    cache_dir=None,
    jobs: int = 1,
) -> EvalReport:
    """Train every setup with the same seeds and collect NN accuracy per seed."""
    seeds = list(seeds)
    data_fp = data_fingerprint(train_manifest)
    classifier = classifier or ClassifierConfig(epochs=config.epochs, batch_size=config.batch_size, lr=config.lr)
    rows = []
    for setup in setups:
        row = SetupResult(setup, seeds, [])
        if setup in CLASSIFIER_SETUPS:
            for seed in seeds:
                model, label_fn, _ = train_classifier(train_manifest, classifier, seed, setup == "cnn-es")
                row.accuracy.append(_classifier_accuracy(model, test_manifest.scenes, label_fn))
            rows.append(row)
            continue
        args = [(setup, arch, config, s, train_manifest, test_manifest, cache_dir, data_fp) for s in seeds]
        if jobs > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(jobs) as ex:
                results = list(ex.map(_run_encoder_seed, *zip(*args)))
        else:
            results = [_run_encoder_seed(*a) for a in args]
        for res in results:
            acc = res.get("acc")
            row.accuracy.append(acc.accuracy if acc else None)
            row.per_scene_accuracy.append(acc.per_scene_accuracy if acc else None)
            row.recon_score.append(res.get("recon"))
            row.input_score.append(res.get("input"))
            row.run_keys.append(res["key"])
            if acc:
                row.add_confusion(acc.labels, acc.confusion)
            if res["error"]:
                row.errors.append(res["error"])
        log.info("%s: %s", setup, row.accuracy)
        rows.append(row)
    cfg = {
        "arch": asdict(arch),
        "train": asdict(config),
        "classifier": asdict(classifier),
        "seeds": seeds,
        "data": data_fp,
    }
    return EvalReport(rows, json.loads(json.dumps(cfg, default=list)))


# -- image grids -------------------------------------------------------------


def image_grid(rows, pad: int = 2) -> np.ndarray:
    """Tile a list of rows of ``(H, W, C)`` images into one image with white separators."""
    h, w, c = np.asarray(rows[0][0]).shape
    ncols = max(len(r) for r in rows)
    grid = np.ones((len(rows) * (h + pad) - pad, ncols * (w + pad) - pad, c), dtype=np.float32)
    for i, r in enumerate(rows):
        for j, im in enumerate(r):
            grid[i * (h + pad) : i * (h + pad) + h, j * (w + pad) : j * (w + pad) + w] = im
    return grid


def save_grid(rows, path) -> None:
    from .dataset import write_image

    write_image(path, image_grid(rows))


def scene_cleaning_grid(model, scene: SceneRecord):
    """Inputs of one scene above their reconstructions."""
    x = scene.images()
    return [list(x), list(reconstruct(model, x))]


def nn_comparison_grid(model, index: LatentIndex, images: np.ndarray):
    """Input, direct reconstruction and NN reconstruction rows."""
    from .latent_index import nn_reconstruct_batch

    return [list(images), list(reconstruct(model, images)), list(nn_reconstruct_batch(index, model, images))]


def extremes_grid(extremes: dict):
    keys = ("first_recon", "max_divergent_recon", "closest_input", "furthest_input")
    return [[extremes[k].astype(np.float32) for k in keys]]
