"""Scene manifests, the random (input, target) pair sampler and triplet policies.

On-disk layout::

    <root>/meta.json
    <root>/<split>/scene_<k>/label.json
    <root>/<split>/scene_<k>/variant_<j>.png

``label.json`` holds ``{"seats": [s0, s1, s2]}`` or ``{"category": id}``.
"""

from __future__ import annotations

import json
import re
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

SEAT_CLASSES = ("empty", "infant_seat", "child_seat", "adult")
SPLITS = ("train", "test")

_SCENE_RE = re.compile(r"^scene_(\d+)$")
_VARIANT_RE = re.compile(r"^variant_(\d+)\.png$")


class ManifestError(Exception):
    """Raised when a dataset directory does not satisfy the layout contract."""


class SamplingError(Exception):
    pass


class AugmentConfigError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Label:
    seats: tuple[int, ...] | None = None
    category: int | None = None

    def __post_init__(self):
        if (self.seats is None) == (self.category is None):
            raise ValueError("a label has either seats or a category, not both")
        if self.seats is not None:
            object.__setattr__(self, "seats", tuple(int(s) for s in self.seats))
            if any(s not in range(len(SEAT_CLASSES)) for s in self.seats):
                raise ValueError(f"seat classes must be in 0..3, got {self.seats}")

    @classmethod
    def from_json(cls, obj: dict) -> "Label":
        if "seats" in obj:
            return cls(seats=tuple(obj["seats"]))
        if "category" in obj:
            return cls(category=int(obj["category"]))
        raise ValueError(f"label needs 'seats' or 'category': {obj}")

    def to_json(self) -> dict:
        if self.seats is not None:
            return {"seats": list(self.seats)}
        return {"category": self.category}

    @property
    def key(self) -> str:
        """Compact text form: ``3-0-3`` for seats, ``c7`` for categories."""
        if self.seats is not None:
            return "-".join(str(s) for s in self.seats)
        return f"c{self.category}"

    @classmethod
    def from_key(cls, key: str) -> "Label":
        if key.startswith("c"):
            return cls(category=int(key[1:]))
        return cls(seats=tuple(int(s) for s in key.split("-")))

    @property
    def is_all_empty(self) -> bool:
        return self.seats is not None and all(s == 0 for s in self.seats)


def seat_label_index(label: Label) -> int:
    """Base-4 class index of a seat label (0..63 for three seats)."""
    idx = 0
    for s in label.seats:
        idx = idx * len(SEAT_CLASSES) + s
    return idx


def hamming(a: Label, b: Label) -> int:
    return sum(x != y for x, y in zip(a.seats, b.seats))


def read_image(path) -> np.ndarray:
    """Decode an 8-bit PNG to a float32 ``(H, W, C)`` array in [0, 1]."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr


def write_image(path, image: np.ndarray) -> None:
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)).save(path)


@dataclass(eq=False)
class SceneRecord:
    scene_id: int
    label: Label
    variants: list = field(default_factory=list)  # paths or in-memory (H, W, C) arrays
    _cache: list | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return len(self.variants)

    def image(self, j: int) -> np.ndarray:
        return self.images()[j]

    def images(self) -> np.ndarray:
        """All variants stacked as ``(n, H, W, C)`` float32."""
        if self._cache is None:
            decoded = [
                read_image(v) if isinstance(v, (str, Path)) else np.asarray(v, dtype=np.float32)
                for v in self.variants
            ]
            shapes = {d.shape for d in decoded}
            if len(shapes) > 1:
                raise ManifestError(f"scene {self.scene_id}: variants have differing shapes {shapes}")
            self._cache = np.stack(decoded) if decoded else np.zeros((0, 0, 0, 0), np.float32)
        return self._cache


@dataclass(eq=False)
class DatasetManifest:
    root: Path | None
    split: str
    scenes: list[SceneRecord]
    seat_count: int = 3
    class_names: list[str] = field(default_factory=lambda: list(SEAT_CLASSES))
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [s.scene_id for s in self.scenes]
        if len(set(ids)) != len(ids):
            raise ManifestError("scene ids are not unique")
        self._by_id = {s.scene_id: s for s in self.scenes}

    def __len__(self) -> int:
        return len(self.scenes)

    def scene(self, scene_id: int) -> SceneRecord:
        return self._by_id[scene_id]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.scenes[0].images().shape[1:])

    def labels(self) -> list[Label]:
        return [s.label for s in self.scenes]


def _scene_dirs(split_dir: Path) -> list[tuple[int, Path]]:
    out = []
    for p in split_dir.iterdir():
        m = _SCENE_RE.match(p.name)
        if m and p.is_dir():
            out.append((int(m.group(1)), p))
    return sorted(out)


def load_manifest(root, split: str = "train", min_variants: int = 2) -> DatasetManifest:
    """Read and validate ``<root>/<split>``; images are decoded eagerly."""
    root = Path(root)
    if split not in SPLITS:
        raise ManifestError(f"unknown split {split!r}")
    split_dir = root / split
    if not split_dir.is_dir():
        raise ManifestError(f"missing split directory {split_dir}")
    meta = {}
    if (root / "meta.json").exists():
        meta = json.loads((root / "meta.json").read_text())
    scenes = []
    for k, d in _scene_dirs(split_dir):
        label_path = d / "label.json"
        if not label_path.exists():
            raise ManifestError(f"scene {k}: missing label.json")
        try:
            label = Label.from_json(json.loads(label_path.read_text()))
        except (ValueError, json.JSONDecodeError) as e:
            raise ManifestError(f"scene {k}: bad label.json ({e})") from e
        variants = sorted(
            (int(m.group(1)), p) for p in d.iterdir() if (m := _VARIANT_RE.match(p.name))
        )
        if [j for j, _ in variants] != list(range(len(variants))):
            raise ManifestError(f"scene {k}: variant indices are not contiguous from 0")
        if len(variants) < min_variants:
            raise ManifestError(f"scene {k}: has {len(variants)} variant(s), need at least {min_variants}")
        rec = SceneRecord(k, label, [p for _, p in variants])
        try:
            rec.images()
        except OSError as e:
            raise ManifestError(f"scene {k}: unreadable image ({e})") from e
        scenes.append(rec)
    if not scenes:
        raise ManifestError(f"no scenes found in {split_dir}")
    shapes = {s.images().shape[1:] for s in scenes}
    if len(shapes) > 1:
        raise ManifestError(f"scenes have differing image shapes: {shapes}")
    seat_count = meta.get("seat_count", len(scenes[0].label.seats or ()))
    for s in scenes:
        if s.label.seats is not None and len(s.label.seats) != seat_count:
            raise ManifestError(f"scene {s.scene_id}: label has {len(s.label.seats)} seats, expected {seat_count}")
    return DatasetManifest(
        root=root,
        split=split,
        scenes=scenes,
        seat_count=seat_count,
        class_names=list(meta.get("class_names", SEAT_CLASSES)),
        meta=meta,
    )


def write_meta(root, meta: dict) -> None:
    Path(root).mkdir(parents=True, exist_ok=True)
    (Path(root) / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def write_scene(split_dir: Path, scene_id: int, label: Label, images: Sequence[np.ndarray]) -> None:
    d = Path(split_dir) / f"scene_{scene_id}"
    d.mkdir(parents=True, exist_ok=True)
    (d / "label.json").write_text(json.dumps(label.to_json(), sort_keys=True) + "\n")
    for j, img in enumerate(images):
        write_image(d / f"variant_{j}.png", img)


def write_manifest(manifest: DatasetManifest, root) -> Path:
    """Write ``manifest`` in the on-disk layout under ``root``; returns the split dir."""
    root = Path(root)
    split_dir = root / manifest.split
    if split_dir.exists():
        shutil.rmtree(split_dir)
    meta = dict(manifest.meta)
    meta.setdefault("seat_count", manifest.seat_count)
    meta.setdefault("class_names", list(manifest.class_names))
    meta.setdefault("image_size", list(manifest.image_shape))
    write_meta(root, meta)
    for s in manifest.scenes:
        write_scene(split_dir, s.scene_id, s.label, s.images())
    return split_dir


# -- pair sampling ---------------------------------------------------------


@dataclass(frozen=True)
class PairSample:
    scene_id: int
    a: int  # input variant
    b: int  # target variant


def sample_pair(scene: SceneRecord, rng: np.random.Generator) -> PairSample:
    """Uniform ordered pair ``(a, b)`` of distinct variant indices."""
    n = scene.n
    if n < 2:
        raise ValueError(f"scene {scene.scene_id}: need at least 2 variants to draw a pair, has {n}")
    a = int(rng.integers(n))
    b = int(rng.integers(n - 1))
    if b >= a:
        b += 1
    return PairSample(scene.scene_id, a, b)


def sample_same_pair(scene: SceneRecord, rng: np.random.Generator) -> PairSample:
    """Vanilla-autoencoder pair: target is the input itself."""
    if scene.n < 1:
        raise ValueError(f"scene {scene.scene_id} has no variants")
    a = int(rng.integers(scene.n))
    return PairSample(scene.scene_id, a, a)


# -- triplet policies ------------------------------------------------------


@dataclass(frozen=True)
class TripletPolicy:
    name: str
    is_positive: Callable[[Label, Label], bool]
    is_negative: Callable[[Label, Label], bool]
    is_anchor: Callable[[Label], bool] = lambda label: True


def _seat_positive(anchor: Label, cand: Label) -> bool:
    return anchor.seats == cand.seats


def _seat_negative(anchor: Label, cand: Label) -> bool:
    # all-empty scenes carry nothing that could mislead, so they never serve as negatives
    return hamming(anchor, cand) == 1 and not cand.is_all_empty


def _same_category(anchor: Label, cand: Label) -> bool:
    return anchor.category == cand.category


def _other_category(anchor: Label, cand: Label) -> bool:
    return anchor.category != cand.category


SEAT_POLICY = TripletPolicy("seat", _seat_positive, _seat_negative, lambda lb: not lb.is_all_empty)
POSE_POLICY = TripletPolicy("pose", _same_category, _other_category)
LOCATION_POLICY = TripletPolicy("location", _same_category, _other_category)

POLICIES = {p.name: p for p in (SEAT_POLICY, POSE_POLICY, LOCATION_POLICY)}


def get_policy(name: str) -> TripletPolicy:
    try:
        return POLICIES[name]
    except KeyError:
        raise ValueError(f"unknown triplet policy {name!r}; choose from {sorted(POLICIES)}") from None


@dataclass(frozen=True)
class TripletSample:
    anchor: PairSample
    positive: PairSample
    negative: PairSample

    @property
    def members(self) -> tuple[PairSample, PairSample, PairSample]:
        return (self.anchor, self.positive, self.negative)


def eligible_candidates(manifest: DatasetManifest, anchor_scene_id: int, policy: TripletPolicy):
    """Scene ids eligible as (positives, negatives) for one anchor."""
    anchor = manifest.scene(anchor_scene_id)
    pos, neg = [], []
    for s in manifest.scenes:
        if s.scene_id == anchor_scene_id:
            continue
        if policy.is_positive(anchor.label, s.label):
            pos.append(s.scene_id)
        if policy.is_negative(anchor.label, s.label):
            neg.append(s.scene_id)
    return pos, neg


def can_anchor(manifest: DatasetManifest, scene_id: int, policy: TripletPolicy) -> bool:
    if not policy.is_anchor(manifest.scene(scene_id).label):
        return False
    pos, neg = eligible_candidates(manifest, scene_id, policy)
    return bool(pos) and bool(neg)


def sample_triplet(
    manifest: DatasetManifest,
    anchor_scene_id: int,
    policy: TripletPolicy,
    rng: np.random.Generator,
    pair_sampler=sample_pair,
) -> TripletSample:
    """Draw positive and negative scenes for an anchor; every member gets its own pair."""
    anchor = manifest.scene(anchor_scene_id)
    if not policy.is_anchor(anchor.label):
        raise SamplingError(
            f"scene {anchor_scene_id} (label {anchor.label.key}) is not a valid anchor under the {policy.name} policy"
        )
    pos, neg = eligible_candidates(manifest, anchor_scene_id, policy)
    if not pos:
        raise SamplingError(
            f"no scene satisfies the positive predicate of the {policy.name} policy for anchor {anchor_scene_id}"
        )
    if not neg:
        raise SamplingError(
            f"no scene satisfies the negative predicate of the {policy.name} policy for anchor {anchor_scene_id}"
        )
    p = pos[int(rng.integers(len(pos)))]
    q = neg[int(rng.integers(len(neg)))]
    return TripletSample(
        pair_sampler(anchor, rng),
        pair_sampler(manifest.scene(p), rng),
        pair_sampler(manifest.scene(q), rng),
    )


class TripletSampler:
    """``sample_triplet`` with the candidate lists computed once per manifest."""

    def __init__(self, manifest: DatasetManifest, policy: TripletPolicy):
        self.manifest = manifest
        self.policy = policy
        self._candidates = {}
        for s in manifest.scenes:
            if policy.is_anchor(s.label):
                pos, neg = eligible_candidates(manifest, s.scene_id, policy)
                if pos and neg:
                    self._candidates[s.scene_id] = (pos, neg)

    def can_anchor(self, scene_id: int) -> bool:
        return scene_id in self._candidates

    @property
    def anchors(self) -> list[int]:
        return list(self._candidates)

    def sample(self, anchor_scene_id: int, rng: np.random.Generator, pair_sampler=sample_pair) -> TripletSample:
        if anchor_scene_id not in self._candidates:
            # defer to the uncached path for the precise error message
            return sample_triplet(self.manifest, anchor_scene_id, self.policy, rng, pair_sampler)
        pos, neg = self._candidates[anchor_scene_id]
        p = pos[int(rng.integers(len(pos)))]
        q = neg[int(rng.integers(len(neg)))]
        m = self.manifest
        return TripletSample(
            pair_sampler(m.scene(anchor_scene_id), rng),
            pair_sampler(m.scene(p), rng),
            pair_sampler(m.scene(q), rng),
        )


# -- on-the-fly augmentation pairs ------------------------------------------

PHOTOMETRIC_OPS = ("gain", "bias", "gradient", "noise")
GEOMETRIC_OPS = ("flip", "rotate", "crop", "translate", "scale", "shear", "affine")


@dataclass(frozen=True)
class AugmentSpec:
    """Photometric transforms with their sampling ranges.

    ``ops`` maps an op name to ``(low, high)``: a multiplicative gain, an
    additive bias, the strength of a random linear gradient, or the standard
    deviation of Gaussian noise.
    """

    ops: tuple[tuple[str, tuple[float, float]], ...] = ()

    def __post_init__(self):
        for name, rng in self.ops:
            if name in GEOMETRIC_OPS:
                raise AugmentConfigError(f"geometric transform {name!r} would misalign scene content")
            if name not in PHOTOMETRIC_OPS:
                raise AugmentConfigError(f"unknown transform {name!r}")
            lo, hi = rng
            if lo > hi:
                raise AugmentConfigError(f"{name}: empty range {rng}")

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentSpec":
        return cls(tuple((k, tuple(v)) for k, v in d.items()))


def _augment(image: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    out = np.asarray(image, dtype=np.float64).copy()
    h, w = out.shape[:2]
    for name, (lo, hi) in spec.ops:
        v = rng.uniform(lo, hi)
        if name == "gain":
            out = out * v
        elif name == "bias":
            out = out + v
        elif name == "gradient":
            theta = rng.uniform(0, 2 * np.pi)
            yy, xx = np.mgrid[0:h, 0:w]
            field_ = (np.cos(theta) * (xx / max(w - 1, 1) - 0.5) + np.sin(theta) * (yy / max(h - 1, 1) - 0.5))
            out = out + v * field_[..., None]
        elif name == "noise":
            out = out + rng.normal(0.0, v, size=out.shape)
    return np.clip(out, 0, 1).astype(np.asarray(image).dtype)


def augment_pair(image: np.ndarray, spec: AugmentSpec, mode: str, rng: np.random.Generator):
    """Build an (input, target) pair from one image.

    ``both`` augments the image twice independently; ``reverse_denoise``
    keeps the clean image as input and augments only the target.
    """
    if mode == "both":
        return _augment(image, spec, rng), _augment(image, spec, rng)
    if mode == "reverse_denoise":
        return np.asarray(image).copy(), _augment(image, spec, rng)
    raise AugmentConfigError(f"unknown augmentation mode {mode!r}")
