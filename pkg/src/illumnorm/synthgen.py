"""Procedural rear-bench scenes rendered under several illumination variants.

Each scene is a fixed "cabin" (frame, window, three seats) with a glyph per
occupied seat.  The content canvas is drawn once; variants differ only in a
photometric nuisance model (gain, bias, linear gradient, soft shadow and the
brightness of whatever is visible through the window).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
import shutil
from pathlib import Path

import numpy as np

from .dataset import (
    SEAT_CLASSES,
    DatasetManifest,
    Label,
    SceneRecord,
    load_manifest,
    write_meta,
    write_scene,
)

# intensities of the static cabin
FRAME_VALUE = 0.35
CABIN_VALUE = 0.5
SEAT_OUTLINE_VALUE = 0.3
SEAT_FILL_VALUE = 0.2
WINDOW_VALUE = 0.0

SCALE_RANGE = {"train": (0.8, 1.0), "test": (1.0, 1.2)}
GRADIENT_RANGE = {"train": (0.0, 0.25), "test": (0.25, 0.4)}


@dataclass(frozen=True)
class SceneSpec:
    scene_id: int
    seats: tuple[int, int, int]
    scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    x_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    texture: tuple[float, float, float] = (0.65, 0.65, 0.65)

    def __post_init__(self):
        if len(self.seats) != 3 or any(s not in range(4) for s in self.seats):
            raise ValueError(f"seats must be three classes in 0..3, got {self.seats}")
        for s, dx, t in zip(self.scale, self.x_offset, self.texture):
            if not (0.8 <= s <= 1.2 and -2 <= dx <= 2 and 0.4 <= t <= 0.9):
                raise ValueError(f"jitter out of range: scale={s}, x_offset={dx}, texture={t}")


@dataclass(frozen=True)
class IlluminationSpec:
    gain: float = 1.0
    bias: float = 0.0
    gradient_angle: float = 0.0
    gradient_strength: float = 0.0
    shadow_center: tuple[float, float] = (0.5, 0.5)  # fractions of (H, W)
    shadow_axes: tuple[float, float] = (0.25, 0.25)  # fractions of (H, W)
    shadow_attenuation: float = 1.0  # 1.0 = no shadow
    window_brightness: float = 0.0  # 0.0 = window left as drawn

    @classmethod
    def sample(cls, rng: np.random.Generator, gradient_range=(0.0, 0.4)) -> "IlluminationSpec":
        return cls(
            gain=float(rng.uniform(0.5, 1.3)),
            bias=float(rng.uniform(-0.15, 0.15)),
            gradient_angle=float(rng.uniform(0, 2 * np.pi)),
            gradient_strength=float(rng.uniform(*gradient_range)),
            shadow_center=(float(rng.uniform(0.2, 0.8)), float(rng.uniform(0.1, 0.9))),
            shadow_axes=(float(rng.uniform(0.15, 0.45)), float(rng.uniform(0.1, 0.35))),
            shadow_attenuation=float(rng.uniform(0.3, 1.0)),
            window_brightness=float(rng.uniform(0.1, 1.0)),
        )


@dataclass(frozen=True)
class GenConfig:
    size: int = 64
    channels: int = 1
    train_scenes: int = 200
    test_scenes: int = 200
    variants: int = 8
    seed: int = 0
    balance: str = "balanced"  # or "random"

    def __post_init__(self):
        if self.train_scenes < 1 or self.test_scenes < 1:
            raise ValueError("scenes per split must be >= 1")
        if self.variants < 2:
            raise ValueError(f"variants must be >= 2 (got {self.variants})")
        if self.size < 32:
            raise ValueError(f"size must be >= 32 (got {self.size})")
        if self.channels != 1:
            raise ValueError("only single-channel images are generated")
        if self.balance not in ("balanced", "random"):
            raise ValueError(f"balance must be 'balanced' or 'random', got {self.balance!r}")


@dataclass(frozen=True)
class CabinLayout:
    """Pixel geometry of the static cabin for one image size."""

    size: int
    frame: int
    window: tuple[int, int, int, int]  # y0, y1, x0, x1 (half-open)
    seats: tuple[tuple[int, int, int, int], ...]

    @classmethod
    def for_size(cls, size: int) -> "CabinLayout":
        u = size / 64.0
        frame = max(1, round(2 * u))
        window = (round(4 * u), round(18 * u), round(8 * u), round(56 * u))
        seats = []
        for i in range(3):
            x0 = round((4 + 19 * i) * u)
            seats.append((round(22 * u), round(61 * u), x0, x0 + round(18 * u)))
        return cls(size, frame, window, tuple(seats))

    def window_mask(self) -> np.ndarray:
        m = np.zeros((self.size, self.size), bool)
        y0, y1, x0, x1 = self.window
        m[y0:y1, x0:x1] = True
        return m

    def seat_mask(self, i: int) -> np.ndarray:
        m = np.zeros((self.size, self.size), bool)
        y0, y1, x0, x1 = self.seats[i]
        m[y0:y1, x0:x1] = True
        return m


def _glyph_mask(cls_id: int, region, scale: float, dx: float, size: int) -> np.ndarray:
    y0, y1, x0, x1 = region
    u = size / 64.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cx = (x0 + x1) / 2 + dx * u
    s = scale * u
    floor_y = y1 - 3 * u
    if cls_id == 0:
        m = np.zeros((size, size), bool)
    elif cls_id == 1:  # infant seat: filled half-disc resting on the seat
        r = 7 * s
        m = ((xx - cx) ** 2 + (yy - floor_y) ** 2 <= r * r) & (yy <= floor_y)
    elif cls_id == 2:  # child seat: rectangle with a notch cut from the top edge
        hw, h = 6 * s, 22 * s
        top = floor_y - h
        m = (np.abs(xx - cx) <= hw) & (yy >= top) & (yy <= floor_y)
        notch = (np.abs(xx - cx) <= 2.5 * s) & (yy < top + 6 * s)
        m &= ~notch
    elif cls_id == 3:  # adult: elliptic torso plus a round head
        by = floor_y - 11 * s
        body = ((xx - cx) / (6.5 * s)) ** 2 + ((yy - by) / (11 * s)) ** 2 <= 1
        hy = by - 11 * s - 4.5 * s
        head = (xx - cx) ** 2 + (yy - hy) ** 2 <= (4.5 * s) ** 2
        m = body | head
    else:
        raise ValueError(f"unknown seat class {cls_id}")
    inside = np.zeros_like(m)
    inside[y0 + 1 : y1 - 1, x0 + 1 : x1 - 1] = True
    return m & inside


def render_content(spec: SceneSpec, size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Draw the illumination-free canvas; returns ``(image (H, W, 1), glyph mask)``."""
    lay = CabinLayout.for_size(size)
    img = np.full((size, size), CABIN_VALUE)
    f = lay.frame
    img[:f, :] = img[-f:, :] = img[:, :f] = img[:, -f:] = FRAME_VALUE
    img[lay.window_mask()] = WINDOW_VALUE
    mask = np.zeros((size, size), bool)
    yy, xx = np.mgrid[0:size, 0:size]
    for i, region in enumerate(lay.seats):
        y0, y1, x0, x1 = region
        img[y0:y1, x0:x1] = SEAT_OUTLINE_VALUE
        img[y0 + 1 : y1 - 1, x0 + 1 : x1 - 1] = SEAT_FILL_VALUE
        g = _glyph_mask(spec.seats[i], region, spec.scale[i], spec.x_offset[i], size)
        # diagonal stripes give the glyph a texture whose mean is the texture intensity
        stripes = 1.0 + 0.12 * np.where(((xx + yy) // 3) % 2 == 0, 1.0, -1.0)
        img[g] = (spec.texture[i] * stripes)[g]
        mask |= g
    return img[..., None], mask


def illumination_field(illum: IlluminationSpec, size: int):
    """Additive gradient, window term and shadow ellipse weights for one variant."""
    lay = CabinLayout.for_size(size)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u = xx / (size - 1) - 0.5
    v = yy / (size - 1) - 0.5
    gradient = illum.gradient_strength * (np.cos(illum.gradient_angle) * u + np.sin(illum.gradient_angle) * v)
    window = lay.window_mask() * illum.window_brightness
    cy, cx = illum.shadow_center
    ay, ax = illum.shadow_axes
    r2 = ((yy / (size - 1) - cy) / ay) ** 2 + ((xx / (size - 1) - cx) / ax) ** 2
    shadow = 0.5 * (1.0 - np.tanh(4.0 * (r2 - 1.0)))  # logistic soft edge, overflow-free
    return gradient, window, shadow


def apply_illumination(content: np.ndarray, illum: IlluminationSpec) -> np.ndarray:
    """Photometric-only nuisance: ``clip(gain*c + bias + gradient + window - shadow, 0, 1)``."""
    c = np.asarray(content, dtype=np.float64)
    size = c.shape[0]
    gradient, window, shadow = illumination_field(illum, size)
    lit = illum.gain * c + illum.bias + (gradient + window)[..., None]
    shadow_term = (1.0 - illum.shadow_attenuation) * shadow[..., None] * lit
    return np.clip(lit - shadow_term, 0.0, 1.0)


def _draw_labels(n: int, mode: str, rng: np.random.Generator) -> list[tuple[int, int, int]]:
    all_labels = [(a, b, c) for a in range(4) for b in range(4) for c in range(4)]
    if mode == "random":
        return [tuple(int(s) for s in rng.integers(0, 4, size=3)) for _ in range(n)]
    # balanced: whole copies of the 64-label space, remainder drawn without replacement
    reps, rem = divmod(n, len(all_labels))
    idx = list(range(len(all_labels))) * reps
    idx += [int(i) for i in rng.choice(len(all_labels), size=rem, replace=False)]
    idx = [idx[i] for i in rng.permutation(len(idx))]
    return [all_labels[i] for i in idx]


def sample_scene_spec(scene_id: int, seats, split: str, rng: np.random.Generator) -> SceneSpec:
    lo, hi = SCALE_RANGE[split]
    return SceneSpec(
        scene_id=scene_id,
        seats=tuple(int(s) for s in seats),
        scale=tuple(float(x) for x in rng.uniform(lo, hi, 3)),
        x_offset=tuple(float(x) for x in rng.uniform(-2, 2, 3)),
        texture=tuple(float(x) for x in rng.uniform(0.4, 0.9, 3)),
    )


def render_scene(spec: SceneSpec, illums, size: int) -> list[np.ndarray]:
    content, _ = render_content(spec, size)
    return [apply_illumination(content, il) for il in illums]


def generate_split(config: GenConfig, split: str) -> DatasetManifest:
    """Render one split in memory (no disk I/O)."""
    split_idx = {"train": 0, "test": 1}[split]
    n_scenes = config.train_scenes if split == "train" else config.test_scenes
    label_rng = np.random.default_rng([config.seed, split_idx, 0])
    seats = _draw_labels(n_scenes, config.balance, label_rng)
    scenes = []
    for k in range(n_scenes):
        rng = np.random.default_rng([config.seed, split_idx, 1, k])
        spec = sample_scene_spec(k, seats[k], split, rng)
        illums = [IlluminationSpec.sample(rng, GRADIENT_RANGE[split]) for _ in range(config.variants)]
        images = [im.astype(np.float32) for im in render_scene(spec, illums, config.size)]
        scenes.append(SceneRecord(k, Label(seats=spec.seats), images))
    return DatasetManifest(None, split, scenes, 3, list(SEAT_CLASSES), meta=_meta(config))


def _meta(config: GenConfig) -> dict:
    return {
        "seat_count": 3,
        "class_names": list(SEAT_CLASSES),
        "image_size": [config.size, config.size, config.channels],
        "seed": config.seed,
        "balance": config.balance,
        "variants": config.variants,
        "generator": asdict(config),
    }


def generate_dataset(config: GenConfig, out_dir, overwrite: bool = False) -> DatasetManifest:
    """Render train and test splits to ``out_dir``; returns the loaded train manifest."""
    out = Path(out_dir)
    for split in ("train", "test"):
        d = out / split
        if d.exists() and any(d.iterdir()):
            if not overwrite:
                raise FileExistsError(f"{d} is not empty")
            shutil.rmtree(d)
    out.mkdir(parents=True, exist_ok=True)
    write_meta(out, _meta(config))
    for split in ("train", "test"):
        m = generate_split(config, split)
        for s in m.scenes:
            write_scene(out / split, s.scene_id, s.label, s.images())
    return load_manifest(out, "train")
