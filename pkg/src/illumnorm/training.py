"""Reconstruction, triplet and total losses, and the scene-level training loop.

Batches iterate over scenes, not images.  For every scene and epoch a fresh
``(input, target)`` variant pair is drawn; in ``impossible`` mode the target
is a *different* illumination variant of the same scene, in ``vanilla`` mode
it is the input itself.  TAE batches carry full triplets (anchor, positive,
negative), each member with its own independently drawn pair.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import (
    AugmentSpec,
    DatasetManifest,
    PairSample,
    TripletSampler,
    augment_pair,
    get_policy,
    sample_pair,
    sample_same_pair,
)
from .model import ArchConfig, EncoderDecoder, build_model, images_to_batch, kl_divergence, save_checkpoint
from .ssim import SsimConfig, ssim_per_image

log = logging.getLogger(__name__)

LOSS_MODES = ("impossible", "vanilla")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 60
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    margin: float = 1.0
    kl_weight: float = 0.001
    seed: int = 0
    loss_mode: str = "impossible"
    policy: str = "seat"
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    augment: tuple = ()  # AugmentSpec ops; empty = no augmentation
    augment_mode: str = "both"

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        object.__setattr__(self, "augment", tuple((k, tuple(v)) for k, v in self.augment))
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.margin < 0 or self.kl_weight < 0:
            raise ValueError("margin and kl_weight must be >= 0")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        get_policy(self.policy)

    @property
    def ssim_config(self) -> SsimConfig:
        return SsimConfig(window_size=self.ssim_window, sigma=self.ssim_sigma)


# -- losses ----------------------------------------------------------------


def loss_recon_pair(model, inputs: torch.Tensor, targets: torch.Tensor, ssim_cfg: SsimConfig = SsimConfig(), generator=None):
    """Sum over the batch of ``1 - SSIM(decode(encode(input)), target)``.

    Returns ``(loss, code)`` so callers can reuse the latent code.
    """
    if inputs.shape != targets.shape:
        raise ValueError(f"input/target shape mismatch: {tuple(inputs.shape)} vs {tuple(targets.shape)}")
    code = model.encode(inputs, generator=generator)
    recon = model.decode(code.z)
    return torch.sum(1 - ssim_per_image(recon, targets, ssim_cfg)), code


def loss_triplet(anchor_z: torch.Tensor, positive_z: torch.Tensor, negative_z: torch.Tensor, margin: float) -> torch.Tensor:
    """Summed hinge ``max(0, |a - p|^2 - |a - n|^2 + margin)``."""
    if not anchor_z.shape == positive_z.shape == negative_z.shape:
        raise ValueError("anchor, positive and negative codes must share a shape")
    d_pos = (anchor_z - positive_z).pow(2).sum(dim=1)
    d_neg = (anchor_z - negative_z).pow(2).sum(dim=1)
    return torch.relu(d_pos - d_neg + margin).sum()


@dataclass
class Batch:
    """Stacked inputs/targets; the first ``3 * n_triplets`` rows are anchors, positives, negatives."""

    inputs: torch.Tensor
    targets: torch.Tensor
    n_triplets: int = 0
    pairs: list = field(default_factory=list)

    @property
    def n_pairs(self) -> int:
        return self.inputs.shape[0] - 3 * self.n_triplets


def loss_recon_triplet(model, batch: Batch, ssim_cfg: SsimConfig = SsimConfig(), generator=None):
    """Reconstruction term summed over the anchor, positive and negative members."""
    t = batch.n_triplets
    total = 0
    codes = []
    for m in range(3):
        sl = slice(m * t, (m + 1) * t)
        loss, code = loss_recon_pair(model, batch.inputs[sl], batch.targets[sl], ssim_cfg, generator)
        total = total + loss
        codes.append(code)
    return total, codes


@dataclass
class LossTerms:
    total: torch.Tensor
    recon: float
    triplet: float
    kl: float

    def as_dict(self) -> dict:
        return {"recon": self.recon, "triplet": self.triplet, "kl": self.kl, "total": float(self.total.detach())}


def total_loss(model: EncoderDecoder, batch: Batch, config: TrainConfig, generator=None) -> LossTerms:
    """``L_R + L_T`` for the TAE, ``L_R`` for the AE, ``L_R + beta * KL`` for the VAE.

    One forward pass over all rows; the scalar total is accumulated in float64
    so that it equals the logged components to rounding of the sum itself.
    """
    variant = model.variant
    if variant != "tae" and batch.n_triplets:
        raise ValueError(f"{variant} is trained on pair batches, got {batch.n_triplets} triplets")
    ssim_cfg = config.ssim_config
    code = model.encode(batch.inputs, generator=generator)
    recon_img = model.decode(code.z)
    recon = torch.sum(1 - ssim_per_image(recon_img, batch.targets, ssim_cfg))
    triplet = recon.new_zeros(())
    kl = recon.new_zeros(())
    t = batch.n_triplets
    if variant == "tae" and t:
        z = code.z
        triplet = loss_triplet(z[:t], z[t : 2 * t], z[2 * t : 3 * t], config.margin)
    if variant == "vae":
        kl = kl_divergence(code)
    total = recon.double() + triplet.double()
    if variant == "vae":
        total = total + config.kl_weight * kl.double()
    return LossTerms(total, recon.item(), triplet.item(), kl.item())


# -- batch assembly --------------------------------------------------------


class BatchBuilder:
    def __init__(self, manifest: DatasetManifest, config: TrainConfig, variant: str):
        self.manifest = manifest
        self.config = config
        self.variant = variant
        self.pair_sampler = sample_pair if config.loss_mode == "impossible" else sample_same_pair
        self.triplets = TripletSampler(manifest, get_policy(config.policy)) if variant == "tae" else None
        self.augment = AugmentSpec(config.augment) if config.augment else None
        self._images = {s.scene_id: s.images() for s in manifest.scenes}

    def _pair_images(self, p: PairSample, rng):
        imgs = self._images[p.scene_id]
        if self.augment is not None:
            return augment_pair(imgs[p.a], self.augment, self.config.augment_mode, rng)
        return imgs[p.a], imgs[p.b]

    def build(self, scene_ids, rng: np.random.Generator) -> Batch:
        triplets, singles = [], []
        for k in scene_ids:
            if self.triplets is not None and self.triplets.can_anchor(k):
                triplets.append(self.triplets.sample(k, rng, self.pair_sampler))
            else:
                singles.append(self.pair_sampler(self.manifest.scene(k), rng))
        ordered = [t.anchor for t in triplets] + [t.positive for t in triplets] + [t.negative for t in triplets] + singles
        xs, ys = zip(*(self._pair_images(p, rng) for p in ordered))
        return Batch(images_to_batch(np.stack(xs)), images_to_batch(np.stack(ys)), len(triplets), ordered)


# -- training loop ---------------------------------------------------------


@dataclass
class TrainHistory:
    recon: list = field(default_factory=list)
    triplet: list = field(default_factory=list)
    kl: list = field(default_factory=list)
    total: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    steps: list = field(default_factory=list)  # per-step dicts: epoch, batch, recon, triplet, kl, total

    def __len__(self) -> int:
        return len(self.total)

    def epochs(self) -> list[dict]:
        return [
            {"epoch": i + 1, "recon": r, "triplet": t, "kl": k, "total": tot, "wall_time": w}
            for i, (r, t, k, tot, w) in enumerate(zip(self.recon, self.triplet, self.kl, self.total, self.wall_time))
        ]

    def to_csv(self, path) -> None:
        rows = self.epochs()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "recon", "triplet", "kl", "total", "wall_time"])
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def train(
    manifest: DatasetManifest,
    arch: ArchConfig,
    config: TrainConfig,
    checkpoint_path=None,
    metrics_path=None,
    progress: bool = False,
) -> tuple[EncoderDecoder, TrainHistory]:
    """Train one encoder-decoder; deterministic given ``config.seed``."""
    if tuple(manifest.image_shape) != tuple(arch.input_shape):
        raise ValueError(f"manifest images {manifest.image_shape} do not match arch input {arch.input_shape}")
    model = build_model(arch, seed=config.seed)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=config.betas)
    rng = np.random.default_rng([config.seed, 1])
    gen = torch.Generator().manual_seed(config.seed + 7919)
    builder = BatchBuilder(manifest, config, arch.variant)
    ids = np.array([s.scene_id for s in manifest.scenes])
    hist = TrainHistory()
    weight = config.kl_weight if arch.variant == "vae" else 0.0

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        sums = dict(recon=0.0, triplet=0.0, kl=0.0, total=0.0)
        order = ids[rng.permutation(len(ids))]
        n_batches = 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            batch = builder.build(order[start : start + config.batch_size], rng)
            terms = total_loss(model, batch, config, gen)
            row = terms.as_dict()
            if not all(math.isfinite(v) for v in row.values()):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}: {row}")
            opt.zero_grad()
            terms.total.backward()
            opt.step()
            hist.steps.append({"epoch": epoch, "batch": b, **row, "kl_weight": weight})
            for k in sums:
                sums[k] += row[k]
            n_batches += 1
        hist.recon.append(sums["recon"] / n_batches)
        hist.triplet.append(sums["triplet"] / n_batches)
        hist.kl.append(sums["kl"] / n_batches)
        hist.total.append(sums["total"] / n_batches)
        hist.wall_time.append(time.perf_counter() - t0)
        msg = "epoch %d/%d total=%.4f recon=%.4f triplet=%.4f kl=%.4f (%.1fs)"
        args = (epoch, config.epochs, hist.total[-1], hist.recon[-1], hist.triplet[-1], hist.kl[-1], hist.wall_time[-1])
        if progress:
            print(msg % args, flush=True)
        log.debug(msg, *args)

    model.eval()
    if metrics_path is not None:
        hist.to_csv(metrics_path)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, asdict(config), config.seed, hist.epochs())
    return model, hist
