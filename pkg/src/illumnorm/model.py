"""VGG-style convolutional encoder / nearest-neighbour-upsampling decoder.

One architecture serves the three variants: ``ae`` and ``tae`` are identical
networks (the triplet term lives in the loss), ``vae`` doubles the encoder
head to emit ``(mu, logvar)``.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

VARIANTS = ("ae", "vae", "tae")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    input_shape: tuple[int, int, int] = (64, 64, 1)  # H, W, C
    widths: tuple[int, ...] = (16, 32, 64, 128)
    latent_dim: int = 16
    variant: str = "tae"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        h, w, _ = self.input_shape
        factor = 2 ** len(self.widths)
        if h % factor or w % factor:
            raise ValueError(f"input {h}x{w} is not divisible by 2**{len(self.widths)}")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    @property
    def bottleneck(self) -> tuple[int, int, int]:
        factor = 2 ** len(self.widths)
        return self.widths[-1], self.input_shape[0] // factor, self.input_shape[1] // factor


@dataclass
class LatentCode:
    """``z`` is the code fed to the decoder; ``mu``/``logvar`` only exist for the VAE."""

    z: torch.Tensor
    mu: torch.Tensor | None = None
    logvar: torch.Tensor | None = None

    @property
    def embedding(self) -> torch.Tensor:
        """Deterministic code used for retrieval (``mu`` for the VAE)."""
        return self.mu if self.mu is not None else self.z


class EncoderDecoder(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        _, _, channels = arch.input_shape
        enc = []
        c = channels
        for w in arch.widths:
            enc.append(nn.Sequential(nn.Conv2d(c, w, 3, padding=1), nn.ReLU(inplace=True), nn.MaxPool2d(2)))
            c = w
        self.encoder_stages = nn.ModuleList(enc)
        flat = int(np.prod(arch.bottleneck))
        head_out = 2 * arch.latent_dim if arch.variant == "vae" else arch.latent_dim
        self.encoder_head = nn.Linear(flat, head_out)

        self.decoder_head = nn.Linear(arch.latent_dim, flat)
        dec = []
        ladder = list(reversed(arch.widths))
        for c_in, c_out in zip(ladder, ladder[1:] + [arch.widths[0]]):
            dec.append(
                nn.Sequential(
                    nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(c_in, c_out, 3, padding=1),
                    nn.ReLU(inplace=True),
                )
            )
        self.decoder_stages = nn.ModuleList(dec)
        self.output_conv = nn.Conv2d(arch.widths[0], channels, 3, padding=1)

    @property
    def variant(self) -> str:
        return self.arch.variant

    def _check_input(self, x: torch.Tensor) -> None:
        h, w, c = self.arch.input_shape
        if x.ndim != 4 or tuple(x.shape[1:]) != (c, h, w):
            raise ValueError(f"expected input of shape (B, {c}, {h}, {w}), got {tuple(x.shape)}")

    def encode(self, x: torch.Tensor, generator: torch.Generator | None = None, noise: torch.Tensor | None = None) -> LatentCode:
        """Encode a ``(B, C, H, W)`` batch.

        For the VAE, ``z = mu + exp(logvar / 2) * eps`` with ``eps`` taken from
        ``noise`` if given, else drawn from ``generator``.
        """
        self._check_input(x)
        h = x
        for stage in self.encoder_stages:
            h = stage(h)
        out = self.encoder_head(h.flatten(1))
        if self.variant != "vae":
            return LatentCode(out)
        mu, logvar = out.chunk(2, dim=1)
        if noise is None:
            noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
        z = mu + torch.exp(0.5 * logvar) * noise
        return LatentCode(z, mu, logvar)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 2 or z.shape[1] != self.arch.latent_dim:
            raise ValueError(f"expected latent of shape (B, {self.arch.latent_dim}), got {tuple(z.shape)}")
        h = self.decoder_head(z).relu().view(z.shape[0], *self.arch.bottleneck)
        for stage in self.decoder_stages:
            h = stage(h)
        return torch.sigmoid(self.output_conv(h))

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Deterministic embedding (``mu`` for the VAE)."""
        if self.variant == "vae":
            return self.encode(x, noise=torch.zeros(x.shape[0], self.arch.latent_dim, dtype=x.dtype)).mu
        return self.encode(x).z

    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        """Deterministic reconstruction through the embedding."""
        return self.decode(self.embed(x))

    def stage_parameters(self) -> dict[str, list[nn.Parameter]]:
        stages = {}
        for i, s in enumerate(self.encoder_stages):
            stages[f"encoder_stage{i}"] = list(s.parameters())
        stages["encoder_head"] = list(self.encoder_head.parameters())
        stages["decoder_head"] = list(self.decoder_head.parameters())
        for i, s in enumerate(self.decoder_stages):
            stages[f"decoder_stage{i}"] = list(s.parameters())
        stages["output_conv"] = list(self.output_conv.parameters())
        return stages


def kl_divergence(code: LatentCode) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) summed over latent dims and batch."""
    if code.mu is None or code.logvar is None:
        raise ValueError("KL divergence needs a VAE code with mu and logvar")
    mu, logvar = code.mu, code.logvar
    return 0.5 * torch.sum(mu.pow(2) + logvar.exp() - logvar - 1)


def build_model(arch: ArchConfig, seed: int | None = None) -> EncoderDecoder:
    if seed is not None:
        torch.manual_seed(seed)
    return EncoderDecoder(arch)


def images_to_batch(images) -> torch.Tensor:
    """``(N, H, W, C)`` or ``(H, W, C)`` numpy images -> float32 ``(N, C, H, W)`` tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def batch_to_images(batch: torch.Tensor) -> np.ndarray:
    return batch.detach().cpu().numpy().transpose(0, 2, 3, 1)


# -- checkpoints -----------------------------------------------------------


def state_fingerprint(model: EncoderDecoder) -> str:
    """SHA-256 over the architecture and the exact weight bytes."""
    h = hashlib.sha256()
    h.update(json.dumps(asdict(model.arch), sort_keys=True).encode())
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    model: EncoderDecoder
    train_config: dict = field(default_factory=dict)
    seed: int | None = None
    history: list = field(default_factory=list)

    @property
    def fingerprint(self) -> str:
        return state_fingerprint(self.model)


def save_checkpoint(path, model: EncoderDecoder, train_config: dict | None = None, seed: int | None = None, history=None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "arch": json.dumps(asdict(model.arch)),
        "variant": model.variant,
        "train_config": json.dumps(train_config or {}, sort_keys=True),
        "seed": -1 if seed is None else int(seed),
        "history": json.dumps(history or []),
        "state_dict": model.state_dict(),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    arch = ArchConfig(**json.loads(payload["arch"]))
    model = EncoderDecoder(arch)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    seed = payload["seed"]
    return Checkpoint(
        model=model,
        train_config=json.loads(payload["train_config"]),
        seed=None if seed < 0 else seed,
        history=json.loads(payload["history"]),
    )
