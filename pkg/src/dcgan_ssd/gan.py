"""DCGAN generator/discriminator, adversarial objectives and the training loop.

Notation used below: ``d_real`` are discriminator confidences on real images,
``d_fake`` on generated ones. All logs are natural logs, and confidences are
clamped ``EPS`` away from 0 and 1 before any log is taken.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import batch_indices, to_batch
from .errors import NumericalError, ShapeError

log = logging.getLogger(__name__)

EPS = 1e-7
LOSS_VARIANTS = ("saturating", "non_saturating")


def _pair(size) -> tuple[int, int]:
    return (size, size) if isinstance(size, int) else (int(size[0]), int(size[1]))


def init_dcgan_weights(module: nn.Module) -> None:
    """N(0, 0.02) weights, N(1, 0.02) batch-norm scales, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
            nn.init.normal_(m.weight, 1.0, 0.02)
            nn.init.zeros_(m.bias)


def seeded_build(factory: Callable[[], nn.Module], seed: int) -> nn.Module:
    """Construct a module under a private RNG state so init is a pure function of seed."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return factory()


# ---------------------------------------------------------------------------
# Networks


@dataclass(frozen=True)
class DiscriminatorConfig:
    image_size: int | tuple[int, int] = 32
    in_channels: int = 3
    channels: tuple[int, ...] = (64, 128, 256)


class Discriminator(nn.Module):
    """Strided-conv ladder with leaky ReLU and a sigmoid scalar head.

    The first conv layer has no batch norm. ``features`` returns the
    post-activation map of every conv layer, which the linear probe and the
    detector backbone both reuse.
    """

    kind = "discriminator"
    config_class = DiscriminatorConfig

    def __init__(self, config: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.config = config
        h, w = _pair(config.image_size)
        blocks = []
        c_in = config.in_channels
        for i, c in enumerate(config.channels):
            layers: list[nn.Module] = [nn.Conv2d(c_in, c, 4, 2, 1, bias=(i == 0))]
            if i > 0:
                layers.append(nn.BatchNorm2d(c))
            layers.append(nn.LeakyReLU(0.2))
            blocks.append(nn.Sequential(*layers))
            c_in = c
            h, w = h // 2, w // 2
        if h < 1 or w < 1:
            raise ShapeError(f"image size {config.image_size} too small for {len(config.channels)} stride-2 layers")
        self.convs = nn.ModuleList(blocks)
        self.final_size = (h, w)
        self.head = nn.Linear(c_in * h * w, 1)
        init_dcgan_weights(self)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        maps = []
        for block in self.convs:
            x = block(x)
            maps.append(x)
        return maps

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x)[-1].flatten(1)).squeeze(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x)).clamp(EPS, 1 - EPS)

    def layer_spec(self) -> list[dict]:
        spec = [
            {"type": "conv", "kernel": 4, "stride": 2, "channels": c, "norm": i > 0, "activation": "leaky_relu"}
            for i, c in enumerate(self.config.channels)
        ]
        return spec + [{"type": "linear", "channels": 1, "activation": "sigmoid"}]


@dataclass(frozen=True)
class GeneratorConfig:
    noise_dim: int = 100
    image_size: int | tuple[int, int] = 32
    out_channels: int = 3
    channels: tuple[int, ...] = (256, 128, 64)


class Generator(nn.Module):
    """Latent-mode generator: noise -> projection -> up-convolutions -> tanh."""

    kind = "generator_latent"
    config_class = GeneratorConfig
    mode = "latent"

    def __init__(self, config: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.config = config
        h, w = _pair(config.image_size)
        scale = 2 ** len(config.channels)
        if h % scale or w % scale:
            raise ShapeError(f"image size {config.image_size} not divisible by {scale}")
        self.start = (h // scale, w // scale)
        c0 = config.channels[0]
        units = c0 * self.start[0] * self.start[1]
        self.project = nn.Linear(config.noise_dim, units)
        # per-unit norm: uniform [0, 1) noise has a large mean that a per-channel norm would keep
        self.project_norm = nn.BatchNorm1d(units)
        ups: list[nn.Module] = []
        for c_in, c_out in zip(config.channels, config.channels[1:]):
            ups += [nn.ConvTranspose2d(c_in, c_out, 4, 2, 1, bias=False), nn.BatchNorm2d(c_out), nn.ReLU()]
        ups += [nn.ConvTranspose2d(config.channels[-1], config.out_channels, 4, 2, 1), nn.Tanh()]
        self.decoder = nn.Sequential(*ups)
        init_dcgan_weights(self)

    @property
    def output_layer(self) -> nn.ConvTranspose2d:
        return self.decoder[-2]

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.project_norm(self.project(z)))
        return self.decoder(x.view(z.shape[0], self.config.channels[0], *self.start))

    def layer_spec(self) -> list[dict]:
        spec = [{"type": "linear", "channels": self.config.channels[0], "norm": True, "activation": "relu"}]
        for i, c in enumerate(self.config.channels[1:] + (self.config.out_channels,)):
            last = i == len(self.config.channels) - 1
            spec.append(
                {"type": "upconv", "kernel": 4, "stride": 2, "channels": c, "norm": not last,
                 "activation": "tanh" if last else "relu"}
            )
        return spec


@dataclass(frozen=True)
class ConditionalGeneratorConfig:
    out_size: int | tuple[int, int] = 64
    in_channels: int = 3
    channels: tuple[int, ...] = (32, 64)


class ConditionalGenerator(nn.Module):
    """Image-to-image generator producing a frame at ``out_size``.

    The low-quality input is bilinearly resized to the output resolution and
    passed through a stride-2 encoder / up-convolution decoder with additive
    skips. The decoder emits a residual that is added to the input in
    pre-tanh (atanh) space, so an all-zero output layer makes the refiner the
    identity and the output always stays inside [-1, 1].

    ``refine`` is resolution preserving and works on any frame size, which is
    what the enhancer uses for arbitrary target resolutions.
    """

    kind = "generator_conditional"
    config_class = ConditionalGeneratorConfig
    mode = "conditional"

    def __init__(self, config: ConditionalGeneratorConfig = ConditionalGeneratorConfig()):
        super().__init__()
        self.config = config
        c_in = config.in_channels
        enc = []
        for c in config.channels:
            enc.append(nn.Sequential(nn.Conv2d(c_in, c, 4, 2, 1), nn.LeakyReLU(0.2)))
            c_in = c
        self.encoder = nn.ModuleList(enc)
        outs = list(reversed((config.in_channels,) + tuple(config.channels[:-1])))
        dec = []
        for i, c in enumerate(outs):
            last = i == len(outs) - 1
            dec.append(nn.ConvTranspose2d(c_in, c, 4, 2, 1) if last else
                       nn.Sequential(nn.ConvTranspose2d(c_in, c, 4, 2, 1), nn.ReLU()))
            c_in = c
        self.decoder = nn.ModuleList(dec)
        init_dcgan_weights(self)

    @property
    def output_layer(self) -> nn.ConvTranspose2d:
        return self.decoder[-1]

    @classmethod
    def identity(cls, config: ConditionalGeneratorConfig = ConditionalGeneratorConfig()) -> "ConditionalGenerator":
        g = cls(config)
        with torch.no_grad():
            g.output_layer.weight.zero_()
            g.output_layer.bias.zero_()
        return g

    def residual(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        mult = 2 ** len(self.encoder)
        ph, pw = (-h) % mult, (-w) % mult
        y = F.pad(x, (0, pw, 0, ph), mode="replicate") if (ph or pw) else x
        skips = []
        for block in self.encoder:
            y = block(y)
            skips.append(y)
        skips.pop()
        for block in self.decoder:
            y = block(y)
            if skips:
                y = y + skips.pop()
        return y[..., :h, :w]

    def refine(self, x: torch.Tensor) -> torch.Tensor:
        r = self.residual(x)
        base = torch.atanh(x.double().clamp(-1 + 1e-9, 1 - 1e-9))
        return torch.tanh(base + r.double()).to(x.dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        size = _pair(self.config.out_size)
        if tuple(x.shape[-2:]) != size:
            x = F.interpolate(x, size=size, mode="bilinear", align_corners=False).clamp(-1.0, 1.0)
        return self.refine(x)

    def layer_spec(self) -> list[dict]:
        spec = [{"type": "resize", "mode": "bilinear", "size": list(_pair(self.config.out_size))}]
        spec += [{"type": "conv", "kernel": 4, "stride": 2, "channels": c, "norm": False,
                  "activation": "leaky_relu"} for c in self.config.channels]
        outs = list(reversed((self.config.in_channels,) + tuple(self.config.channels[:-1])))
        spec += [{"type": "upconv", "kernel": 4, "stride": 2, "channels": c, "norm": False,
                  "activation": "residual_tanh" if i == len(outs) - 1 else "relu"} for i, c in enumerate(outs)]
        return spec


def generator_forward(g: nn.Module, inputs: torch.Tensor) -> torch.Tensor:
    """Run a generator after checking that ``inputs`` match its mode."""
    if g.mode == "latent":
        if inputs.ndim != 2 or inputs.shape[1] != g.config.noise_dim:
            raise ShapeError(f"latent generator expects (N, {g.config.noise_dim}) noise, got {tuple(inputs.shape)}")
    elif inputs.ndim != 4 or inputs.shape[1] != g.config.in_channels:
        raise ShapeError(f"conditional generator expects (N, {g.config.in_channels}, H, W), got {tuple(inputs.shape)}")
    return g(inputs)


def discriminator_forward(d: Discriminator, images: torch.Tensor) -> torch.Tensor:
    expected = (d.config.in_channels, *_pair(d.config.image_size))
    if images.ndim != 4 or tuple(images.shape[1:]) != expected:
        raise ShapeError(f"discriminator expects (N, {expected}), got {tuple(images.shape)}")
    return d(images)


# ---------------------------------------------------------------------------
# Noise and objectives


def sample_noise(n: int, dim: int = 100, seed: int | torch.Generator = 0, distribution: str = "uniform") -> torch.Tensor:
    """``n`` noise vectors of length ``dim``; uniform on [0, 1) by default."""
    if n < 1 or dim < 1:
        raise ValueError(f"need n >= 1 and dim >= 1, got n={n}, dim={dim}")
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    if distribution == "uniform":
        return torch.rand(n, dim, generator=gen)
    if distribution == "gaussian":
        return torch.randn(n, dim, generator=gen)
    raise ValueError(f"unknown noise distribution {distribution!r}")


def _confidences(c: torch.Tensor) -> torch.Tensor:
    c = torch.as_tensor(c)
    if torch.isnan(c).any():
        raise NumericalError("NaN confidences")
    if not torch.all((c >= 0) & (c <= 1)):
        raise ValueError("confidences must lie in [0, 1]")
    return c.clamp(EPS, 1 - EPS)


def gan_value(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """Empirical minimax value: mean log D(real) + mean log(1 - D(fake))."""
    return torch.log(_confidences(d_real)).mean() + torch.log1p(-_confidences(d_fake)).mean()


def discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    return -gan_value(d_real, d_fake)


def generator_loss(d_fake: torch.Tensor, variant: str = "non_saturating") -> torch.Tensor:
    d_fake = _confidences(d_fake)
    if variant == "saturating":
        return torch.log1p(-d_fake).mean()
    if variant == "non_saturating":
        return -torch.log(d_fake).mean()
    raise ValueError(f"unknown generator loss variant {variant!r}")


def enhancement_loss(
    g_output: torch.Tensor,
    target: torch.Tensor,
    d_fake: torch.Tensor,
    lambda_rec: float = 1.0,
    lambda_adv: float = 1.0,
) -> torch.Tensor:
    """Weighted L1 reconstruction plus non-saturating adversarial term."""
    if g_output.shape != target.shape:
        raise ShapeError(f"output {tuple(g_output.shape)} vs target {tuple(target.shape)}")
    return lambda_rec * (g_output - target).abs().mean() + lambda_adv * generator_loss(d_fake, "non_saturating")


# ---------------------------------------------------------------------------
# Training


@dataclass
class GanTrainConfig:
    batch_size: int = 72
    epochs: int = 25
    image_size: int = 32
    noise_dim: int = 100
    learning_rate: float = 2e-4
    optimizer_moments: tuple[float, float] = (0.5, 0.999)
    seed: int = 0
    generator_loss_variant: str = "non_saturating"
    reconstruction_weight: float = 1.0
    adversarial_weight: float = 1.0
    mode: str = "latent"
    noise_distribution: str = "uniform"
    generator_channels: tuple[int, ...] = (256, 128, 64)
    discriminator_channels: tuple[int, ...] = (64, 128, 256)
    conditional_channels: tuple[int, ...] = (32, 64)

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 1 or not self.learning_rate > 0:
            raise ValueError("batch_size >= 1, epochs >= 1 and learning_rate > 0 are required")
        if self.generator_loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"unknown generator loss variant {self.generator_loss_variant!r}")
        if self.mode not in ("latent", "conditional"):
            raise ValueError(f"unknown generator mode {self.mode!r}")
        if self.reconstruction_weight < 0 or self.adversarial_weight < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class LossRecord:
    epoch: int
    batch: int
    d_loss: float
    g_loss: float
    v_estimate: float


@dataclass
class GanTrainResult:
    generator: nn.Module
    discriminator: Discriminator
    log: list[LossRecord] = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    real_confidence: list[float] = field(default_factory=list)  # per-epoch mean D(real)

    def epoch_losses(self, head: str) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for r in self.log:
            by_epoch.setdefault(r.epoch, []).append(getattr(r, head))
        return [float(np.mean(v)) for _, v in sorted(by_epoch.items())]


def write_loss_log(records: Sequence[LossRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "batch", "d_loss", "g_loss", "v_estimate"])
        for r in records:
            writer.writerow([r.epoch, r.batch, repr(r.d_loss), repr(r.g_loss), repr(r.v_estimate)])


def make_optimizer(module: nn.Module, config: GanTrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(module.parameters(), lr=config.learning_rate, betas=tuple(config.optimizer_moments))


def discriminator_step(d: Discriminator, optimizer: torch.optim.Optimizer, real: torch.Tensor, fake: torch.Tensor):
    """One discriminator update; returns (loss, d_real, d_fake) before the step."""
    optimizer.zero_grad(set_to_none=True)
    d_real = d(real)
    d_fake = d(fake.detach())
    loss = discriminator_loss(d_real, d_fake)
    loss.backward()
    optimizer.step()
    return loss.detach(), d_real.detach(), d_fake.detach()


def build_networks(config: GanTrainConfig, target_size: tuple[int, int] | None = None):
    if config.mode == "latent":
        g_factory = lambda: Generator(GeneratorConfig(config.noise_dim, config.image_size, 3, tuple(config.generator_channels)))
        d_size: int | tuple[int, int] = config.image_size
    else:
        d_size = target_size or (config.image_size, config.image_size)
        g_factory = lambda: ConditionalGenerator(ConditionalGeneratorConfig(d_size, 3, tuple(config.conditional_channels)))
    g = seeded_build(g_factory, config.seed)
    d = seeded_build(lambda: Discriminator(DiscriminatorConfig(d_size, 3, tuple(config.discriminator_channels))), config.seed + 1)
    return g, d


def _as_tensor(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images.float()
    return to_batch(list(images))


def train_gan(
    config: GanTrainConfig,
    dataset,
    paired_targets=None,
    generator: nn.Module | None = None,
    discriminator: Discriminator | None = None,
    checkpoint_dir: str | Path | None = None,
    log_path: str | Path | None = None,
    on_epoch_end: Callable[[int, nn.Module, Discriminator], None] | None = None,
) -> GanTrainResult:
    """Alternate one discriminator step and one generator step per batch.

    ``dataset`` holds the real images (latent mode) or the low-quality inputs
    (conditional mode, paired 1:1 with ``paired_targets``). Images may be a
    list of HWC arrays or an NCHW tensor. Runs are bit-reproducible for a
    fixed seed on a fixed torch build and thread count.
    """
    config.validate()
    data = _as_tensor(dataset)
    if data.shape[0] == 0:
        raise ValueError("empty dataset")
    if config.mode == "conditional":
        if paired_targets is None:
            raise ValueError("conditional training needs paired_targets")
        targets = _as_tensor(paired_targets)
        if targets.shape[0] != data.shape[0]:
            raise ShapeError(f"{data.shape[0]} inputs but {targets.shape[0]} targets")
        target_size = tuple(targets.shape[-2:])
    else:
        targets, target_size = None, None

    if generator is None or discriminator is None:
        g0, d0 = build_networks(config, target_size)
        generator = generator or g0
        discriminator = discriminator or d0
    g_opt = make_optimizer(generator, config)
    d_opt = make_optimizer(discriminator, config)
    noise_gen = torch.Generator().manual_seed(config.seed + 2)

    result = GanTrainResult(generator, discriminator)
    n = data.shape[0]
    for epoch in range(config.epochs):
        generator.train()
        discriminator.train()
        real_conf = []
        for b, idx in enumerate(batch_indices(n, config.batch_size, config.seed, epoch)):
            idx_t = torch.from_numpy(idx)
            if config.mode == "latent":
                real = data[idx_t]
                z = sample_noise(len(idx), config.noise_dim, noise_gen, config.noise_distribution)
                fake = generator(z)
            else:
                real = targets[idx_t]
                fake = generator(data[idx_t])

            try:
                d_loss, d_real, d_fake = discriminator_step(discriminator, d_opt, real, fake)
                g_opt.zero_grad(set_to_none=True)
                d_fake_g = discriminator(fake)
                if config.mode == "latent":
                    g_loss = generator_loss(d_fake_g, config.generator_loss_variant)
                else:
                    g_loss = enhancement_loss(fake, real, d_fake_g, config.reconstruction_weight,
                                              config.adversarial_weight)
            except NumericalError as exc:
                raise NumericalError(f"non-finite values at epoch {epoch} batch {b}: {exc}") from exc
            g_loss.backward()
            g_opt.step()

            if not (math.isfinite(d_loss.item()) and math.isfinite(g_loss.item())):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch} batch {b}: d_loss={d_loss.item()}, g_loss={g_loss.item()}"
                )
            result.log.append(
                LossRecord(epoch, b, d_loss.item(), g_loss.item(), gan_value(d_real, d_fake).item())
            )
            real_conf.append(d_real.mean().item())
        result.real_confidence.append(float(np.mean(real_conf)))
        log.info("epoch %d: d_loss %.4f g_loss %.4f", epoch, result.log[-1].d_loss, result.log[-1].g_loss)

        if checkpoint_dir is not None:
            from .checkpoint import save_checkpoint

            epoch_dir = Path(checkpoint_dir) / f"epoch_{epoch + 1:03d}"
            save_checkpoint(generator, epoch_dir / "generator")
            save_checkpoint(discriminator, epoch_dir / "discriminator")
            result.checkpoints.append(epoch_dir)
        else:
            result.checkpoints.append(
                {"generator": {k: v.clone() for k, v in generator.state_dict().items()},
                 "discriminator": {k: v.clone() for k, v in discriminator.state_dict().items()}}
            )
        if on_epoch_end is not None:
            on_epoch_end(epoch, generator, discriminator)

    if log_path is not None:
        write_loss_log(result.log, log_path)
    return result


def config_dict(config) -> dict:
    out = asdict(config)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}
