"""
Conditional GAN that fills in the low-resolution antenna rows

U-Net generator (7 downsample + 7 upsample blocks with skips j <-> 14-j)
and a patch discriminator judging (condition, candidate) pairs. Strides
below are (height = antenna, width = subcarrier).
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

import nn_substrate as nn
from channel_sim import ChannelKind, ChannelMatrix
from errors import NumericalError
from preprocess import StackedChannel, denormalize, normalize_scale, nse, unstack_reim

logger = logging.getLogger(__name__)

# (filters, stride, batch norm, dropout)
DOWN_BLOCKS = [
    (32, (1, 1), False, False),
    (64, (2, 2), True, False),
    (64, (2, 2), True, False),
    (64, (2, 2), True, False),
    (64, (1, 5), True, False),
    (64, (1, 5), True, False),
    (128, (1, 6), True, False),
]
UP_BLOCKS = [
    (128, (1, 6), True, True),
    (64, (1, 5), True, True),
    (64, (1, 5), True, True),
    (65, (2, 2), True, False),
    (128, (2, 2), True, False),
    (64, (2, 2), True, False),
    (32, (1, 1), True, False),
]
# (filters, stride, batch norm)
DISC_BLOCKS = [
    (64, (1, 1), False),
    (128, (1, 5), True),
    (128, (1, 5), True),
    (128, (1, 3), True),
    (128, (1, 2), True),
]
LEAKY_SLOPE = 0.3
HISTORY_COLUMNS = ["epoch", "loss_D", "loss_G", "l2_term", "val_nse"]


@dataclass
class GanTrainConfig:
    epochs: int = 150
    lr: float = 2e-4
    beta: float = 100.0
    batch_size: int = 8
    seed: int = 0
    filter_length: int = 5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    dropout_rate: float = 0.5
    init_std: float = 0.2
    generator_loss: str = "non_saturating"
    use_skips: bool = True
    block11_filters: int = 65
    inference_dropout: bool = False
    scale_factor: Optional[float] = None
    checkpoint_every: int = 0

    def validate(self) -> List[str]:
        issues = []
        if self.epochs < 0:
            issues.append("cgan.epochs must be >= 0")
        if self.lr <= 0:
            issues.append("cgan.lr must be positive")
        if self.beta < 0:
            issues.append("cgan.beta must be >= 0")
        if self.batch_size < 2:
            issues.append("cgan.batch_size must be >= 2 (batch norm statistics)")
        if self.filter_length < 1:
            issues.append("cgan.filter_length must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            issues.append("cgan.dropout_rate must be in [0, 1)")
        if self.generator_loss not in ("non_saturating", "minimax"):
            issues.append("cgan.generator_loss must be 'non_saturating' or 'minimax'")
        if self.block11_filters < 1:
            issues.append("cgan.block11_filters must be >= 1")
        return issues


def _down_block(filters, stride, bn, kernel) -> List[nn.LayerConfig]:
    layers = [nn.LayerConfig(nn.LayerKind.CONV2D, filters, kernel, stride, use_bias=not bn)]
    if bn:
        layers.append(nn.LayerConfig(nn.LayerKind.BATCH_NORM))
    layers.append(nn.LayerConfig(nn.LayerKind.LEAKY_RELU, slope=LEAKY_SLOPE))
    return layers


def _up_block(filters, stride, bn, drop, kernel, rate) -> List[nn.LayerConfig]:
    layers = [nn.LayerConfig(nn.LayerKind.CONV2D_TRANSPOSE, filters, kernel, stride, use_bias=not bn)]
    if bn:
        layers.append(nn.LayerConfig(nn.LayerKind.BATCH_NORM))
    if drop:
        layers.append(nn.LayerConfig(nn.LayerKind.DROPOUT, rate=rate))
    layers.append(nn.LayerConfig(nn.LayerKind.RELU))
    return layers


class GeneratorNet:
    """U-Net mapping [B, M, N_sub, 2] to the same shape through a [1, 1, 128] bottleneck"""

    num_blocks = 14

    def __init__(self, cfg: Optional[GanTrainConfig] = None, in_channels: int = 2, out_channels: int = 2,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        cfg = cfg or GanTrainConfig()
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.use_skips = cfg.use_skips
        k = cfg.filter_length

        self.down: List[nn.Sequential] = []
        channels = in_channels
        for filters, stride, bn, _ in DOWN_BLOCKS:
            block = nn.Sequential(_down_block(filters, stride, bn, k), channels, rng, cfg.init_std, dtype)
            self.down.append(block)
            channels = block.out_channels

        up_spec = list(UP_BLOCKS)
        up_spec[3] = (cfg.block11_filters,) + up_spec[3][1:]
        self.up: List[nn.Sequential] = []
        for j, (filters, stride, bn, drop) in enumerate(up_spec):
            if j > 0 and self.use_skips:
                channels += self.down[len(self.down) - 1 - j].out_channels
            block = nn.Sequential(_up_block(filters, stride, bn, drop, k, cfg.dropout_rate),
                                  channels, rng, cfg.init_std, dtype)
            self.up.append(block)
            channels = block.out_channels

        self.head = nn.Sequential([nn.LayerConfig(nn.LayerKind.CONV2D, out_channels, k, 1),
                                   nn.LayerConfig(nn.LayerKind.TANH)], channels, rng, cfg.init_std, dtype)
        self.set_inference_dropout(cfg.inference_dropout)

    def blocks(self) -> List[Tuple[str, nn.Sequential]]:
        named = [(f"down{i + 1}", b) for i, b in enumerate(self.down)]
        named += [(f"up{i + len(self.down) + 1}", b) for i, b in enumerate(self.up)]
        return named + [("head", self.head)]

    def set_inference_dropout(self, enabled: bool):
        for block in self.up:
            for layer in block.layers:
                if isinstance(layer, nn.DropoutLayer):
                    layer.active_at_inference = enabled

    def check_input_shape(self, in_shape: Tuple[int, int, int]):
        try:
            trace = self.shape_trace(in_shape)
        except ValueError:
            trace = [("", (-1, -1))]
        if trace[-1][1][:2] != tuple(in_shape[:2]):
            raise ValueError(f"input spatial dims {tuple(in_shape[:2])} are not divisible along the stride chain")

    def shape_trace(self, in_shape: Tuple[int, int, int]) -> List[Tuple[str, Tuple[int, ...]]]:
        """Per-block output shapes, without computing anything"""
        trace, skips = [], []
        shape = tuple(in_shape)
        for i, block in enumerate(self.down):
            shape = block.output_shape(shape)
            skips.append(shape)
            trace.append((f"down{i + 1}", shape))
        for j, block in enumerate(self.up):
            if j > 0 and self.use_skips:
                skip = skips[len(self.down) - 1 - j]
                if skip[:2] != shape[:2]:
                    raise ValueError(f"skip shape {skip} does not match decoder shape {shape}")
                shape = shape[:2] + (shape[2] + skip[2],)
            shape = block.output_shape(shape)
            trace.append((f"up{j + len(self.down) + 1}", shape))
        trace.append(("head", self.head.output_shape(shape)))
        return trace

    def __call__(self, x: nn.Tensor, training: bool = False, rng: Optional[np.random.Generator] = None) -> nn.Tensor:
        skips = []
        for block in self.down:
            x = block(x, training, rng)
            skips.append(x)
        for j, block in enumerate(self.up):
            if j > 0 and self.use_skips:
                x = nn.concat([x, skips[len(self.down) - 1 - j]], axis=-1)
            x = block(x, training, rng)
        return self.head(x, training, rng)

    def parameters(self) -> Dict[str, nn.Tensor]:
        return {f"{name}.{k}": p for name, block in self.blocks() for k, p in block.parameters().items()}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {f"{name}.{k}": b for name, block in self.blocks() for k, b in block.buffers().items()}


class DiscriminatorNet:
    """Patch discriminator: [B, M, N_sub, 4] -> [B, 4, 4, 1] logits"""

    def __init__(self, cfg: Optional[GanTrainConfig] = None, in_channels: int = 4,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        cfg = cfg or GanTrainConfig()
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        k = cfg.filter_length
        layers = []
        for filters, stride, bn in DISC_BLOCKS:
            layers += _down_block(filters, stride, bn, k)
        layers += [
            nn.LayerConfig(nn.LayerKind.ZERO_PAD2D, padding=1),
            nn.LayerConfig(nn.LayerKind.CONV2D, 256, k, 1, padding="valid", use_bias=False),
            nn.LayerConfig(nn.LayerKind.BATCH_NORM),
            nn.LayerConfig(nn.LayerKind.LEAKY_RELU, slope=LEAKY_SLOPE),
            nn.LayerConfig(nn.LayerKind.ZERO_PAD2D, padding=1),
            nn.LayerConfig(nn.LayerKind.CONV2D, 1, k, 1, padding="valid"),
        ]
        self.body = nn.Sequential(layers, in_channels, rng, cfg.init_std, dtype)

    def shape_trace(self, in_shape: Tuple[int, int, int]) -> List[Tuple[str, Tuple[int, ...]]]:
        trace, shape = [], tuple(in_shape)
        for cfg, layer in zip(self.body.configs, self.body.layers):
            shape = layer.output_shape(shape)
            trace.append((cfg.kind.value, shape))
        return trace

    def __call__(self, condition: nn.Tensor, candidate: nn.Tensor, training: bool = False) -> nn.Tensor:
        if condition.shape[:3] != candidate.shape[:3]:
            raise ValueError(f"condition {condition.shape} and candidate {candidate.shape} do not align")
        return self.body(nn.concat([condition, candidate], axis=-1), training)

    def parameters(self) -> Dict[str, nn.Tensor]:
        return self.body.parameters()

    def buffers(self) -> Dict[str, np.ndarray]:
        return self.body.buffers()

    def frozen_stats(self):
        return self.body.frozen_stats()


def build_generator(cfg: Optional[GanTrainConfig] = None, rng: Optional[np.random.Generator] = None) -> GeneratorNet:
    return GeneratorNet(cfg, rng=rng)


def build_discriminator(cfg: Optional[GanTrainConfig] = None,
                        rng: Optional[np.random.Generator] = None) -> DiscriminatorNet:
    return DiscriminatorNet(cfg, rng=rng)


@dataclass
class CganLosses:
    loss_d: nn.Tensor
    loss_g: nn.Tensor
    adversarial: nn.Tensor
    l2_term: nn.Tensor


def _patch_mean(logits: nn.Tensor) -> nn.Tensor:
    return logits.reshape(logits.shape[0], -1).mean(axis=1)


def l2_per_sample(g_out: nn.Tensor, label: nn.Tensor) -> nn.Tensor:
    diff = nn.sub(label, g_out)
    return nn.sqrt(nn.square(diff).reshape(diff.shape[0], -1).sum(axis=1))


def cgan_losses(d_real: nn.Tensor, d_fake: nn.Tensor, g_out: nn.Tensor, label: nn.Tensor,
                beta: float = 100.0, generator_loss: str = "non_saturating") -> CganLosses:
    """
    Discriminator outputs are patch logits, averaged to one scalar per sample.
    loss_D = -[log s(D_real) + log(1 - s(D_fake))]; loss_G adds beta * ||label - G||_2.
    """
    for name, t in (("d_real", d_real), ("d_fake", d_fake), ("g_out", g_out), ("label", label)):
        if not np.all(np.isfinite(nn.as_tensor(t).values)):
            raise NumericalError(f"non-finite values in {name}")
    real, fake = _patch_mean(d_real), _patch_mean(d_fake)
    loss_d = nn.neg(nn.add(nn.log_sigmoid(real), nn.log_sigmoid(nn.neg(fake)))).mean()
    loss_g, adversarial, l2_term = generator_objective(d_fake, g_out, label, beta, generator_loss)
    return CganLosses(loss_d, loss_g, adversarial, l2_term)


def generator_objective(d_fake: nn.Tensor, g_out: nn.Tensor, label: nn.Tensor, beta: float = 100.0,
                        generator_loss: str = "non_saturating") -> Tuple[nn.Tensor, nn.Tensor, nn.Tensor]:
    """(loss_G, adversarial part, L2 term)"""
    fake = _patch_mean(d_fake)
    if generator_loss == "non_saturating":
        adversarial = nn.neg(nn.log_sigmoid(fake)).mean()
    elif generator_loss == "minimax":
        adversarial = nn.log_sigmoid(nn.neg(fake)).mean()
    else:
        raise ValueError(f"unknown generator loss {generator_loss!r}")
    l2_term = l2_per_sample(g_out, label).mean()
    return nn.add(adversarial, nn.mul(l2_term, float(beta))), adversarial, l2_term


def _stack(pairs: Sequence) -> np.ndarray:
    return np.stack([p.data if isinstance(p, StackedChannel) else np.asarray(p) for p in pairs]).astype(np.float32)


def _batches(count: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    # every batch keeps at least `batch_size` samples so batch statistics stay defined
    num = max(1, count // batch_size)
    return np.array_split(rng.permutation(count), num)


def generate_normalized(generator: GeneratorNet, X: np.ndarray, batch_size: int = 8,
                        rng: Optional[np.random.Generator] = None) -> np.ndarray:
    outputs = []
    with nn.no_grad():
        for start in range(0, len(X), batch_size):
            outputs.append(generator(nn.Tensor(X[start:start + batch_size]), training=False, rng=rng).values)
    return np.concatenate(outputs) if outputs else np.zeros_like(X)


def _evaluate_generator(generator: GeneratorNet, X: np.ndarray, Y: np.ndarray,
                       batch_size: int = 8) -> Dict[str, float]:
    """Mean L2 term and mean NSE on normalized pairs (NSE is scale free)"""
    out = generate_normalized(generator, X, batch_size)
    diff = (Y - out).reshape(len(Y), -1)
    per_nse = nse(unstack_reim(Y), unstack_reim(out), axis=(1, 2))
    return {"l2_term": float(np.mean(np.linalg.norm(diff, axis=1))), "nse": float(np.mean(per_nse))}


@dataclass
class TrainedCgan:
    generator: GeneratorNet
    discriminator: DiscriminatorNet
    history: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=HISTORY_COLUMNS))


def train_cgan(inputs: Sequence, labels: Sequence, cfg: Optional[GanTrainConfig] = None,
               val_inputs: Optional[Sequence] = None, val_labels: Optional[Sequence] = None,
               checkpoint_dir: Optional[Union[str, Path]] = None) -> TrainedCgan:
    """
    Alternate one discriminator step and one generator step per batch.
    Inputs/labels are normalized [M, N_sub, 2] tensors (or StackedChannel).
    """
    cfg = cfg or GanTrainConfig()
    issues = cfg.validate()
    if issues:
        raise ValueError(f"invalid cGAN config: {'; '.join(issues)}")
    X, Y = _stack(inputs), _stack(labels)
    if X.shape != Y.shape:
        raise ValueError(f"input shape {X.shape} does not match label shape {Y.shape}")
    if len(X) < 2:
        raise ValueError("cGAN training needs at least 2 samples")

    init_rng = np.random.default_rng([cfg.seed, 0])
    train_rng = np.random.default_rng([cfg.seed, 1])
    generator = GeneratorNet(cfg, in_channels=X.shape[-1], out_channels=Y.shape[-1], rng=init_rng)
    generator.check_input_shape(X.shape[1:])
    discriminator = DiscriminatorNet(cfg, in_channels=X.shape[-1] + Y.shape[-1], rng=init_rng)
    g_params, d_params = generator.parameters(), discriminator.parameters()
    g_state = nn.AdamState(cfg.lr, cfg.adam_beta1, cfg.adam_beta2)
    d_state = nn.AdamState(cfg.lr, cfg.adam_beta1, cfg.adam_beta2)

    has_val = val_inputs is not None and len(val_inputs) > 0
    Xv, Yv = (_stack(val_inputs), _stack(val_labels)) if has_val else (None, None)
    rows = [{"epoch": 0, "loss_D": np.nan, "loss_G": np.nan, "l2_term": np.nan,
             "val_nse": _evaluate_generator(generator, Xv, Yv, cfg.batch_size)["nse"] if has_val else np.nan}]

    for epoch in range(1, cfg.epochs + 1):
        sums = np.zeros(3)
        batches = _batches(len(X), cfg.batch_size, train_rng)
        for idx in batches:
            xb, yb = nn.Tensor(X[idx]), nn.Tensor(Y[idx])
            fake = generator(xb, training=True, rng=train_rng)

            losses = cgan_losses(discriminator(xb, yb, training=True),
                                 discriminator(xb, fake.detach(), training=True),
                                 fake.detach(), yb, cfg.beta, cfg.generator_loss)
            nn.zero_grads(d_params)
            losses.loss_d.backward()
            nn.adam_step(d_params, d_state)
            loss_d = float(losses.loss_d.values)

            # running statistics follow the discriminator step only
            with discriminator.frozen_stats():
                d_fake = discriminator(xb, fake, training=True)
            loss_g, _, l2_term = generator_objective(d_fake, fake, yb, cfg.beta, cfg.generator_loss)
            nn.zero_grads(g_params)
            loss_g.backward()
            nn.adam_step(g_params, g_state)
            nn.zero_grads(d_params)

            step = np.array([loss_d, float(loss_g.values), float(l2_term.values)])
            if not np.all(np.isfinite(step)):
                raise NumericalError(f"cGAN training diverged at epoch {epoch}")
            sums += step

        means = sums / len(batches)
        val_nse = _evaluate_generator(generator, Xv, Yv, cfg.batch_size)["nse"] if has_val else np.nan
        rows.append({"epoch": epoch, "loss_D": means[0], "loss_G": means[1], "l2_term": means[2],
                     "val_nse": val_nse})
        logger.info("cGAN epoch %d/%d: loss_D=%.4f loss_G=%.4f l2=%.4f val_nse=%.4g",
                    epoch, cfg.epochs, means[0], means[1], means[2], val_nse)
        if checkpoint_dir and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_generator(Path(checkpoint_dir) / f"generator_epoch{epoch:03d}.mrce", generator)

    return TrainedCgan(generator, discriminator, pd.DataFrame(rows, columns=HISTORY_COLUMNS))


def infer(generator: GeneratorNet, H_ce: Union[ChannelMatrix, np.ndarray], scale_factor: Optional[float] = None,
          rng: Optional[np.random.Generator] = None) -> ChannelMatrix:
    return infer_batch(generator, [H_ce], scale_factor, rng=rng)[0]


def infer_batch(generator: GeneratorNet, measurements: Sequence[Union[ChannelMatrix, np.ndarray]],
                scale_factor: Optional[float] = None, batch_size: int = 8,
                rng: Optional[np.random.Generator] = None) -> List[ChannelMatrix]:
    """Normalize each zero-filled input, run the generator and undo the input's scaling"""
    if scale_factor is None:
        scale_factor = generator.cfg.scale_factor
    stacked = [normalize_scale(H, scale_factor) for H in measurements]
    if not stacked:
        return []
    X = np.stack([s.data for s in stacked]).astype(np.float32)
    out = generate_normalized(generator, X, batch_size, rng).astype(np.float64)
    return [ChannelMatrix(denormalize(StackedChannel(o, s.scale_record)), ChannelKind.GENERATED)
            for o, s in zip(out, stacked)]


def save_generator(path: Union[str, Path], generator: GeneratorNet):
    nn.save_checkpoint(path, generator.parameters(), generator.buffers())


def load_generator(path: Union[str, Path], cfg: Optional[GanTrainConfig] = None) -> GeneratorNet:
    generator = GeneratorNet(cfg)
    nn.load_checkpoint(path, generator.parameters(), generator.buffers())
    return generator


def history_to_csv(history: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    history.to_csv(path, index=False, float_format="%.17g")
    return path
