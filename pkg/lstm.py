"""
Two-layer LSTM that refines per-antenna phase sequences

Each time step sees two features (cGAN phase, 1-bit phase). Layer 1 has 10
tanh units, layer 2 one linear unit; both return full sequences. The layer
forward/backward is written out per time step and registered as a single
op on the autodiff tape.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import expit

import nn_substrate as nn
from errors import NumericalError

logger = logging.getLogger(__name__)

GATES = ("i", "f", "g", "o")
HISTORY_COLUMNS = ["epoch", "train_loss", "val_loss"]


def _act(name: str):
    """(activation, derivative expressed through the activation's output)"""
    if name == "tanh":
        return np.tanh, lambda y: 1 - y * y
    if name == "sigmoid":
        return expit, lambda y: y * (1 - y)
    if name == "linear":
        return (lambda z: z), (lambda y: np.ones_like(y))
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class LstmTrainConfig:
    epochs: int = 50
    lr: float = 2e-4
    batch_size: int = 32
    truncation: int = 0   # 0 = full sequence
    loss: str = "mse"     # 'mse' or 'circular'
    candidate_activation: str = "layer"   # 'layer' follows each layer's activation; 'sigmoid' is the literal form
    seed: int = 0
    init_std: float = 0.2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    units: Tuple[int, int] = (10, 1)
    activations: Tuple[str, str] = ("tanh", "linear")

    def validate(self) -> List[str]:
        issues = []
        if self.epochs < 0:
            issues.append("lstm.epochs must be >= 0")
        if self.lr <= 0:
            issues.append("lstm.lr must be positive")
        if self.batch_size < 1:
            issues.append("lstm.batch_size must be >= 1")
        if self.truncation < 0:
            issues.append("lstm.truncation must be >= 0")
        if self.loss not in ("mse", "circular"):
            issues.append("lstm.loss must be 'mse' or 'circular'")
        if self.candidate_activation not in ("layer", "tanh", "sigmoid"):
            issues.append("lstm.candidate_activation must be 'layer', 'tanh' or 'sigmoid'")
        if len(self.units) != len(self.activations):
            issues.append("lstm.units and lstm.activations must have equal length")
        return issues


@dataclass
class LstmLayerParams:
    """W [4u x f], R [4u x u], b [4u]; gate blocks ordered i, f, g, o"""
    W: nn.Tensor
    R: nn.Tensor
    b: nn.Tensor
    activation: str = "tanh"
    candidate: Optional[str] = None

    def __post_init__(self):
        u4 = self.W.shape[0]
        if u4 % 4 or self.R.shape != (u4, u4 // 4) or self.b.shape != (u4,):
            raise ValueError(f"inconsistent LSTM shapes W{self.W.shape} R{self.R.shape} b{self.b.shape}")

    @property
    def units(self) -> int:
        return self.R.shape[1]

    @property
    def features(self) -> int:
        return self.W.shape[1]

    @property
    def candidate_activation(self) -> str:
        return self.candidate or self.activation

    @property
    def num_params(self) -> int:
        return 4 * self.units * (self.features + self.units + 1)

    def parameters(self) -> Dict[str, nn.Tensor]:
        return {"W": self.W, "R": self.R, "b": self.b}

    @classmethod
    def initialize(cls, units: int, features: int, rng: np.random.Generator, std: float = 0.2,
                   activation: str = "tanh", candidate: Optional[str] = None, dtype=np.float32) -> "LstmLayerParams":
        W = nn.init_normal((4 * units, features), std=std, rng=rng, dtype=dtype)
        R = nn.init_normal((4 * units, units), std=std, rng=rng, dtype=dtype)
        b = nn.Tensor(np.zeros(4 * units, dtype=dtype), requires_grad=True)
        return cls(W, R, b, activation, candidate)


def lstm_cell_step(x_t: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray,
                   params: LstmLayerParams) -> Tuple[np.ndarray, np.ndarray]:
    """One step for a [B, f] input; returns (h_t, c_t)"""
    u = params.units
    z = x_t @ params.W.values.T + h_prev @ params.R.values.T + params.b.values
    cand, _ = _act(params.candidate_activation)
    squash, _ = _act(params.activation)
    i, f, o = expit(z[..., :u]), expit(z[..., u:2 * u]), expit(z[..., 3 * u:])
    g = cand(z[..., 2 * u:3 * u])
    c = f * c_prev + i * g
    return o * squash(c), c


def _layer_op(x: nn.Tensor, params: LstmLayerParams, h0: np.ndarray, c0: np.ndarray):
    """Unrolled layer over [B, T, f]; state enters as a constant (truncation point)"""
    xv, Wv, Rv, bv = x.values, params.W.values, params.R.values, params.b.values
    B, T, _ = xv.shape
    u = params.units
    cand, cand_grad = _act(params.candidate_activation)
    squash, squash_grad = _act(params.activation)

    H = np.zeros((B, T, u), dtype=xv.dtype)
    C = np.zeros((B, T, u), dtype=xv.dtype)
    gates = np.zeros((B, T, 4 * u), dtype=xv.dtype)
    S = np.zeros((B, T, u), dtype=xv.dtype)
    h, c = h0, c0
    for t in range(T):
        z = xv[:, t] @ Wv.T + h @ Rv.T + bv
        a = np.empty_like(z)
        a[:, :2 * u] = expit(z[:, :2 * u])
        a[:, 2 * u:3 * u] = cand(z[:, 2 * u:3 * u])
        a[:, 3 * u:] = expit(z[:, 3 * u:])
        c = a[:, u:2 * u] * c + a[:, :u] * a[:, 2 * u:3 * u]
        s = squash(c)
        h = a[:, 3 * u:] * s
        gates[:, t], C[:, t], S[:, t], H[:, t] = a, c, s, h

    def backward(gH):
        gx = np.zeros_like(xv)
        gW, gR, gb = np.zeros_like(Wv), np.zeros_like(Rv), np.zeros_like(bv)
        dh_next = np.zeros((B, u), dtype=xv.dtype)
        dc_next = np.zeros((B, u), dtype=xv.dtype)
        for t in reversed(range(T)):
            a = gates[:, t]
            i, f, g, o = a[:, :u], a[:, u:2 * u], a[:, 2 * u:3 * u], a[:, 3 * u:]
            c_prev = C[:, t - 1] if t > 0 else c0
            h_prev = H[:, t - 1] if t > 0 else h0
            dh = gH[:, t] + dh_next
            dc = dc_next + dh * o * squash_grad(S[:, t])
            dz = np.concatenate([
                dc * g * i * (1 - i),
                dc * c_prev * f * (1 - f),
                dc * i * cand_grad(g),
                dh * S[:, t] * o * (1 - o),
            ], axis=1)
            gW += dz.T @ xv[:, t]
            gR += dz.T @ h_prev
            gb += dz.sum(axis=0)
            gx[:, t] = dz @ Wv
            dh_next = dz @ Rv
            dc_next = dc * f
        return gx, gW, gR, gb

    out = nn.custom_op(H, "lstm_layer", (x, params.W, params.R, params.b), backward)
    return out, H[:, -1].copy(), C[:, -1].copy()


def lstm_layer_forward(x_seq, params: LstmLayerParams, return_sequences: bool = True,
                       truncation: int = 0, state: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> nn.Tensor:
    """
    Run one layer over [K, f] or [B, K, f]. Gradients stop every `truncation`
    steps (0 keeps the full sequence).
    """
    x = nn.as_tensor(x_seq)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    B, K, f = x.shape
    if f != params.features:
        raise ValueError(f"layer expects {params.features} features, got {f}")
    if K < 1:
        raise ValueError("sequence length must be >= 1")
    zeros = np.zeros((B, params.units), dtype=x.dtype)
    h, c = state if state is not None else (zeros, zeros.copy())
    window = truncation or K
    chunks = []
    for start in range(0, K, window):
        out, h, c = _layer_op(x[:, start:start + window], params, h, c)
        chunks.append(out)
    out = chunks[0] if len(chunks) == 1 else nn.concat(chunks, axis=1)
    if not return_sequences:
        out = out[:, -1]
    return out[0] if squeeze else out


class PhaseNet:
    """Stacked LSTM layers; output [B, K] phase estimates"""

    def __init__(self, cfg: Optional[LstmTrainConfig] = None, features: int = 2,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        cfg = cfg or LstmTrainConfig()
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        candidate = None if cfg.candidate_activation == "layer" else cfg.candidate_activation
        self.cfg = cfg
        self.layers: List[LstmLayerParams] = []
        for units, activation in zip(cfg.units, cfg.activations):
            self.layers.append(LstmLayerParams.initialize(units, features, rng, cfg.init_std,
                                                          activation, candidate, dtype))
            features = units

    @property
    def num_params(self) -> int:
        return sum(layer.num_params for layer in self.layers)

    def __call__(self, inputs, truncation: Optional[int] = None) -> nn.Tensor:
        x = nn.as_tensor(inputs)
        truncation = self.cfg.truncation if truncation is None else truncation
        for layer in self.layers:
            x = lstm_layer_forward(x, layer, truncation=truncation)
        return x.reshape(x.shape[0], x.shape[1])

    def parameters(self) -> Dict[str, nn.Tensor]:
        return {f"layer{i + 1}.{name}": p for i, layer in enumerate(self.layers)
                for name, p in layer.parameters().items()}


def build_phase_net(seed: int = 0, cfg: Optional[LstmTrainConfig] = None) -> PhaseNet:
    cfg = cfg or LstmTrainConfig(seed=seed)
    return PhaseNet(cfg, rng=np.random.default_rng([seed, 0]))


def phase_loss(pred: nn.Tensor, label, kind: str = "mse") -> nn.Tensor:
    """Mean over batch and time of (pred - label)^2, or 1 - cos(pred - label)"""
    diff = nn.sub(pred, label)
    if kind == "mse":
        return nn.square(diff).mean()
    if kind == "circular":
        return nn.sub(1.0, nn.cos(diff)).mean()
    raise ValueError(f"unknown loss {kind!r}")


def evaluate_loss(net: PhaseNet, inputs: np.ndarray, labels: np.ndarray, kind: str = "mse",
                  batch_size: int = 256) -> float:
    total = 0.0
    with nn.no_grad():
        for start in range(0, len(inputs), batch_size):
            xb = inputs[start:start + batch_size]
            pred = net(xb, truncation=0)
            total += float(phase_loss(pred, labels[start:start + batch_size], kind).values) * len(xb)
    return total / max(len(inputs), 1)


@dataclass
class TrainedPhaseNet:
    net: PhaseNet
    history: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=HISTORY_COLUMNS))


def train_phase_net(inputs: np.ndarray, labels: np.ndarray, cfg: Optional[LstmTrainConfig] = None,
                    val_inputs: Optional[np.ndarray] = None, val_labels: Optional[np.ndarray] = None,
                    net: Optional[PhaseNet] = None) -> TrainedPhaseNet:
    """Adam on the phase loss over all time steps with truncated BPTT"""
    cfg = cfg or LstmTrainConfig()
    issues = cfg.validate()
    if issues:
        raise ValueError(f"invalid LSTM config: {'; '.join(issues)}")
    X = np.asarray(inputs, dtype=np.float32)
    Y = np.asarray(labels, dtype=np.float32)
    if X.ndim != 3 or Y.shape != X.shape[:2]:
        raise ValueError(f"expected inputs [N, K, f] and labels [N, K], got {X.shape} and {Y.shape}")

    net = net or build_phase_net(cfg.seed, cfg)
    params = net.parameters()
    state = nn.AdamState(cfg.lr, cfg.adam_beta1, cfg.adam_beta2)
    rng = np.random.default_rng([cfg.seed, 1])
    has_val = val_inputs is not None and len(val_inputs) > 0
    if has_val:
        Xv, Yv = np.asarray(val_inputs, dtype=np.float32), np.asarray(val_labels, dtype=np.float32)

    rows = [{"epoch": 0, "train_loss": evaluate_loss(net, X, Y, cfg.loss),
             "val_loss": evaluate_loss(net, Xv, Yv, cfg.loss) if has_val else np.nan}]
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        for idx in np.array_split(rng.permutation(len(X)), max(1, -(-len(X) // cfg.batch_size))):
            loss = phase_loss(net(X[idx]), Y[idx], cfg.loss)
            nn.zero_grads(params)
            loss.backward()
            nn.adam_step(params, state)
            value = float(loss.values)
            if not np.isfinite(value):
                raise NumericalError(f"LSTM training diverged at epoch {epoch}")
            total += value * len(idx)
        val_loss = evaluate_loss(net, Xv, Yv, cfg.loss) if has_val else np.nan
        rows.append({"epoch": epoch, "train_loss": total / len(X), "val_loss": val_loss})
        logger.info("LSTM epoch %d/%d: train=%.5f val=%.5f", epoch, cfg.epochs, total / len(X), val_loss)
    return TrainedPhaseNet(net, pd.DataFrame(rows, columns=HISTORY_COLUMNS))


def refine_phase(net: PhaseNet, I1: np.ndarray, I2: np.ndarray) -> np.ndarray:
    """Phase estimate per step; [K] in, [K] out (or batched [B, K])"""
    I1, I2 = np.asarray(I1), np.asarray(I2)
    if I1.shape != I2.shape:
        raise ValueError(f"input shapes differ: {I1.shape} vs {I2.shape}")
    single = I1.ndim == 1
    x = np.stack([np.atleast_2d(I1), np.atleast_2d(I2)], axis=-1).astype(np.float32)
    with nn.no_grad():
        phi = net(x, truncation=0).values.astype(np.float64)
    return phi[0] if single else phi


def refine_sequences(net: PhaseNet, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with nn.no_grad():
        for start in range(0, len(inputs), batch_size):
            out.append(net(np.asarray(inputs[start:start + batch_size], dtype=np.float32), truncation=0).values)
    return np.concatenate(out).astype(np.float64) if out else np.zeros(np.shape(inputs)[:2])


def save_phase_net(path: Union[str, Path], net: PhaseNet):
    nn.save_checkpoint(path, net.parameters(), {})


def load_phase_net(path: Union[str, Path], cfg: Optional[LstmTrainConfig] = None) -> PhaseNet:
    net = PhaseNet(cfg)
    nn.load_checkpoint(path, net.parameters(), {})
    return net


def history_to_csv(history: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    history.to_csv(path, index=False, float_format="%.17g")
    return path
