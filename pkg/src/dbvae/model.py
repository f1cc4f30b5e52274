"""Standard CNN classifier and debiasing VAE sharing one convolutional encoder."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .diffcore import (
    AdamState,
    LayerSpec,
    Sequential,
    ShapeError,
    Var,
    adam_step,
    as_var,
    backward,
    reshape,
    softmax_cross_entropy,
    weighted_sum,
)

MODES = ("cnn", "dbvae")


@dataclass(frozen=True)
class LossWeights:
    classification_weight: float = 1.0
    vae_weight: float = 1.0
    kl_weight: float = 5e-4
    reconstruction_weight: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"{name} must be >= 0, got {value}")


@dataclass(frozen=True)
class ModelConfig:
    image_side: int = 64
    channels: int = 1
    num_categories: int = 8
    latent_dim: int = 32
    filters: tuple[int, ...] = (32, 64, 128, 256)
    dense_width: int = 512
    loss_weights: LossWeights = field(default_factory=LossWeights)
    mode: str = "dbvae"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.num_categories < 2:
            raise ValueError("num_categories must be >= 2")
        if self.channels != 1:
            raise ValueError("only single-channel images are supported")
        if not self.filters:
            raise ValueError("at least one conv block is required")
        if self.image_side % (2 ** len(self.filters)):
            raise ValueError(
                f"image_side {self.image_side} not divisible by 2^{len(self.filters)}"
            )
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))

    @property
    def effective_vae_weight(self) -> float:
        return 0.0 if self.mode == "cnn" else self.loss_weights.vae_weight

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filters"] = list(self.filters)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        d["loss_weights"] = LossWeights(**d.get("loss_weights", {}))
        d["filters"] = tuple(d.get("filters", cls.filters))
        return cls(**d)


@dataclass
class LatentStats:
    mu: Var
    logvar: Var


class Model:
    """Network definitions; parameters live outside in a flat name -> array dict."""

    def __init__(self, config: ModelConfig):
        self.config = config
        c = config
        trunk: list[LayerSpec] = []
        prev = c.channels
        for f in c.filters:
            trunk += [LayerSpec("conv2d", prev, f, kernel=3, stride=2, padding=1), LayerSpec("relu")]
            prev = f
        self.bottleneck = c.image_side // 2 ** len(c.filters)
        feat = prev * self.bottleneck ** 2
        trunk += [LayerSpec("flatten"), LayerSpec("dense", feat, c.dense_width), LayerSpec("relu")]
        self.trunk = Sequential(trunk, (c.channels, c.image_side, c.image_side), "trunk.")
        width = (c.dense_width,)
        self.logits_head = Sequential([LayerSpec("dense", c.dense_width, c.num_categories)], width, "logits.")
        self.mu_head = Sequential([LayerSpec("dense", c.dense_width, c.latent_dim)], width, "mu.")
        self.logvar_head = Sequential([LayerSpec("dense", c.dense_width, c.latent_dim)], width, "logvar.")

        self.decoder_in = Sequential(
            [LayerSpec("dense", c.latent_dim, feat), LayerSpec("relu")], (c.latent_dim,), "dec_in."
        )
        rev = list(reversed(c.filters))
        up: list[LayerSpec] = []
        for cin, cout in zip(rev, rev[1:] + [c.channels]):
            up += [LayerSpec("conv_transpose2d", cin, cout, kernel=4, stride=2, padding=1), LayerSpec("relu")]
        up[-1] = LayerSpec("sigmoid")
        self.decoder = Sequential(up, (rev[0], self.bottleneck, self.bottleneck), "dec.")
        if self.decoder.output_shape != (c.channels, c.image_side, c.image_side):
            raise ShapeError(f"decoder produces {self.decoder.output_shape}", "decoder")

    def init_params(self, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {}
        for net in (self.trunk, self.logits_head, self.mu_head, self.logvar_head,
                    self.decoder_in, self.decoder):
            params.update(net.init_params(rng, dtype))
        return params

    def encode(self, params: Mapping, batch) -> tuple[Var, LatentStats]:
        c = self.config
        x = as_var(batch)
        expected = (c.channels, c.image_side, c.image_side)
        if len(x.shape) != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"expected batch of shape [N,{','.join(map(str, expected))}], got {x.shape}", "input")
        p = {k: as_var(v) for k, v in params.items()}
        feat = self.trunk(x, p)
        return self.logits_head(feat, p), LatentStats(self.mu_head(feat, p), self.logvar_head(feat, p))

    def decode(self, params: Mapping, z) -> Var:
        p = {k: as_var(v) for k, v in params.items()}
        h = self.decoder_in(as_var(z), p)
        h = reshape(h, (h.shape[0],) + self.decoder.input_shape)
        return self.decoder(h, p)


def reparameterize(latent: LatentStats, epsilon: np.ndarray) -> Var:
    """z = mu + exp(logvar / 2) * epsilon."""
    mu, logvar = as_var(latent.mu), as_var(latent.logvar)
    epsilon = np.asarray(epsilon, dtype=mu.value.dtype)
    if mu.shape != logvar.shape or mu.shape != epsilon.shape:
        raise ShapeError(f"mu {mu.shape}, logvar {logvar.shape}, epsilon {epsilon.shape} disagree", "latent")
    std = np.exp(0.5 * logvar.value)
    z = mu.value + std * epsilon
    return Var(z, (mu, logvar), lambda g: (g, g * epsilon * std * 0.5))


def kl_divergence(latent: LatentStats) -> Var:
    """Batch mean of KL(N(mu, exp(logvar)) || N(0, I))."""
    mu, logvar = as_var(latent.mu), as_var(latent.logvar)
    if mu.shape != logvar.shape:
        raise ShapeError(f"mu {mu.shape} and logvar {logvar.shape} disagree", "latent")
    m, lv = mu.value, logvar.value
    n = m.shape[0]
    ev = np.exp(lv)
    kl = 0.5 * np.sum(ev + m * m - 1.0 - lv) / n

    def grad_fn(g):
        return g * m / n, g * 0.5 * (ev - 1.0) / n

    return Var(np.asarray(kl, dtype=m.dtype), (mu, logvar), grad_fn)


def reconstruction_loss(x, x_hat) -> Var:
    """Mean absolute pixel error."""
    x, x_hat = as_var(x), as_var(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeError(f"x {x.shape} and x_hat {x_hat.shape} disagree", "image")
    diff = x_hat.value - x.value
    size = diff.size
    sign = np.sign(diff)
    loss = np.abs(diff).mean()
    return Var(np.asarray(loss, dtype=diff.dtype), (x, x_hat),
               lambda g: (-g * sign / size, g * sign / size))


def total_loss(logits, labels, x, x_hat, latent: LatentStats | None,
               weights: LossWeights, mode: str = "dbvae") -> tuple[Var, dict[str, float]]:
    """classification * CE + vae * (reconstruction * MAE + kl * KL).

    In ``cnn`` mode the VAE term is dropped and ``x_hat``/``latent`` may be None.
    """
    ce = softmax_cross_entropy(logits, labels)
    breakdown = {"classification": float(ce.value)}
    if mode == "cnn":
        total = weighted_sum([ce], [weights.classification_weight])
    else:
        rec = reconstruction_loss(x, x_hat)
        kl = kl_divergence(latent)
        lam = weights.vae_weight
        total = weighted_sum(
            [ce, rec, kl],
            [weights.classification_weight, lam * weights.reconstruction_weight, lam * weights.kl_weight],
        )
        breakdown["reconstruction"] = float(rec.value)
        breakdown["kl"] = float(kl.value)
    breakdown["total"] = float(total.value)
    return total, breakdown


def forward_loss(model: Model, params: Mapping, batch, labels, epsilon=None):
    """Full forward pass; returns (total node, breakdown)."""
    cfg = model.config
    logits, latent = model.encode(params, batch)
    if cfg.mode == "cnn":
        return total_loss(logits, labels, batch, None, None, cfg.loss_weights, "cnn")
    z = reparameterize(latent, epsilon)
    x_hat = model.decode(params, z)
    weights = replace(cfg.loss_weights, vae_weight=cfg.effective_vae_weight)
    return total_loss(logits, labels, batch, x_hat, latent, weights, "dbvae")


def train_step(model: Model, params: dict[str, np.ndarray], adam: AdamState, batch: np.ndarray,
               labels, rng: np.random.Generator):
    """One forward/backward pass and Adam update.  ``rng`` supplies the latent noise."""
    cfg = model.config
    epsilon = None
    if cfg.mode == "dbvae":
        epsilon = rng.standard_normal((batch.shape[0], cfg.latent_dim)).astype(batch.dtype)
    nodes = {k: Var(v) for k, v in params.items()}
    total, breakdown = forward_loss(model, nodes, batch, labels, epsilon)
    backward(total)
    grads = {k: (n.grad if n.grad is not None else np.zeros_like(n.value)) for k, n in nodes.items()}
    params, adam = adam_step(params, grads, adam)
    return params, adam, breakdown


def logits_of(model: Model, params: Mapping, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [model.encode(params, images[i:i + batch_size])[0].value
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.config.num_categories), np.float32)


def latent_means(model: Model, params: Mapping, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [model.encode(params, images[i:i + batch_size])[1].mu.value
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out)


def predict_from_logits(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest tied index
    return np.argmax(logits, axis=1)


def predict(model: Model, params: Mapping, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return predict_from_logits(logits_of(model, params, images, batch_size))


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"DBVW"
VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray]
    adam: AdamState
    seed: int


def _pack_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def checkpoint_bytes(params: Mapping[str, np.ndarray], config: ModelConfig, adam: AdamState,
                     seed: int = 0) -> bytes:
    cfg = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    return b"".join([
        MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<I", len(cfg)), cfg,
        struct.pack("<Q", seed),
        _pack_tensors(params),
        struct.pack("<Q4d", adam.step, adam.lr, adam.beta1, adam.beta2, adam.epsilon),
        _pack_tensors(adam.m),
        _pack_tensors(adam.v),
    ])


def save_checkpoint(params: Mapping[str, np.ndarray], config: ModelConfig, adam: AdamState,
                    path, seed: int = 0) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(params, config, adam, seed))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data, self.pos, self.source = data, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"{self.source}: needed {n} bytes at offset {self.pos}, file has {len(self.data)}"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensors(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (nlen,) = self.unpack("<I")
            name = self.take(nlen).decode("utf-8")
            (rank,) = self.unpack("<I")
            shape = self.unpack(f"<{rank}I")
            size = int(np.prod(shape)) if rank else 1
            out[name] = np.frombuffer(self.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        return out


def parse_checkpoint(data: bytes, source: str = "<bytes>") -> ModelState:
    r = _Reader(data, source)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"{source}: expected magic {MAGIC!r}, found {data[:4]!r}")
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise UnsupportedVersionError(f"{source}: format version {version}, supported {VERSION}")
    (clen,) = r.unpack("<I")
    config = ModelConfig.from_dict(json.loads(r.take(clen).decode("utf-8")))
    (seed,) = r.unpack("<Q")
    params = r.tensors()
    step, lr, b1, b2, eps = r.unpack("<Q4d")
    adam = AdamState(lr=lr, beta1=b1, beta2=b2, epsilon=eps, step=step, m=r.tensors(), v=r.tensors())
    if r.pos != len(data):
        raise CheckpointError(f"{source}: {len(data) - r.pos} trailing bytes")
    return ModelState(config, params, adam, seed)


def load_checkpoint(path) -> ModelState:
    path = Path(path)
    return parse_checkpoint(path.read_bytes(), str(path))
