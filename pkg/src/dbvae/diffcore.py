"""Small reverse-mode differentiation kernel on top of numpy.

Tensors are plain ``numpy.ndarray`` objects (float32 for training, float64
for gradient checking).  Differentiable values are wrapped in :class:`Var`
nodes; every operation records a closure that maps the output gradient to
the gradients of its inputs, and :func:`backward` replays them in reverse
topological order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when tensor shapes do not fit an operation."""

    def __init__(self, message: str, dimension: str | None = None):
        super().__init__(message)
        self.dimension = dimension


class LabelError(ValueError):
    """Raised when a class label is outside ``[0, K)``."""

    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


class Var:
    """A node of the computation graph."""

    __slots__ = ("value", "grad", "parents", "backward_fn")

    def __init__(self, value, parents: Sequence["Var"] = (), backward_fn=None):
        self.value = value
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return np.shape(self.value)

    def __repr__(self) -> str:
        return f"Var(shape={self.shape}, dtype={getattr(self.value, 'dtype', type(self.value))})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x))


def backward(loss: Var) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every ancestor of ``loss``."""
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node.backward_fn(node.grad)):
            if g is None:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


# ---------------------------------------------------------------------------
# convolution kernels (raw numpy, NCHW)


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Return patches as an (N*Ho*Wo, C*kh*kw) matrix."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, padding: int,
            out_hw: tuple[int, int]) -> np.ndarray:
    """Scatter-add (N*Ho*Wo, C*kh*kw) patch rows back into an NCHW array of ``shape``."""
    n, c, h, w = shape
    ho, wo = out_hw
    cols = cols.reshape(n, ho, wo, c, kh, kw)
    padded = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            padded[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return padded[:, :, padding:padding + h, padding:padding + w]


def _check_conv_args(x_shape, k_shape, stride, padding, channel_axis):
    if len(x_shape) != 4:
        raise ShapeError(f"input must be rank 4 (N,C,H,W), got shape {x_shape}", "rank")
    if len(k_shape) != 4:
        raise ShapeError(f"kernels must be rank 4, got shape {k_shape}", "kernel_rank")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}", "stride")
    if padding < 0:
        raise ShapeError(f"padding must be >= 0, got {padding}", "padding")
    if x_shape[1] != k_shape[channel_axis]:
        raise ShapeError(
            f"input has {x_shape[1]} channels but kernels expect {k_shape[channel_axis]}",
            "channels",
        )


def conv2d(x, kernels, bias, stride: int = 1, padding: int = 0) -> Var:
    """Cross-correlation of ``x`` [N,C,H,W] with ``kernels`` [F,C,kh,kw]."""
    x, kernels, bias = as_var(x), as_var(kernels), as_var(bias)
    xs, ks = x.shape, kernels.shape
    _check_conv_args(xs, ks, stride, padding, channel_axis=1)
    f, c, kh, kw = ks
    if bias.shape != (f,):
        raise ShapeError(f"bias shape {bias.shape} does not match {f} filters", "bias")
    n, _, h, w = xs
    if h + 2 * padding < kh:
        raise ShapeError(f"padded height {h + 2 * padding} < kernel height {kh}", "height")
    if w + 2 * padding < kw:
        raise ShapeError(f"padded width {w + 2 * padding} < kernel width {kw}", "width")
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)

    cols = _im2col(x.value, kh, kw, stride, padding)
    wmat = kernels.value.reshape(f, -1)
    out = (cols @ wmat.T + bias.value).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def grad_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        dx = _col2im(g2 @ wmat, xs, kh, kw, stride, padding, (ho, wo))
        dk = (g2.T @ cols).reshape(ks)
        return dx, dk, g2.sum(axis=0)

    return Var(np.ascontiguousarray(out), (x, kernels, bias), grad_fn)


def conv_transpose2d(x, kernels, bias, stride: int = 1, padding: int = 0) -> Var:
    """Transposed convolution; ``kernels`` is [C,F,kh,kw] mapping C -> F channels.

    This is the gradient of :func:`conv2d` with respect to its input, used as
    a forward operation.  Output side is ``(H-1)*stride - 2*padding + kh``.
    """
    x, kernels, bias = as_var(x), as_var(kernels), as_var(bias)
    xs, ks = x.shape, kernels.shape
    _check_conv_args(xs, ks, stride, padding, channel_axis=0)
    c, f, kh, kw = ks
    if bias.shape != (f,):
        raise ShapeError(f"bias shape {bias.shape} does not match {f} filters", "bias")
    n, _, h, w = xs
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise ShapeError(f"transposed output would be {ho}x{wo}", "height" if ho < 1 else "width")

    wmat = kernels.value.reshape(c, -1)
    x2 = x.value.transpose(0, 2, 3, 1).reshape(-1, c)
    out = _col2im(x2 @ wmat, (n, f, ho, wo), kh, kw, stride, padding, (h, w))
    out = out + bias.value.reshape(1, f, 1, 1)

    def grad_fn(g):
        gcols = _im2col(g, kh, kw, stride, padding)
        dx = (gcols @ wmat.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        dk = (x2.T @ gcols).reshape(ks)
        return np.ascontiguousarray(dx), dk, g.sum(axis=(0, 2, 3))

    return Var(out, (x, kernels, bias), grad_fn)


# ---------------------------------------------------------------------------
# dense, activations, reshaping


def dense(x, weights, bias) -> Var:
    x, weights, bias = as_var(x), as_var(weights), as_var(bias)
    if len(x.shape) != 2 or len(weights.shape) != 2:
        raise ShapeError(f"dense expects rank-2 input and weights, got {x.shape} and {weights.shape}", "rank")
    if x.shape[1] != weights.shape[0]:
        raise ShapeError(
            f"input width {x.shape[1]} does not match weight rows {weights.shape[0]}", "inner"
        )
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weights.shape[1]} units", "bias")
    xv, wv = x.value, weights.value
    out = xv @ wv + bias.value

    def grad_fn(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0)

    return Var(out, (x, weights, bias), grad_fn)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def relu(x) -> Var:
    x = as_var(x)
    mask = x.value > 0
    return Var(np.where(mask, x.value, 0).astype(x.value.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Var:
    x = as_var(x)
    s = _sigmoid(x.value)
    return Var(s, (x,), lambda g: (g * s * (1 - s),))


def activation(x, kind: str) -> Var:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def reshape(x, shape: Sequence[int]) -> Var:
    x = as_var(x)
    old = x.shape
    return Var(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def flatten(x) -> Var:
    x = as_var(x)
    return reshape(x, (x.shape[0], -1))


def softmax_cross_entropy(logits, labels) -> Var:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    logits = as_var(logits)
    z = logits.value
    if len(z.shape) != 2:
        raise ShapeError(f"logits must be [N,K], got {z.shape}", "rank")
    n, k = z.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape[0] if labels.ndim else 0} labels for {n} rows", "batch")
    bad = np.flatnonzero((labels < 0) | (labels >= k))
    if bad.size:
        i = int(bad[0])
        raise LabelError(f"label {labels[i]} at index {i} outside [0, {k})", i)
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(n)
    loss = -log_probs[rows, labels].mean()

    def grad_fn(g):
        d = np.exp(log_probs)
        d[rows, labels] -= 1
        return (d * (g / n),)

    return Var(np.asarray(loss, dtype=z.dtype), (logits,), grad_fn)


def weighted_sum(terms: Sequence[Var], weights: Sequence[float]) -> Var:
    """``sum(w * t)`` over scalar nodes."""
    terms = [as_var(t) for t in terms]
    total = terms[0].value * 0
    for t, w in zip(terms, weights):
        total = total + w * t.value
    dtype = terms[0].value.dtype
    return Var(np.asarray(total, dtype=dtype), terms,
               lambda g: tuple(np.asarray(g * w, dtype=dtype) for w in weights))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], **hyper) -> "AdamState":
        state = cls(**hyper)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        return state


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update.  Returns new parameter arrays; ``state`` is advanced."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}", name)
        if state.m[name].shape != p.shape:
            raise ShapeError(f"moment for {name} has shape {state.m[name].shape}, parameter {p.shape}", name)
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    updated = {}
    for name, p in params.items():
        g = grads[name]
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        state.m[name] = m.astype(p.dtype, copy=False)
        state.v[name] = v.astype(p.dtype, copy=False)
        upd = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        updated[name] = (p - upd).astype(p.dtype, copy=False)
    return updated, state


# ---------------------------------------------------------------------------
# layer specs and small sequential networks


LAYER_KINDS = ("conv2d", "conv_transpose2d", "dense", "relu", "sigmoid", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_size: int = 0       # channels (conv) or units (dense)
    out_size: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        """Static shape algebra (batch dimension excluded)."""
        k = self.kind
        if k in ("relu", "sigmoid"):
            return shape
        if k == "flatten":
            return (int(np.prod(shape)),)
        if k == "dense":
            if len(shape) != 1 or shape[0] != self.in_size:
                raise ShapeError(f"dense expects ({self.in_size},), got {shape}", "units")
            return (self.out_size,)
        if len(shape) != 3 or shape[0] != self.in_size:
            raise ShapeError(f"{k} expects {self.in_size} input channels, got {shape}", "channels")
        _, h, w = shape
        if k == "conv2d":
            if h + 2 * self.padding < self.kernel or w + 2 * self.padding < self.kernel:
                raise ShapeError(f"conv2d kernel {self.kernel} larger than padded input {shape}", "height")
            return (self.out_size, _conv_out(h, self.kernel, self.stride, self.padding),
                    _conv_out(w, self.kernel, self.stride, self.padding))
        ho = (h - 1) * self.stride - 2 * self.padding + self.kernel
        wo = (w - 1) * self.stride - 2 * self.padding + self.kernel
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv_transpose2d yields empty output from {shape}", "height")
        return (self.out_size, ho, wo)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        k = self.kernel
        if self.kind == "conv2d":
            return {"w": (self.out_size, self.in_size, k, k), "b": (self.out_size,)}
        if self.kind == "conv_transpose2d":
            return {"w": (self.in_size, self.out_size, k, k), "b": (self.out_size,)}
        if self.kind == "dense":
            return {"w": (self.in_size, self.out_size), "b": (self.out_size,)}
        return {}

    def apply(self, x: Var, params: Mapping[str, Var]) -> Var:
        if self.kind == "conv2d":
            return conv2d(x, params["w"], params["b"], self.stride, self.padding)
        if self.kind == "conv_transpose2d":
            return conv_transpose2d(x, params["w"], params["b"], self.stride, self.padding)
        if self.kind == "dense":
            return dense(x, params["w"], params["b"])
        if self.kind == "flatten":
            return flatten(x)
        return activation(x, self.kind)


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], dtype=np.float32) -> np.ndarray:
    if len(shape) == 2:
        fan_in, fan_out = shape
    else:
        receptive = shape[2] * shape[3]
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_layer_params(specs: Sequence[LayerSpec], rng: np.random.Generator, prefix: str = "",
                      dtype=np.float32) -> dict[str, np.ndarray]:
    params = {}
    for i, spec in enumerate(specs):
        for pname, shape in spec.param_shapes().items():
            key = f"{prefix}{i}.{pname}"
            params[key] = (glorot_uniform(rng, shape, dtype) if pname == "w"
                           else np.zeros(shape, dtype=dtype))
    return params


class Sequential:
    """A chain of layer specs whose shapes are validated at construction."""

    def __init__(self, specs: Sequence[LayerSpec], input_shape: tuple[int, ...], prefix: str = ""):
        self.specs = tuple(specs)
        self.prefix = prefix
        self.input_shape = tuple(input_shape)
        shapes = [self.input_shape]
        for spec in self.specs:
            shapes.append(spec.output_shape(shapes[-1]))
        self.shapes = shapes

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]

    def init_params(self, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
        return init_layer_params(self.specs, rng, self.prefix, dtype)

    def __call__(self, x: Var, params: Mapping[str, Var]) -> Var:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"expected input shape (N, {self.input_shape}), got {x.shape}", "input")
        for i, spec in enumerate(self.specs):
            local = {p: params[f"{self.prefix}{i}.{p}"] for p in spec.param_shapes()}
            x = spec.apply(x, local)
        return x


# ---------------------------------------------------------------------------
# finite-difference verification


def check_gradients(loss_fn: Callable[[Mapping[str, Var]], Var], params: Mapping[str, np.ndarray],
                    h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` maps a dict of parameter nodes to a scalar node.  Every entry of
    every parameter is perturbed, so keep the parameter count small.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    nodes = {k: Var(v) for k, v in params.items()}
    loss = loss_fn(nodes)
    backward(loss)
    worst = 0.0
    for name, value in params.items():
        analytic = nodes[name].grad
        if analytic is None:
            analytic = np.zeros_like(value)
        flat = value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn({k: Var(v) for k, v in params.items()}).value)
            flat[i] = orig - h
            down = float(loss_fn({k: Var(v) for k, v in params.items()}).value)
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst


def gradient_check(network: Sequence[LayerSpec], x: np.ndarray, loss: str = "quadratic",
                   labels: Iterable[int] | None = None, seed: int = 0, h: float = 1e-5) -> float:
    """Build ``network`` in float64 with random weights and finite-difference check it.

    ``loss`` is ``"quadratic"`` (half the sum of squared outputs) or
    ``"cross_entropy"`` (needs ``labels``).
    """
    x = np.asarray(x, dtype=np.float64)
    net = Sequential(network, x.shape[1:])
    rng = np.random.default_rng(seed)
    params = {k: v + rng.normal(0, 0.1, v.shape) if k.endswith(".b") else v
              for k, v in net.init_params(rng, np.float64).items()}
    params["input"] = x
    if loss == "cross_entropy":
        if labels is None:
            raise ValueError("cross_entropy gradient check needs labels")
        labels = np.asarray(list(labels))
    elif loss != "quadratic":
        raise ValueError(f"unknown loss selector {loss!r}")

    def loss_fn(p):
        out = net(p["input"], p)
        if loss == "cross_entropy":
            return softmax_cross_entropy(out, labels)
        v = out.value
        return Var(np.asarray(0.5 * np.sum(v * v)), (out,), lambda g: (g * v,))

    return check_gradients(loss_fn, params, h)
