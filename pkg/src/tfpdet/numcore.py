"""Dense float64 tensors with reverse-mode automatic differentiation.

A fresh computation graph is built on every forward pass: each operation
returns a new ``Tensor`` wired to its inputs through a backward closure,
and ``backward()`` walks the graph in reverse topological order,
accumulating gradients into every tensor on a path to a gradient-requiring
leaf.  Only the operations the detection heads actually need are provided;
everything runs on contiguous float64 numpy arrays for exact, deterministic
arithmetic at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    ``grad`` is allocated at construction for gradient-requiring leaves and
    lazily during ``backward()`` for interior nodes; when present it always
    has the same shape as ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._backward = _backward
        self.grad = np.zeros_like(self.data) if (self.requires_grad and not _parents) else None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


@dataclass(eq=False)
class Parameter:
    """A named, trainable tensor with its initialization recipe.

    ``init_spec`` is either ``("gaussian", mean, stddev)`` or
    ``("constant", value)`` and is applied exactly once at creation.
    ``velocity`` is the SGD momentum buffer (same shape as the values).
    """

    name: str
    tensor: Tensor
    init_spec: tuple
    velocity: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.velocity is None:
            self.velocity = np.zeros_like(self.tensor.data)

    @classmethod
    def create(cls, name: str, shape, init_spec: tuple, rng: np.random.Generator) -> "Parameter":
        kind = init_spec[0]
        if kind == "gaussian":
            _, mean, std = init_spec
            data = rng.normal(mean, std, size=shape)
        elif kind == "constant":
            data = np.full(shape, float(init_spec[1]))
        else:
            raise ConfigError(f"unknown init spec {init_spec!r}")
        return cls(name=name, tensor=Tensor(data, requires_grad=True), init_spec=init_spec)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data


@dataclass(frozen=True)
class SgdConfig:
    """SGD with momentum, weight decay and a stepped learning-rate decay."""

    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 1000

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0,1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if self.lr_decay_factor <= 0:
            raise ConfigError(f"lr_decay_factor must be positive, got {self.lr_decay_factor}")
        if self.lr_decay_every < 1:
            raise ConfigError(f"lr_decay_every must be >= 1, got {self.lr_decay_every}")

    def effective_lr(self, step: int) -> float:
        return self.learning_rate * self.lr_decay_factor ** (step // self.lr_decay_every)


def _t(x) -> Tensor:
    """Unwrap parameters / wrap raw arrays so ops accept all three."""
    if isinstance(x, Parameter):
        return x.tensor
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; fills ``grad`` along the graph."""
    if loss.data.size != 1:
        raise ContractError(f"backward() requires a scalar, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# differentiable operations


def linear(x, w, b) -> Tensor:
    """Affine map ``y = x @ w + b`` over a batch of row vectors."""
    xt, wt, bt = _t(x), _t(w), _t(b)
    if xt.data.ndim != 2 or wt.data.ndim != 2 or bt.data.ndim != 1:
        raise ContractError(
            f"linear expects 2-D x, 2-D w, 1-D b; got {xt.shape}, {wt.shape}, {bt.shape}"
        )
    if xt.shape[1] != wt.shape[0] or wt.shape[1] != bt.shape[0]:
        raise ContractError(f"linear shape mismatch: x {xt.shape} vs w {wt.shape}, b {bt.shape}")
    y = xt.data @ wt.data + bt.data
    req = xt.requires_grad or wt.requires_grad or bt.requires_grad

    def back(g):
        _accumulate(xt, g @ wt.data.T)
        _accumulate(wt, xt.data.T @ g)
        _accumulate(bt, g.sum(axis=0))

    return Tensor(y, req, (xt, wt, bt), back if req else None)


def temporal_conv(x, w, b, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D cross-correlation along the temporal axis of a [C_in, T] map.

    ``w`` has shape [C_out, C_in, k]; the output length is
    floor((T + 2*padding - k) / stride) + 1.
    """
    xt, wt, bt = _t(x), _t(w), _t(b)
    if xt.data.ndim != 2 or wt.data.ndim != 3 or bt.data.ndim != 1:
        raise ContractError(
            f"temporal_conv expects [C,T] x, [Co,Ci,k] w, [Co] b; got {xt.shape}, {wt.shape}, {bt.shape}"
        )
    c_out, c_in, k = wt.shape
    if xt.shape[0] != c_in or bt.shape[0] != c_out:
        raise ContractError(f"temporal_conv shape mismatch: x {xt.shape} vs w {wt.shape}")
    if stride < 1 or padding < 0:
        raise ContractError(f"temporal_conv needs stride >= 1, padding >= 0; got {stride}, {padding}")
    t_in = xt.shape[1]
    t_out = (t_in + 2 * padding - k) // stride + 1
    if t_in + 2 * padding < k or t_out < 1:
        raise ContractError(
            f"temporal_conv empty output: T={t_in}, k={k}, stride={stride}, padding={padding}"
        )
    if padding:
        xp = np.zeros((c_in, t_in + 2 * padding))
        xp[:, padding : padding + t_in] = xt.data
    else:
        xp = xt.data
    cols = np.empty((c_in, k, t_out))
    for j in range(k):
        cols[:, j, :] = xp[:, j : j + stride * t_out : stride]
    w2 = wt.data.reshape(c_out, c_in * k)
    y = w2 @ cols.reshape(c_in * k, t_out) + bt.data[:, None]
    req = xt.requires_grad or wt.requires_grad or bt.requires_grad

    def back(g):
        _accumulate(wt, (g @ cols.reshape(c_in * k, t_out).T).reshape(wt.shape))
        _accumulate(bt, g.sum(axis=1))
        if xt.requires_grad:
            gk = (w2.T @ g).reshape(c_in, k, t_out)
            gxp = np.zeros((c_in, t_in + 2 * padding))
            for j in range(k):
                gxp[:, j : j + stride * t_out : stride] += gk[:, j, :]
            _accumulate(xt, gxp[:, padding : padding + t_in] if padding else gxp)

    return Tensor(y, req, (xt, wt, bt), back if req else None)


def temporal_maxpool(x, k: int, stride: int) -> Tensor:
    """Windowed maximum per channel; ties route gradient to the first index."""
    xt = _t(x)
    if xt.data.ndim != 2:
        raise ContractError(f"temporal_maxpool expects [C,T], got {xt.shape}")
    c, t_in = xt.shape
    if t_in < k:
        raise ContractError(f"temporal_maxpool empty output: T={t_in} < k={k}")
    t_out = (t_in - k) // stride + 1
    starts = np.arange(t_out) * stride
    win = xt.data[:, starts[:, None] + np.arange(k)[None, :]]  # (C, T', k)
    arg = win.argmax(axis=2)  # first maximal index per window
    y = np.take_along_axis(win, arg[:, :, None], axis=2)[:, :, 0]
    src = starts[None, :] + arg  # (C, T') source column per output cell
    req = xt.requires_grad

    def back(g):
        gx = np.zeros_like(xt.data)
        np.add.at(gx, (np.repeat(np.arange(c), t_out), src.ravel()), g.ravel())
        _accumulate(xt, gx)

    return Tensor(y, req, (xt,), back if req else None)


def relu(x) -> Tensor:
    xt = _t(x)
    y = np.maximum(xt.data, 0.0)
    req = xt.requires_grad

    def back(g):
        _accumulate(xt, g * (xt.data > 0.0))

    return Tensor(y, req, (xt,), back if req else None)


def concat_channels(a, b) -> Tensor:
    """Stack two [C, T] maps along the channel axis."""
    at, bt = _t(a), _t(b)
    if at.data.ndim != 2 or bt.data.ndim != 2 or at.shape[1] != bt.shape[1]:
        raise ContractError(f"concat_channels needs equal T: got {at.shape} and {bt.shape}")
    y = np.concatenate([at.data, bt.data], axis=0)
    c1 = at.shape[0]
    req = at.requires_grad or bt.requires_grad

    def back(g):
        _accumulate(at, g[:c1])
        _accumulate(bt, g[c1:])

    return Tensor(y, req, (at, bt), back if req else None)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean of -log softmax(logits)[label], stabilized by max subtraction."""
    lt = _t(logits)
    if lt.data.ndim != 2:
        raise ContractError(f"softmax_cross_entropy expects [N,C] logits, got {lt.shape}")
    lab = np.asarray(labels, dtype=np.int64)
    n, c = lt.shape
    if lab.shape != (n,):
        raise ContractError(f"labels shape {lab.shape} does not match batch {n}")
    if lab.size and (lab.min() < 0 or lab.max() >= c):
        raise IndexError(f"label out of range [0,{c}): {lab[(lab < 0) | (lab >= c)][0]}")
    z = lt.data - lt.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    lse = np.log(ez.sum(axis=1))
    losses = lse - z[np.arange(n), lab]
    y = losses.mean()
    req = lt.requires_grad

    def back(g):
        p = ez / ez.sum(axis=1, keepdims=True)
        p[np.arange(n), lab] -= 1.0
        _accumulate(lt, (float(g) / n) * p)

    return Tensor(y, req, (lt,), back if req else None)


def smooth_l1(pred, target) -> Tensor:
    """Mean elementwise smooth-L1: 0.5*d^2 for |d| < 1, else |d| - 0.5."""
    pt, tt = _t(pred), _t(target)
    if pt.shape != tt.shape:
        raise ContractError(f"smooth_l1 shape mismatch: {pt.shape} vs {tt.shape}")
    d = pt.data - tt.data
    ad = np.abs(d)
    quad = ad < 1.0
    y = np.where(quad, 0.5 * d * d, ad - 0.5).mean()
    req = pt.requires_grad or tt.requires_grad

    def back(g):
        df = np.where(quad, d, np.sign(d)) * (float(g) / d.size)
        _accumulate(pt, df)
        _accumulate(tt, -df)

    return Tensor(y, req, (pt, tt), back if req else None)


def add(a, b) -> Tensor:
    at, bt = _t(a), _t(b)
    if at.shape != bt.shape:
        raise ContractError(f"add shape mismatch: {at.shape} vs {bt.shape}")
    req = at.requires_grad or bt.requires_grad

    def back(g):
        _accumulate(at, g)
        _accumulate(bt, g)

    return Tensor(at.data + bt.data, req, (at, bt), back if req else None)


def scale(x, c: float) -> Tensor:
    xt = _t(x)
    c = float(c)
    req = xt.requires_grad

    def back(g):
        _accumulate(xt, g * c)

    return Tensor(xt.data * c, req, (xt,), back if req else None)


def take(x, flat_indices) -> Tensor:
    """Gather by flattened (row-major) indices; gradient scatter-adds back."""
    xt = _t(x)
    idx = np.asarray(flat_indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= xt.data.size):
        raise ContractError(f"take index out of range for size {xt.data.size}")
    y = xt.data.reshape(-1)[idx]
    req = xt.requires_grad

    def back(g):
        gx = np.zeros(xt.data.size)
        np.add.at(gx, idx.ravel(), np.asarray(g).ravel())
        _accumulate(xt, gx.reshape(xt.data.shape))

    return Tensor(y, req, (xt,), back if req else None)


def reshape(x, shape) -> Tensor:
    xt = _t(x)
    y = xt.data.reshape(shape)
    req = xt.requires_grad

    def back(g):
        _accumulate(xt, np.asarray(g).reshape(xt.data.shape))

    return Tensor(y, req, (xt,), back if req else None)


def stack_rows(rows) -> Tensor:
    """Stack 1-D tensors into a [N, L] matrix (batched classifier input)."""
    ts = [_t(r) for r in rows]
    if not ts:
        raise ContractError("stack_rows needs at least one row")
    length = ts[0].data.shape
    if any(t.data.ndim != 1 or t.data.shape != length for t in ts):
        raise ContractError("stack_rows requires equal-length 1-D rows")
    y = np.stack([t.data for t in ts])
    req = any(t.requires_grad for t in ts)

    def back(g):
        for i, t in enumerate(ts):
            _accumulate(t, g[i])

    return Tensor(y, req, tuple(ts), back if req else None)


def sgd_step(params, cfg: SgdConfig, step: int) -> None:
    """One momentum-SGD update over ``params``; gradients are zeroed after.

    v <- momentum*v + grad + weight_decay*param;  param <- param - lr(step)*v
    """
    lr = cfg.effective_lr(step)
    for p in params:
        v = p.velocity
        v *= cfg.momentum
        if p.tensor.grad is not None:
            v += p.tensor.grad
        if cfg.weight_decay:
            v += cfg.weight_decay * p.tensor.data
        p.tensor.data -= lr * v
        p.tensor.grad = np.zeros_like(p.tensor.data)
