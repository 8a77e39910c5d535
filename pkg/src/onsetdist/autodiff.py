"""Minimal dense-tensor engine with reverse-mode differentiation.

Tensors wrap float64 numpy arrays and record the operations applied to
them; calling :meth:`Tensor.backward` on a scalar result walks the
recorded graph in reverse topological order and accumulates gradients
into every tensor that requires them.  The op set is exactly what the
onset models need: valid 2-D convolution, non-overlapping max pooling,
dense layers, batch normalization, inverted dropout, a handful of
activations and reductions.  No general broadcasting, no GPU.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A node in the computation graph.

    ``data`` is always a C-contiguous float64 array; ``grad`` is either
    None or an array of identical shape.  Leaf tensors created with
    ``requires_grad=True`` are trainable parameters.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Backpropagate from a scalar; populates ``grad`` on the graph."""
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        if self._backward_fn is None and not self._parents:
            raise RuntimeError("backward called on a leaf with no recorded forward pass")
        topo = []
        seen = set()
        stack = [(self, False)]
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
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def assert_finite(self, what="tensor"):
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in {what}")
        return self


def _node(data, parents, backward_fn):
    """Build an op-result tensor; graph edges only if recording is on."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(inputs, out_data, grad_fns):
    """Generic op: ``grad_fns[i](g)`` returns the gradient for inputs[i]."""

    def backward(g):
        for t, fn in zip(inputs, grad_fns):
            if t.requires_grad and fn is not None:
                t.accumulate_grad(fn(g))

    return _node(out_data, inputs, backward)


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _node(a.data + b.data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * s)

    return _node(a.data * s, (a,), backward)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, float(g) / n))

    return _node(a.data.mean(), (a,), backward)


def tsum(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, float(g)))

    return _node(a.data.sum(), (a,), backward)


# ---------------------------------------------------------------------------
# activations


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * mask)

    return _node(np.maximum(a.data, 0.0), (a,), backward)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * (1.0 - t * t))

    return _node(t, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * s * (1.0 - s))

    return _node(s, (a,), backward)


def scaled_sigmoid(a: Tensor, gamma: float) -> Tensor:
    """gamma * sigmoid(x); bounds the output to (0, gamma)."""
    if gamma <= 0:
        raise ValueError(f"scaled_sigmoid needs gamma > 0, got {gamma}")
    s = expit(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * gamma * s * (1.0 - s))

    return _node(gamma * s, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    s = expit(a.data)  # derivative of log(1 + e^x)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * s)

    return _node(np.logaddexp(0.0, a.data), (a,), backward)


ACTIVATIONS = {
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "scaled_sigmoid": scaled_sigmoid,
}


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(old))

    return _node(a.data.reshape(shape), (a,), backward)


def flatten(a: Tensor) -> Tensor:
    """(B, ...) -> (B, K); row-major."""
    return reshape(a, (a.data.shape[0], -1))


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Column slice of a (B, m) tensor."""
    if a.data.ndim != 2:
        raise ValueError(f"slice_cols expects a 2-D tensor, got shape {a.shape}")

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[:, start:stop] = g
            a.accumulate_grad(ga)

    return _node(a.data[:, start:stop].copy(), (a,), backward)


def column(a: Tensor, j: int) -> Tensor:
    """Extract column j of a (B, m) tensor as a (B,) vector."""
    if a.data.ndim != 2:
        raise ValueError(f"column expects a 2-D tensor, got shape {a.shape}")

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[:, j] = g
            a.accumulate_grad(ga)

    return _node(a.data[:, j].copy(), (a,), backward)


# ---------------------------------------------------------------------------
# layers


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ W + b for x of shape (B, n) or (n,); W is (n, m), b is (m,)."""
    single = x.data.ndim == 1
    xd = x.data[None, :] if single else x.data
    if xd.ndim != 2:
        raise ValueError(f"dense expects 1-D or 2-D input, got shape {x.shape}")
    n, m = weight.data.shape
    if xd.shape[1] != n:
        raise ValueError(
            f"dense shape mismatch: input {x.shape} vs weight {weight.data.shape}"
        )
    if bias.data.shape != (m,):
        raise ValueError(f"dense bias shape {bias.data.shape}, expected ({m},)")
    out = xd @ weight.data + bias.data

    def backward(g):
        gm = g[None, :] if single else g
        if weight.requires_grad:
            weight.accumulate_grad(xd.T @ gm)
        if bias.requires_grad:
            bias.accumulate_grad(gm.sum(axis=0))
        if x.requires_grad:
            gx = gm @ weight.data.T
            x.accumulate_grad(gx[0] if single else gx)

    return _node(out[0] if single else out, (x, weight, bias), backward)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Valid (no padding) correlation.

    x: (B, H, W, Cin) or (H, W, Cin); kernel: (kh, kw, Cin, Cout);
    bias: (Cout,).  Output spatial size is (H-kh+1, W-kw+1).
    """
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise ValueError(f"conv2d expects 3-D or 4-D input, got shape {x.shape}")
    kh, kw, cin, cout = kernel.data.shape
    B, H, W, C = xd.shape
    if C != cin:
        raise ValueError(
            f"conv2d channel mismatch: input shape {x.shape}, kernel shape {kernel.data.shape}"
        )
    if kh > H or kw > W:
        raise ValueError(
            f"conv2d kernel larger than input: input shape {x.shape}, kernel shape {kernel.data.shape}"
        )
    if bias.data.shape != (cout,):
        raise ValueError(f"conv2d bias shape {bias.data.shape}, expected ({cout},)")
    oh, ow = H - kh + 1, W - kw + 1
    kd = kernel.data
    out = np.zeros((B, oh, ow, cout))
    # accumulate one thin matmul per kernel position; faster than an
    # explicit im2col copy at these channel counts
    for u in range(kh):
        for v in range(kw):
            out += xd[:, u : u + oh, v : v + ow, :] @ kd[u, v]
    out += bias.data

    def backward(g):
        gm = g[None] if single else g
        if kernel.requires_grad:
            gflat = gm.reshape(-1, cout)
            dk = np.empty_like(kd)
            for u in range(kh):
                for v in range(kw):
                    xs = xd[:, u : u + oh, v : v + ow, :].reshape(-1, cin)
                    dk[u, v] = xs.T @ gflat
            kernel.accumulate_grad(dk)
        if bias.requires_grad:
            bias.accumulate_grad(gm.sum(axis=(0, 1, 2)))
        if x.requires_grad:
            dx = np.zeros_like(xd)
            for u in range(kh):
                for v in range(kw):
                    dx[:, u : u + oh, v : v + ow, :] += gm @ kd[u, v].T
            x.accumulate_grad(dx[0] if single else dx)

    return _node(out[0] if single else out, (x, kernel, bias), backward)


def maxpool2d(x: Tensor, ph: int, pw: int) -> Tensor:
    """Non-overlapping (ph, pw) max pooling; trailing remainder is dropped."""
    if ph <= 0 or pw <= 0:
        raise ValueError(f"maxpool extents must be positive, got ({ph}, {pw})")
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise ValueError(f"maxpool expects 3-D or 4-D input, got shape {x.shape}")
    B, H, W, C = xd.shape
    oh, ow = H // ph, W // pw
    if oh == 0 or ow == 0:
        raise ValueError(f"maxpool window ({ph}, {pw}) exceeds input shape {x.shape}")
    xc = xd[:, : oh * ph, : ow * pw, :]
    r = (
        xc.reshape(B, oh, ph, ow, pw, C)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(B, oh, ow, C, ph * pw)
    )
    am = r.argmax(axis=-1)  # first index wins on ties
    out = np.take_along_axis(r, am[..., None], axis=-1)[..., 0]

    def backward(g):
        gm = g[None] if single else g
        if x.requires_grad:
            dr = np.zeros((B, oh, ow, C, ph * pw))
            np.put_along_axis(dr, am[..., None], gm[..., None], axis=-1)
            dx = np.zeros_like(xd)
            dx[:, : oh * ph, : ow * pw, :] = (
                dr.reshape(B, oh, ow, C, ph, pw)
                .transpose(0, 1, 4, 2, 5, 3)
                .reshape(B, oh * ph, ow * pw, C)
            )
            x.accumulate_grad(dx[0] if single else dx)

    return _node(out[0] if single else out, (x,), backward)


def batchnorm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps=1e-5):
    """Normalize by batch statistics; features live on the last axis.

    Returns (out, batch_mean, batch_var); the caller owns the running
    statistics update.  Rejects batches of size 1 (variance undefined
    for normalization purposes).
    """
    xd = x.data
    if xd.shape[0] < 2:
        raise ValueError(f"batchnorm train mode requires batch size >= 2, got {xd.shape[0]}")
    if gamma.data.shape != (xd.shape[-1],) or beta.data.shape != (xd.shape[-1],):
        raise ValueError(
            f"batchnorm scale/shift shape {gamma.data.shape}/{beta.data.shape} "
            f"does not match feature count {xd.shape[-1]}"
        )
    axes = tuple(range(xd.ndim - 1))
    m = xd.mean(axis=axes)
    v = xd.var(axis=axes)
    inv = 1.0 / np.sqrt(v + eps)
    xhat = (xd - m) * inv

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=axes))
        if x.requires_grad:
            gh = g * gamma.data
            dx = inv * (
                gh - gh.mean(axis=axes) - xhat * (gh * xhat).mean(axis=axes)
            )
            x.accumulate_grad(dx)

    out = _node(gamma.data * xhat + beta.data, (x, gamma, beta), backward)
    return out, m, v


def batchnorm_infer(x: Tensor, gamma: Tensor, beta: Tensor, running_mean, running_var, eps=1e-5) -> Tensor:
    """Normalize by frozen running statistics (pure affine map)."""
    xd = x.data
    inv = 1.0 / np.sqrt(running_var + eps)
    xhat = (xd - running_mean) * inv
    axes = tuple(range(xd.ndim - 1))

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=axes))
        if x.requires_grad:
            x.accumulate_grad(g * (gamma.data * inv))

    return _node(gamma.data * xhat + beta.data, (x, gamma, beta), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must satisfy 0 <= p < 1, got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs a random generator")
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    return _node(x.data * mask, (x,), backward)


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named parameter tensors plus per-parameter momentum buffers.

    Also carries non-trainable named buffers (batchnorm running
    statistics) so a model's full state serializes in one place.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._momentum: dict[str, np.ndarray] = {}
        self._buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name!r}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        self._momentum[name] = np.zeros_like(t.data)
        return t

    def add_buffer(self, name: str, data) -> np.ndarray:
        if name in self._buffers:
            raise ValueError(f"duplicate buffer name: {name!r}")
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self._buffers[name] = arr
        return arr

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def buffers(self):
        return self._buffers

    def buffer(self, name: str) -> np.ndarray:
        return self._buffers[name]

    def set_buffer(self, name: str, data):
        if name not in self._buffers:
            raise KeyError(name)
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.shape != self._buffers[name].shape:
            raise ValueError(
                f"buffer {name!r} shape {arr.shape} != {self._buffers[name].shape}"
            )
        self._buffers[name][...] = arr

    def momentum(self, name: str) -> np.ndarray:
        return self._momentum[name]

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def num_params(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def state_arrays(self):
        """(name, array, kind) triples in declaration order, params then buffers."""
        out = [(n, p.data, "param") for n, p in self._params.items()]
        out.extend((n, b, "buffer") for n, b in self._buffers.items())
        return out

    def snapshot(self):
        """Deep copy of all parameter and buffer values."""
        return (
            {n: p.data.copy() for n, p in self._params.items()},
            {n: b.copy() for n, b in self._buffers.items()},
        )

    def restore(self, snap):
        params, buffers = snap
        for n, d in params.items():
            self._params[n].data[...] = d
        for n, d in buffers.items():
            self._buffers[n][...] = d
