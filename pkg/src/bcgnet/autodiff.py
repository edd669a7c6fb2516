"""Minimal reverse-mode autodiff over dense float64 arrays.

Just enough machinery for the change-detection network: a Tensor that
remembers how it was produced, the layer set the model needs (3-D and
pointwise convolutions, channel attention pieces, dense layers, the
usual activations), He initialization, Adam, and a flat checkpoint
format.  Everything is double precision and strictly deterministic:
fixed reduction orders, no threading inside a graph.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class Tensor:
    """A float64 array plus the recipe for its gradient.

    ``_parents`` holds (tensor, pullback) pairs; calling ``backward`` on
    a scalar walks the graph in reverse topological order accumulating
    gradients.  Gradients of every reachable node are reset first, so a
    graph can be reused across steps.
    """

    __slots__ = ("data", "grad", "_parents")

    def __init__(self, data, _parents=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = _parents

    @property
    def shape(self):
        return self.data.shape

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                stack.append((parent, False))
        for node in topo:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node.grad is None:
                continue
            for parent, pullback in node._parents:
                contribution = pullback(node.grad)
                if parent.grad is None:
                    parent.grad = contribution
                else:
                    parent.grad = parent.grad + contribution

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data, _parents=(
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(g, b.data.shape)),
    ))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor(a.data - b.data, _parents=(
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(-g, b.data.shape)),
    ))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor(a.data * b.data, _parents=(
        (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
    ))


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    return Tensor(a.data * c, _parents=((a, lambda g: g * c),))


def tsum(a: Tensor, axis=None) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis)

    def pullback(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        g_exp = np.expand_dims(g, axis)
        return np.broadcast_to(g_exp, a.data.shape).copy()

    return Tensor(out_data, _parents=((a, pullback),))


def tmean(a: Tensor, axis=None) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[i] for i in axes]))
    return scale(tsum(a, axis=axis), 1.0 / count)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0  # derivative at exactly 0 is 0
    return Tensor(np.where(mask, a.data, 0.0), _parents=((a, lambda g: g * mask),))


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return Tensor(s, _parents=((a, lambda g: g * s * (1.0 - s)),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def pullback(g):
        dot = np.sum(g * s, axis=axis, keepdims=True)
        return s * (g - dot)

    return Tensor(s, _parents=((a, pullback),))


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + b with x (..., N), w (N, M), b (M,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    y = x.data @ w.data + b.data

    def pull_x(g):
        return g @ w.data.T

    def pull_w(g):
        gx = g.reshape(-1, g.shape[-1])
        xx = x.data.reshape(-1, x.data.shape[-1])
        return xx.T @ gx

    def pull_b(g):
        return g.reshape(-1, g.shape[-1]).sum(axis=0)

    return Tensor(y, _parents=((x, pull_x), (w, pull_w), (b, pull_b)))


def linear_constant(x: Tensor, mat: np.ndarray) -> Tensor:
    """y = x @ mat for a fixed (non-learned) matrix."""
    x = _as_tensor(x)
    mat = np.asarray(mat, dtype=np.float64)
    return Tensor(x.data @ mat, _parents=((x, lambda g: g @ mat.T),))


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_pull(i):
        lo, hi = offsets[i], offsets[i + 1]

        def pull(g):
            index = [slice(None)] * g.ndim
            index[axis if axis >= 0 else g.ndim + axis] = slice(lo, hi)
            return g[tuple(index)]

        return pull

    return Tensor(out, _parents=tuple((p, make_pull(i)) for i, p in enumerate(parts)))


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    return Tensor(a.data.reshape(shape), _parents=((a, lambda g: g.reshape(a.data.shape)),))


def take_index(a: Tensor, index: tuple) -> Tensor:
    """Basic (slice/int) indexing with scatter-add backward."""
    a = _as_tensor(a)

    def pullback(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return full

    return Tensor(a.data[index], _parents=((a, pullback),))


def _pad_same(x: np.ndarray, pads: tuple[tuple[int, int], ...]) -> np.ndarray:
    return np.pad(x, pads, mode="constant")


_GATHER_CACHE: dict[tuple[int, int, int, int, int, int], np.ndarray] = {}


def _conv3d_gather_indices(h: int, w: int, d: int, kh: int, kw: int, kd: int) -> np.ndarray:
    """Flat padded-volume index for every (output position, kernel offset).

    With "same" padding the window of output position (i, j, l) starts
    at padded position (i, j, l), so index = base + offset in the
    flattened padded volume.  Shape (h * w * d * kh * kw * kd,).
    """
    key = (h, w, d, kh, kw, kd)
    cached = _GATHER_CACHE.get(key)
    if cached is not None:
        return cached
    w2, d2 = w + kw - 1, d + kd - 1
    oi, oj, ol = np.meshgrid(np.arange(h), np.arange(w), np.arange(d), indexing="ij")
    base = (oi * w2 + oj) * d2 + ol
    offs = (np.arange(kh)[:, None, None] * w2 + np.arange(kw)[None, :, None]) * d2 \
        + np.arange(kd)[None, None, :]
    idx = (base.reshape(-1, 1) + offs.reshape(1, -1)).reshape(-1)
    _GATHER_CACHE[key] = idx
    return idx


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Stride-1, zero-padded "same" 3-D convolution.

    x is (B, H, W, D, Ci), kernel (kh, kw, kd, Ci, Co) with odd kernel
    dims, bias (Co,).  Output keeps the spatial/spectral shape.  The
    implementation gathers each window once into a columns matrix so
    forward, kernel gradient, and input gradient are each one matrix
    product (fixed reduction order, bitwise reproducible).
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    if x.data.ndim != 5:
        raise ValueError(f"conv3d input must be (B, H, W, D, Ci), got {x.data.shape}")
    kh, kw, kd, ci, co = kernel.data.shape
    if kh % 2 == 0 or kw % 2 == 0 or kd % 2 == 0:
        raise ValueError(f"kernel dims must be odd, got {(kh, kw, kd)}")
    if x.data.shape[4] != ci:
        raise ValueError(f"input channels {x.data.shape[4]} != kernel channels {ci}")
    if bias.data.shape != (co,):
        raise ValueError(f"bias shape {bias.data.shape} != ({co},)")
    b, h, w, d, _ = x.data.shape
    ph, pw, pd = kh // 2, kw // 2, kd // 2
    n_pos = h * w * d
    n_off = kh * kw * kd
    idx = _conv3d_gather_indices(h, w, d, kh, kw, kd)

    padded = _pad_same(x.data, ((0, 0), (ph, ph), (pw, pw), (pd, pd), (0, 0)))
    cols = padded.reshape(b, -1, ci)[:, idx, :].reshape(b * n_pos, n_off * ci)
    k2 = kernel.data.reshape(n_off * ci, co)
    y = (cols @ k2).reshape(b, h, w, d, co) + bias.data

    def pull_x(g):
        gpad = _pad_same(g, ((0, 0), (ph, ph), (pw, pw), (pd, pd), (0, 0)))
        gcols = gpad.reshape(b, -1, co)[:, idx, :].reshape(b * n_pos, n_off * co)
        kf = kernel.data[::-1, ::-1, ::-1].transpose(0, 1, 2, 4, 3)
        return (gcols @ kf.reshape(n_off * co, ci)).reshape(b, h, w, d, ci)

    def pull_k(g):
        gk = cols.T @ g.reshape(b * n_pos, co)
        return gk.reshape(kh, kw, kd, ci, co)

    def pull_b(g):
        return g.sum(axis=(0, 1, 2, 3))

    return Tensor(y, _parents=((x, pull_x), (kernel, pull_k), (bias, pull_b)))


def conv2d_pointwise(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """1x1 2-D convolution: an independent dense map at every pixel.

    x is (B, H, W, F), weight (F, Fo), bias (Fo,).
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 4:
        raise ValueError(f"pointwise conv input must be (B, H, W, F), got {x.data.shape}")
    if x.data.shape[3] != weight.data.shape[0]:
        raise ValueError(f"feature size {x.data.shape[3]} != weight rows {weight.data.shape[0]}")
    return dense(x, weight, bias)


def conv1d_channels(d: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Zero-padded "same" 1-D convolution along the last axis.

    d is (B, Ch), weight (k,) with odd k, bias (1,); single in/out
    channel, as used by the channel-attention gate.
    """
    d, weight, bias = _as_tensor(d), _as_tensor(weight), _as_tensor(bias)
    k = weight.data.shape[0]
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    p = k // 2
    padded = _pad_same(d.data, ((0, 0), (p, p)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, k, axis=1)  # (B, Ch, k)
    y = windows @ weight.data + bias.data

    def pull_d(g):
        gpad = np.zeros_like(padded)
        for t in range(k):
            gpad[:, t:t + d.data.shape[1]] += g * weight.data[t]
        return gpad[:, p:p + d.data.shape[1]]

    def pull_w(g):
        return np.einsum("bct,bc->t", windows, g)

    def pull_b(g):
        return np.array([g.sum()])

    return Tensor(y, _parents=((d, pull_d), (weight, pull_w), (bias, pull_b)))


def eca_kernel_size(channels: int) -> int:
    """Adaptive odd kernel size for the channel-attention convolution."""
    t = int(abs((np.log2(channels) + 1.0) / 2.0))
    k = t if t % 2 == 1 else t + 1
    return max(k, 3)


def eca_block(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Efficient channel attention over a (B, H, W, D, Ch) tensor.

    Channel descriptors are global averages over the three data axes;
    a small 1-D convolution across channels plus a sigmoid produces one
    gate per channel, which rescales the input channel-wise.
    """
    x = _as_tensor(x)
    descriptor = tmean(x, axis=(1, 2, 3))          # (B, Ch)
    gate = sigmoid(conv1d_channels(descriptor, weight, bias))
    b, ch = gate.data.shape
    gate_b = reshape(gate, (b, 1, 1, 1, ch))
    return mul(x, gate_b)


def he_normal_init(shape: tuple[int, ...], seed: int) -> np.ndarray:
    """He-normal draw: std sqrt(2 / fan_in), deterministic per seed.

    fan_in is the product of all dims but the last (the output dim) for
    matrices and kernels, and the full length for 1-D kernels.
    """
    shape = tuple(int(s) for s in shape)
    fan_in = int(np.prod(shape[:-1])) if len(shape) >= 2 else int(shape[0])
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive for shape {shape}")
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Adam:
    """Adam with coupled L2 regularization over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        self.t += 1
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise ValueError(f"non-finite gradient in parameter {name!r}")
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / (1.0 - self.beta1 ** self.t)
            v_hat = self.v[name] / (1.0 - self.beta2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def save_params(path: str | Path, entries: list[tuple[str, str, Tensor]]) -> None:
    """Checkpoint as a text manifest plus one packed float64 payload.

    Each manifest line is ``name kind dim0xdim1x...``; the binary file
    holds the little-endian float64 tensors concatenated in manifest
    order.
    """
    base = Path(path)
    lines = []
    blobs = []
    for name, kind, tensor in entries:
        dims = "x".join(str(d) for d in tensor.data.shape) or "scalar"
        lines.append(f"{name} {kind} {dims}")
        blobs.append(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    base.parent.mkdir(parents=True, exist_ok=True)
    Path(str(base) + ".manifest").write_text("\n".join(lines) + "\n")
    Path(str(base) + ".params").write_bytes(b"".join(blobs))


def load_params(path: str | Path) -> list[tuple[str, str, Tensor]]:
    base = Path(path)
    manifest = Path(str(base) + ".manifest").read_text().splitlines()
    raw = Path(str(base) + ".params").read_bytes()
    entries = []
    offset = 0
    for line in manifest:
        if not line.strip():
            continue
        name, kind, dims = line.split()
        shape = () if dims == "scalar" else tuple(int(d) for d in dims.split("x"))
        count = int(np.prod(shape)) if shape else 1
        chunk = raw[offset:offset + count * 8]
        if len(chunk) != count * 8:
            raise ValueError(f"checkpoint payload too short for {name}")
        offset += count * 8
        entries.append((name, kind, Tensor(np.frombuffer(chunk, dtype="<f8").reshape(shape))))
    if offset != len(raw):
        raise ValueError("checkpoint payload has trailing bytes")
    return entries
