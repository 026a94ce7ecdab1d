"""Dense-tensor arithmetic with analytic reverse-mode gradients.

Every operation the segmentation pipeline needs is implemented here as a
node constructor: forward in numpy, backward as an explicit closure that
accumulates into parent gradients. There is no general broadcasting and no
dynamic graph machinery beyond topological replay; the op set is small and
fixed on purpose.
"""

from __future__ import annotations

import struct
from typing import Callable, Sequence

import numpy as np

PROB_EPS = 1e-12  # clamp floor before any log of a probability

MCT1_MAGIC = b"MCT1"


class DimensionError(ValueError):
    """Shape disagreement between operands."""


class Tensor:
    """A value in the computation graph.

    ``data`` is a numpy array (float32 or float64); ``grad`` is allocated
    lazily during backward. Tensors are immutable once produced.
    """

    __slots__ = ("data", "grad", "_parents", "_backward", "_grad_shared")

    def __init__(self, data, parents: tuple = (), backward: Callable | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward
        self._grad_shared = False

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if isinstance(self, Parameter) and not self.trainable:
            return
        if self.grad is None:
            # hold a reference; copy lazily if a second contribution arrives
            self.grad = np.asarray(g)
            self._grad_shared = True
        elif self._grad_shared:
            self.grad = self.grad + g
            self._grad_shared = False
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """A leaf tensor with a persistent gradient buffer.

    ``trainable=False`` enforces the stop-gradient contract: the gradient
    buffer stays all-zero through any backward pass.
    """

    __slots__ = ("trainable",)

    def __init__(self, data, trainable: bool = True):
        super().__init__(np.array(data, copy=True))
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise DimensionError(msg)


def constant(data) -> Tensor:
    return Tensor(np.asarray(data))


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, f"add: shapes {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, (a, b))

    def bwd(g):
        a._accumulate(g)
        b._accumulate(g)

    out._backward = bwd
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, f"mul: shapes {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data, (a, b))

    def bwd(g):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    out._backward = bwd
    return out


def scale(x: Tensor, s: float) -> Tensor:
    out = Tensor(x.data * s, (x,))
    out._backward = lambda g: x._accumulate(g * s)
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0), (x,))
    out._backward = lambda g: x._accumulate(g * mask)
    return out


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    out = Tensor(x.data.reshape(shape), (x,))
    out._backward = lambda g: x._accumulate(g.reshape(old))
    return out


def transpose2d(x: Tensor) -> Tensor:
    _check(x.data.ndim == 2, f"transpose2d: rank {x.data.ndim}")
    out = Tensor(x.data.T.copy(), (x,))
    out._backward = lambda g: x._accumulate(g.T)
    return out


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate C×h×w maps along the channel axis."""
    base = parts[0].shape[1:]
    for p in parts:
        _check(p.shape[1:] == base, f"concat: spatial {p.shape[1:]} vs {base}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=0), tuple(parts))
    splits = np.cumsum([p.shape[0] for p in parts])[:-1]

    def bwd(g):
        for p, piece in zip(parts, np.split(g, splits, axis=0)):
            p._accumulate(piece)

    out._backward = bwd
    return out


def spatial_mean(x: Tensor) -> Tensor:
    """C×h×w -> C, the global average over positions."""
    _check(x.data.ndim == 3, f"spatial_mean: rank {x.data.ndim}")
    n = x.shape[1] * x.shape[2]
    out = Tensor(x.data.mean(axis=(1, 2)), (x,))
    out._backward = lambda g: x._accumulate(
        np.broadcast_to((g / n)[:, None, None], x.shape).copy()
    )
    return out


def broadcast_map(v: Tensor, h: int, w: int) -> Tensor:
    """C -> C×h×w by replication."""
    _check(v.data.ndim == 1, f"broadcast_map: rank {v.data.ndim}")
    out = Tensor(np.broadcast_to(v.data[:, None, None], (v.shape[0], h, w)).copy(), (v,))
    out._backward = lambda g: v._accumulate(g.sum(axis=(1, 2)))
    return out


# ---------------------------------------------------------------------------
# linear-algebra ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.data.ndim == 2 and b.data.ndim == 2, "matmul: rank-2 operands required")
    _check(
        a.shape[1] == b.shape[0],
        f"matmul: inner dims disagree for shapes {a.shape} and {b.shape}",
    )
    out = Tensor(a.data @ b.data, (a, b))

    def bwd(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    out._backward = bwd
    return out


def linear_rows(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """N×Cin rows through an affine map: x @ W.T + b, output N×Cout."""
    _check(
        x.shape[1] == weight.shape[1],
        f"linear_rows: input width {x.shape[1]} vs weight {weight.shape}",
    )
    out = Tensor(x.data @ weight.data.T + bias.data[None, :], (x, weight, bias))

    def bwd(g):
        x._accumulate(g @ weight.data)
        weight._accumulate(g.T @ x.data)
        bias._accumulate(g.sum(axis=0))

    out._backward = bwd
    return out


def affine_1x1(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-position affine map on a Cin×h×w tensor (a 1×1 convolution)."""
    _check(x.data.ndim == 3, f"affine_1x1: rank {x.data.ndim}")
    _check(
        weight.shape[1] == x.shape[0],
        f"affine_1x1: channels {x.shape[0]} vs weight {weight.shape}",
    )
    cin, h, w = x.shape
    flat = x.data.reshape(cin, h * w)
    out = Tensor(
        (weight.data @ flat + bias.data[:, None]).reshape(weight.shape[0], h, w),
        (x, weight, bias),
    )

    def bwd(g):
        gf = g.reshape(weight.shape[0], h * w)
        x._accumulate((weight.data.T @ gf).reshape(x.shape))
        weight._accumulate(gf @ flat.T)
        bias._accumulate(gf.sum(axis=1))

    out._backward = bwd
    return out


def conv3x3(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """3×3 convolution with padding 1 via im2col; stride downsamples."""
    _check(x.data.ndim == 3, f"conv3x3: rank {x.data.ndim}")
    cin, h, w = x.shape
    cout = weight.shape[0]
    _check(
        weight.shape == (cout, cin, 3, 3),
        f"conv3x3: weight {weight.shape} vs input channels {cin}",
    )
    _check(h % stride == 0 and w % stride == 0, f"conv3x3: {h}×{w} not divisible by stride {stride}")
    oh, ow = h // stride, w // stride
    padded = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    # columns: (cin*9) × (oh*ow)
    cols = np.empty((cin * 9, oh * ow), dtype=x.data.dtype)
    idx = 0
    for dy in range(3):
        for dx in range(3):
            patch = padded[:, dy : dy + h : stride, dx : dx + w : stride]
            cols[idx * cin : (idx + 1) * cin] = patch.reshape(cin, oh * ow)
            idx += 1
    wmat = weight.data.transpose(2, 3, 1, 0).reshape(cin * 9, cout)  # rows match cols layout
    out = Tensor((wmat.T @ cols + bias.data[:, None]).reshape(cout, oh, ow), (x, weight, bias))

    def bwd(g):
        gf = g.reshape(cout, oh * ow)
        bias._accumulate(gf.sum(axis=1))
        weight._accumulate(
            (cols @ gf.T).reshape(3, 3, cin, cout).transpose(3, 2, 0, 1)
        )
        gcols = wmat @ gf  # (cin*9) × (oh*ow)
        gpad = np.zeros_like(padded)
        idx2 = 0
        for dy in range(3):
            for dx in range(3):
                gpad[:, dy : dy + h : stride, dx : dx + w : stride] += gcols[
                    idx2 * cin : (idx2 + 1) * cin
                ].reshape(cin, oh, ow)
                idx2 += 1
        x._accumulate(gpad[:, 1 : 1 + h, 1 : 1 + w])

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# normalization and interpolation


def softmax(x: Tensor, axis: int) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p, (x,))

    def bwd(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        x._accumulate(p * (g - dot))

    out._backward = bwd
    return out


def _bilinear_weights(n_in: int, factor: int, dtype):
    """Source indices and weights for each output position (half-pixel centers)."""
    n_out = n_in * factor
    coords = (np.arange(n_out, dtype=dtype) + 0.5) / factor - 0.5
    lo = np.floor(coords).astype(np.int64)
    frac = coords - lo
    lo = np.clip(lo, 0, n_in - 1)
    hi = np.clip(lo + 1, 0, n_in - 1)
    return lo, hi, frac


def upsample(x: Tensor, factor: int, mode: str = "bilinear") -> Tensor:
    """C×h×w -> C×fh×fw. Nearest replicates blocks; bilinear uses half-pixel centers."""
    _check(x.data.ndim == 3, f"upsample: rank {x.data.ndim}")
    if factor < 1:
        raise ValueError(f"upsample: factor must be >= 1, got {factor}")
    if factor == 1:
        out = Tensor(x.data.copy(), (x,))
        out._backward = lambda g: x._accumulate(g)
        return out
    c, h, w = x.shape
    if mode == "nearest":
        out = Tensor(np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2), (x,))

        def bwd_n(g):
            x._accumulate(
                g.reshape(c, h, factor, w, factor).sum(axis=(2, 4))
            )

        out._backward = bwd_n
        return out
    if mode != "bilinear":
        raise ValueError(f"upsample: unknown mode {mode!r}")
    ylo, yhi, fy = _bilinear_weights(h, factor, x.data.dtype)
    xlo, xhi, fx = _bilinear_weights(w, factor, x.data.dtype)
    wy0, wy1 = (1 - fy)[None, :, None], fy[None, :, None]
    wx0, wx1 = (1 - fx)[None, None, :], fx[None, None, :]
    d = x.data
    out_data = (
        d[:, ylo][:, :, xlo] * wy0 * wx0
        + d[:, ylo][:, :, xhi] * wy0 * wx1
        + d[:, yhi][:, :, xlo] * wy1 * wx0
        + d[:, yhi][:, :, xhi] * wy1 * wx1
    )
    out = Tensor(out_data, (x,))

    def bwd_b(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), ylo[:, None], xlo[None, :]), g * wy0 * wx0)
        np.add.at(gx, (slice(None), ylo[:, None], xhi[None, :]), g * wy0 * wx1)
        np.add.at(gx, (slice(None), yhi[:, None], xlo[None, :]), g * wy1 * wx0)
        np.add.at(gx, (slice(None), yhi[:, None], xhi[None, :]), g * wy1 * wx1)
        x._accumulate(gx)

    out._backward = bwd_b
    return out


# ---------------------------------------------------------------------------
# classification utilities


def one_hot(label: int, num_classes: int, dtype=np.float64) -> np.ndarray:
    if not 0 <= label < num_classes:
        raise ValueError(f"one_hot: label {label} outside [0, {num_classes})")
    v = np.zeros(num_classes, dtype=dtype)
    v[label] = 1.0
    return v


def cross_entropy_map(probs: Tensor, gt: np.ndarray, ignore_label: int = 255) -> Tensor:
    """Mean −log p[gt] over non-ignored positions of a K×H×W probability map."""
    k, h, w = probs.shape
    _check(gt.shape == (h, w), f"cross_entropy_map: gt {gt.shape} vs probs {probs.shape}")
    valid = gt != ignore_label
    if not valid.any():
        raise ValueError("cross_entropy_map: no labeled pixels")
    ys, xs = np.nonzero(valid)
    labels = gt[ys, xs].astype(np.int64)
    picked = probs.data[labels, ys, xs]
    clamped = np.clip(picked, PROB_EPS, 1.0)
    n = labels.size
    out = Tensor(np.asarray(-np.log(clamped).mean(), dtype=probs.data.dtype), (probs,))

    def bwd(g):
        gp = np.zeros_like(probs.data)
        live = picked > PROB_EPS  # below the clamp the loss is locally flat
        gp[labels[live], ys[live], xs[live]] = -float(g) / (clamped[live] * n)
        probs._accumulate(gp)

    out._backward = bwd
    return out


def cross_entropy_rows(probs: Tensor, targets: np.ndarray) -> Tensor:
    """Mean −log p[target] over the rows of an N×K probability matrix."""
    n, k = probs.shape
    _check(targets.shape == (n,), f"cross_entropy_rows: targets {targets.shape} vs probs {probs.shape}")
    picked = probs.data[np.arange(n), targets]
    clamped = np.clip(picked, PROB_EPS, 1.0)
    out = Tensor(np.asarray(-np.log(clamped).mean(), dtype=probs.data.dtype), (probs,))

    def bwd(g):
        gp = np.zeros_like(probs.data)
        live = picked > PROB_EPS
        rows = np.arange(n)[live]
        gp[rows, targets[live]] = -float(g) / (clamped[live] * n)
        probs._accumulate(gp)

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-5,
) -> float:
    """Compare analytic gradients of the scalar f() against central differences.

    f must rebuild its graph on every call. Returns the worst relative error
    over all entries of all trainable parameters.
    """
    for p in params:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("grad_check: non-finite loss at base point")
    loss.backward()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        if not p.trainable:
            continue
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f().item()
            flat[i] = orig - eps
            lo = f().item()
            flat[i] = orig
            numeric = (hi - lo) / (2 * eps)
            denom = max(abs(aflat[i]), abs(numeric), 1e-6)
            worst = max(worst, abs(aflat[i] - numeric) / denom)
    return worst


# ---------------------------------------------------------------------------
# tensor file format (MCT1)


def write_tensor(fh, array: np.ndarray) -> None:
    """magic 'MCT1', u32 rank, rank u32 extents, u8 dtype flag, row-major values."""
    arr = np.ascontiguousarray(array)
    if arr.dtype == np.float32:
        flag = 0
    elif arr.dtype == np.float64:
        flag = 1
    else:
        raise ValueError(f"write_tensor: unsupported dtype {arr.dtype}")
    fh.write(MCT1_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    for ext in arr.shape:
        fh.write(struct.pack("<I", ext))
    fh.write(struct.pack("<B", flag))
    fh.write(arr.astype("<f4" if flag == 0 else "<f8").tobytes())


class TensorFormatError(ValueError):
    pass


def read_tensor(fh) -> np.ndarray:
    start = fh.tell()
    magic = fh.read(4)
    if magic != MCT1_MAGIC:
        raise TensorFormatError(f"bad tensor magic {magic!r} at byte {start}")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(rank))
    (flag,) = struct.unpack("<B", fh.read(1))
    dtype = "<f4" if flag == 0 else "<f8"
    count = int(np.prod(shape)) if shape else 1
    raw = fh.read(count * (4 if flag == 0 else 8))
    expect = count * (4 if flag == 0 else 8)
    if len(raw) != expect:
        raise TensorFormatError(f"truncated tensor data at byte {fh.tell()}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(
        np.float32 if flag == 0 else np.float64
    )
