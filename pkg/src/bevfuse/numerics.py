"""Dense float64 kernels with hand-written backward passes.

Every op comes as a ``*_forward``/``*_backward`` pair (or returns enough
state to run its backward).  Learnable weights live in :class:`Tensor`
objects whose ``grad`` buffers accumulate; layers built on top of these
ops implement their own backward, there is no autograd tape.
"""
from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand dimensions do not agree."""


class NumericError(ArithmeticError):
    """Raised when a value that must be finite is not."""


@dataclass(eq=False)
class Tensor:
    """A named float64 array paired with an accumulating gradient buffer."""

    data: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        elif self.grad.shape != self.data.shape:
            raise ShapeError(f"grad shape {self.grad.shape} != data shape {self.data.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def accumulate(self, g: np.ndarray) -> None:
        self.grad += g

    @classmethod
    def zeros(cls, *shape: int) -> "Tensor":
        return cls(np.zeros(shape))


@dataclass
class GradCheckReport:
    max_abs_err: float
    max_rel_err: float
    worst_index: int
    step: float
    n_checked: int
    n_total: int
    worst_name: str = ""
    rel_floor: float = 1e-7
    n_skipped: int = 0
    checked: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def passed(self, rel_tol: float = 1e-4) -> bool:
        return self.max_rel_err <= rel_tol


# ---------------------------------------------------------------------------
# elementwise / dense ops


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight rows {w.shape[0]}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
    y = x @ w
    if b is not None:
        y = y + b
    return y


def linear_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Returns ``(dx, dw, db)`` for ``y = x @ w + b``."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0)
    dx = dy @ w.T
    return dx, dw, db


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dy: np.ndarray, y: np.ndarray, axis: int = -1) -> np.ndarray:
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    """Normalize over the trailing axis.  Returns ``(y, cache)``."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layer_norm_backward(dy, cache):
    xhat, inv, gamma = cache
    lead = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=lead)
    dbeta = dy.sum(axis=lead)
    dxhat = dy * gamma
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation; smooth everywhere, which keeps gradient checks clean
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def gelu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------------------
# multilinear sampling with zero padding


def interp_corners(loc: np.ndarray, spatial: Sequence[int], need_grad: bool = True):
    """Corner indices and weights for multilinear interpolation.

    ``loc[..., d]`` are continuous cell coordinates (integer = cell value).
    Returns ``(flat_idx, weight, dweight)`` with shapes ``[..., 2**d]``,
    ``[..., 2**d]`` and ``[..., 2**d, d]`` (``dweight`` is None unless
    ``need_grad``).  Corners outside the volume get weight 0 (zero padding)
    and a clipped, harmless index.
    """
    d = len(spatial)
    if loc.shape[-1] != d:
        raise ShapeError(f"location has {loc.shape[-1]} coords, volume has {d} dims")
    lo_f = np.floor(loc)
    frac = loc - lo_f
    lo = lo_f.astype(np.int64)
    # per axis: (index, weight, d weight / d frac) for the low and high corner;
    # validity is folded into the weights so no separate mask is needed
    axes = []
    stride = 1
    strides = []
    for a in reversed(range(d)):
        strides.append(stride)
        stride *= spatial[a]
    strides = strides[::-1]
    for a in range(d):
        n = spatial[a]
        i0 = lo[..., a]
        f = frac[..., a]
        v0 = ((i0 >= 0) & (i0 < n)).astype(np.float64)
        v1 = ((i0 >= -1) & (i0 < n - 1)).astype(np.float64)
        c0 = np.clip(i0, 0, n - 1) * strides[a]
        c1 = np.clip(i0 + 1, 0, n - 1) * strides[a]
        axes.append(((c0, (1.0 - f) * v0, -v0), (c1, f * v1, v1)))
    corners = list(itertools.product((0, 1), repeat=d))
    flat = np.empty(loc.shape[:-1] + (len(corners),), dtype=np.int64)
    weight = np.empty(loc.shape[:-1] + (len(corners),))
    dweight = np.empty(loc.shape[:-1] + (len(corners), d)) if need_grad else None
    for c, bits in enumerate(corners):
        sel = [axes[a][bit] for a, bit in enumerate(bits)]
        idx = sel[0][0]
        w = sel[0][1]
        for a in range(1, d):
            idx = idx + sel[a][0]
            w = w * sel[a][1]
        flat[..., c] = idx
        weight[..., c] = w
        if need_grad:
            for a in range(d):
                g = sel[a][2]
                for o in range(d):
                    if o != a:
                        g = g * sel[o][1]
                dweight[..., c, a] = g
    return flat, weight, dweight


def interp(volume: np.ndarray, loc: np.ndarray) -> np.ndarray:
    """Sample a channel-first volume ``[C, *S]`` at ``loc [M, d]`` -> ``[M, C]``."""
    C = volume.shape[0]
    flat, w, _ = interp_corners(loc, volume.shape[1:], need_grad=False)
    table = volume.reshape(C, -1).T
    return np.einsum("mc,mcx->mx", w, table[flat])


def interp_backward(dout: np.ndarray, volume: np.ndarray, loc: np.ndarray):
    """Returns ``(dvolume, dloc)`` for :func:`interp`."""
    C = volume.shape[0]
    flat, w, dw = interp_corners(loc, volume.shape[1:])
    table = volume.reshape(C, -1).T
    g = np.einsum("mcx,mx->mc", table[flat], dout)
    dloc = np.einsum("mc,mcd->md", g, dw)
    dtable = scatter_rows(flat.ravel(), (w[..., None] * dout[:, None, :]).reshape(-1, C), table.shape[0])
    return dtable.T.reshape(volume.shape), dloc


def scatter_rows(index: np.ndarray, rows: np.ndarray, n: int) -> np.ndarray:
    """``out[index[i]] += rows[i]`` for 2-D ``rows``, via per-column bincount."""
    out = np.empty((n, rows.shape[1]))
    for c in range(rows.shape[1]):
        out[:, c] = np.bincount(index, weights=rows[:, c], minlength=n)
    return out


def bilinear_sample_2d(fmap: np.ndarray, loc: Sequence[float]) -> np.ndarray:
    """Sample ``fmap [C, H, W]`` at one ``(row, col)`` location."""
    return interp(fmap, np.asarray(loc, dtype=DTYPE).reshape(1, 2))[0]


def trilinear_sample_3d(grid: np.ndarray, loc: Sequence[float]) -> np.ndarray:
    """Sample ``grid [C, Z, H, W]`` at one ``(z, row, col)`` location."""
    return interp(grid, np.asarray(loc, dtype=DTYPE).reshape(1, 3))[0]


# ---------------------------------------------------------------------------
# convolution (2-D and 3-D share the code)


def _windows(x, k, stride, pad):
    d = len(k)
    xp = np.pad(x, [(0, 0)] + [(pad, pad)] * d)
    win = sliding_window_view(xp, k, axis=tuple(range(1, d + 1)))
    sl = (slice(None),) + (slice(None, None, stride),) * d
    return xp.shape, win[sl]


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 0):
    """N-d convolution of ``x [Cin, *S]`` with ``w [Cout, Cin, *k]``."""
    d = w.ndim - 2
    if x.ndim != d + 1 or x.shape[0] != w.shape[1]:
        raise ShapeError(f"conv: input {x.shape} incompatible with weight {w.shape}")
    _, win = _windows(x, w.shape[2:], stride, pad)
    out = np.tensordot(w, win, axes=([1] + list(range(2, d + 2)),
                                     [0] + list(range(d + 1, 2 * d + 1))))
    return out + b.reshape((-1,) + (1,) * d)


def conv_backward(dout, x, w, stride: int = 1, pad: int = 0):
    """Returns ``(dx, dw, db)``."""
    d = w.ndim - 2
    k = w.shape[2:]
    padded_shape, win = _windows(x, k, stride, pad)
    out_sp = dout.shape[1:]
    dw = np.tensordot(dout, win, axes=(list(range(1, d + 1)), list(range(1, d + 1))))
    db = dout.reshape(dout.shape[0], -1).sum(axis=1)
    dxp = np.zeros(padded_shape)
    for off in np.ndindex(*k):
        contrib = np.tensordot(w[(slice(None), slice(None)) + off], dout, axes=([0], [0]))
        sl = (slice(None),) + tuple(slice(o, o + stride * (n - 1) + 1, stride)
                                    for o, n in zip(off, out_sp))
        dxp[sl] += contrib
    crop = (slice(None),) + tuple(slice(pad, s - pad) for s in padded_shape[1:])
    return dxp[crop], dw, db


# ---------------------------------------------------------------------------
# layers


class Layer:
    """Base class: attribute walk collects ``Tensor`` params and sub-layers."""

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, val in vars(self).items():
            if name.startswith("_"):
                continue
            key = f"{prefix}{name}"
            if isinstance(val, Tensor):
                out[key] = val
            elif isinstance(val, Layer):
                out.update(val.named_params(key + "."))
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], Layer):
                for i, sub in enumerate(val):
                    out.update(sub.named_params(f"{key}.{i}."))
            elif isinstance(val, dict) and val and isinstance(next(iter(val.values())), Layer):
                for k2, sub in val.items():
                    out.update(sub.named_params(f"{key}.{k2}."))
        return out

    def params(self) -> list[Tensor]:
        return list(self.named_params().values())

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def num_params(self) -> int:
        return sum(p.size for p in self.params())


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape if shape is not None else (fan_in, fan_out))


class Linear(Layer):
    def __init__(self, din: int, dout: int, rng: np.random.Generator | None = None, zero: bool = False,
                 bias: bool = True):
        w = np.zeros((din, dout)) if zero or rng is None else xavier(rng, din, dout)
        self.w = Tensor(w)
        self.b = Tensor(np.zeros(dout)) if bias else None

    def forward(self, x):
        if self.b is None:
            return x @ self.w.data, x
        return linear(x, self.w.data, self.b.data), x

    def backward(self, dy, x):
        dx, dw, db = linear_backward(dy, x, self.w.data)
        self.w.accumulate(dw)
        if self.b is not None:
            self.b.accumulate(db)
        return dx


class LayerNorm(Layer):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim))
        self.beta = Tensor(np.zeros(dim))
        self._eps = eps

    def forward(self, x):
        return layer_norm(x, self.gamma.data, self.beta.data, self._eps)

    def backward(self, dy, cache):
        dx, dg, db = layer_norm_backward(dy, cache)
        self.gamma.accumulate(dg)
        self.beta.accumulate(db)
        return dx


class FFN(Layer):
    """Linear -> GELU -> Linear.  ``zero_out`` makes it the zero map at init."""

    def __init__(self, dim: int, hidden: int, rng, zero_out: bool = False):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng, zero=zero_out)

    def forward(self, x):
        h, c1 = self.fc1.forward(x)
        a = gelu(h)
        y, c2 = self.fc2.forward(a)
        return y, (c1, h, c2)

    def backward(self, dy, cache):
        c1, h, c2 = cache
        da = self.fc2.backward(dy, c2)
        return self.fc1.backward(gelu_backward(da, h), c1)


class Conv(Layer):
    """2-D or 3-D convolution layer over channel-first inputs."""

    def __init__(self, cin: int, cout: int, k: int, ndim: int, rng=None, stride: int = 1,
                 pad: int | None = None, zero: bool = False):
        shape = (cout, cin) + (k,) * ndim
        fan_in = cin * k ** ndim
        fan_out = cout * k ** ndim
        w = np.zeros(shape) if zero or rng is None else xavier(rng, fan_in, fan_out, shape)
        self.w = Tensor(w)
        self.b = Tensor(np.zeros(cout))
        self._stride = stride
        self._pad = k // 2 if pad is None else pad

    def identity_init(self) -> None:
        cout, cin = self.w.shape[:2]
        if cout != cin:
            raise ShapeError("identity init needs cin == cout")
        self.w.data[...] = 0.0
        center = tuple(s // 2 for s in self.w.shape[2:])
        for c in range(cout):
            self.w.data[(c, c) + center] = 1.0
        self.b.data[...] = 0.0

    def forward(self, x):
        return conv_forward(x, self.w.data, self.b.data, self._stride, self._pad), x

    def backward(self, dy, x):
        dx, dw, db = conv_backward(dy, x, self.w.data, self._stride, self._pad)
        self.w.accumulate(dw)
        self.b.accumulate(db)
        return dx


# ---------------------------------------------------------------------------
# finite differences


def finite_difference_check(f: Callable[[], float], params: dict[str, Tensor] | Sequence[Tensor],
                            step: float = 1e-5, *, max_coords: int | None = None, seed: int = 0,
                            rel_floor: float = 1e-7, region: Callable[[], np.ndarray] | None = None
                            ) -> GradCheckReport:
    """Compare each tensor's ``grad`` against central differences of ``f``.

    The caller must have populated ``grad`` (one forward + backward) before
    calling.  ``f`` is evaluated with in-place perturbations of ``data``.
    With ``max_coords`` set, at most that many random coordinates per tensor
    are checked; the checked indices are kept in ``report.checked``.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, rel_floor)``.

    ``region``, if given, returns a signature of the piece of a piecewise
    smooth ``f`` that the latest call evaluated; coordinates whose two
    probes see different signatures straddle a kink and are skipped
    (counted in ``n_skipped``).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if not isinstance(params, dict):
        params = {str(i): p for i, p in enumerate(params)}
    rng = np.random.default_rng(seed)
    worst = (0.0, 0.0, 0, "")
    offset = 0
    n_checked = 0
    n_skipped = 0
    checked = {}
    for name, p in params.items():
        n = p.size
        if max_coords is not None and n > max_coords:
            idx = np.sort(rng.choice(n, size=max_coords, replace=False))
        else:
            idx = np.arange(n)
        checked[name] = idx
        flat = p.data.reshape(-1)
        analytic = p.grad.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            sig_p = region() if region is not None else None
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite objective while perturbing {name}[{i}]")
            if region is not None and not np.array_equal(sig_p, region()):
                n_skipped += 1
                continue
            num = (fp - fm) / (2 * step)
            a = analytic[i]
            abs_err = abs(a - num)
            rel = abs_err / max(abs(a), abs(num), rel_floor)
            if rel > worst[1] or (rel == worst[1] and abs_err > worst[0]):
                worst = (abs_err, rel, offset + int(i), name)
            n_checked += 1
        offset += n
    return GradCheckReport(max_abs_err=float(worst[0]), max_rel_err=float(worst[1]),
                           worst_index=worst[2], step=step, n_checked=n_checked,
                           n_total=offset, worst_name=worst[3], rel_floor=rel_floor,
                           checked=checked, n_skipped=n_skipped)


# ---------------------------------------------------------------------------
# weight checkpoints
#
# Layout (little-endian):
#   b"FBWT1"  u32 count
#   per tensor: u32 name_len, utf-8 name, u32 ndim, u64 dims[ndim], f64 data (row-major)

CHECKPOINT_MAGIC = b"FBWT1"


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray | Tensor]) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, t in tensors.items():
            arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=DTYPE)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:5] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:5]!r}")
    pos = 5
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        n = int(np.prod(dims)) if ndim else 1
        out[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(dims).astype(DTYPE)
        pos += 8 * n
    return out


def load_into(layer: Layer, path: str | Path, strict: bool = True) -> None:
    arrays = load_tensors(path)
    params = layer.named_params()
    missing = set(params) - set(arrays)
    if strict and missing:
        raise KeyError(f"checkpoint missing tensors: {sorted(missing)[:5]}")
    for name, p in params.items():
        if name in arrays:
            if arrays[name].shape != p.shape:
                raise ShapeError(f"{name}: checkpoint {arrays[name].shape} vs model {p.shape}")
            p.data[...] = arrays[name]


def iter_grads(tensors: Iterable[Tensor]) -> float:
    """Global L2 norm of gradients."""
    return float(np.sqrt(sum(float((t.grad ** 2).sum()) for t in tensors)))
