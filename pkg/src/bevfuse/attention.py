"""Multi-head deformable attention over 2-D maps and 3-D grids.

One query attends a value volume by sampling ``K`` points per head around
each of its reference locations.  A query may carry several references
(height anchors, camera views, history frames); each reference is a full
deformable-attention term and the terms are summed with per-reference
scales, so ``scale = 1/|V_hit|`` gives the view-normalized form and
``scale = 0`` drops the reference entirely.

Value volumes are passed channel-last, ``[B, *S, Cv]``: ``B`` banks (one per
camera or history frame) of an ``S``-shaped grid.  Offsets are in cells.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np

from .numerics import (Layer, Linear, ShapeError, Tensor, interp_corners, scatter_rows,
                       softmax, softmax_backward, xavier)


class ConfigError(ValueError):
    pass


# When a list is installed here, every forward call appends the integer
# cells its samples fall in.  Multilinear sampling has kinks on cell
# boundaries, so finite-difference probes compare these to stay on one
# smooth piece.
_cell_log: list | None = None


@contextlib.contextmanager
def record_sample_cells():
    global _cell_log
    prev, _cell_log = _cell_log, []
    try:
        yield _cell_log
    finally:
        _cell_log = prev


class DeformAttnParams(Layer):
    """Weights of one deformable-attention call site.

    ``offset_w``/``weight_w`` start at zero, so a fresh layer averages its
    K samples, all taken exactly at the reference point.
    """

    def __init__(self, embed_dim: int, heads: int = 4, points: int = 4, dim: int = 2,
                 value_dim: int | None = None, rng: np.random.Generator | None = None,
                 zero_output: bool = False):
        if embed_dim % heads:
            raise ConfigError(f"embed_dim {embed_dim} not divisible by heads {heads}")
        if dim not in (2, 3):
            raise ConfigError(f"sampling dim must be 2 or 3, got {dim}")
        value_dim = embed_dim if value_dim is None else value_dim
        rng = rng if rng is not None else np.random.default_rng(0)
        self.heads, self.points, self.dim, self.embed_dim = heads, points, dim, embed_dim
        self.offset_w = Tensor(np.zeros((embed_dim, heads * points * dim)))
        self.offset_b = Tensor(np.zeros(heads * points * dim))
        self.weight_w = Tensor(np.zeros((embed_dim, heads * points)))
        self.weight_b = Tensor(np.zeros(heads * points))
        self.value_w = Tensor(xavier(rng, value_dim, embed_dim))
        self.value_b = Tensor(np.zeros(embed_dim))
        out = np.zeros((embed_dim, embed_dim)) if zero_output else xavier(rng, embed_dim, embed_dim)
        self.out_w = Tensor(out)
        self.out_b = Tensor(np.zeros(embed_dim))


@dataclass
class ReferencePoints:
    """Per-query reference locations in the target volume's cell frame.

    loc:   [N, R, dim] continuous cell coordinates
    bank:  [N, R] which value bank (camera / frame) each reference reads
    valid: [N, R] hit flags; invalid references contribute nothing
    scale: [N, R] multiplier of each reference's term (0 where invalid)
    """

    loc: np.ndarray
    valid: np.ndarray
    bank: np.ndarray | None = None
    scale: np.ndarray | None = None

    def __post_init__(self):
        self.loc = np.asarray(self.loc, dtype=np.float64)
        if self.loc.ndim == 2:
            self.loc = self.loc[:, None, :]
        N, R = self.loc.shape[:2]
        self.valid = np.broadcast_to(np.asarray(self.valid, dtype=bool).reshape(N, -1), (N, R)).copy()
        self.bank = np.zeros((N, R), dtype=np.int64) if self.bank is None else np.asarray(self.bank, dtype=np.int64).reshape(N, R)
        if self.scale is None:
            self.scale = self.valid.astype(np.float64)
        else:
            self.scale = np.where(self.valid, np.asarray(self.scale, dtype=np.float64).reshape(N, R), 0.0)

    @property
    def num_queries(self) -> int:
        return self.loc.shape[0]

    @property
    def dim(self) -> int:
        return self.loc.shape[2]


def _segment_sum(values: np.ndarray, seg: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of ``values`` into ``n`` buckets; ``seg`` must be sorted."""
    out = np.zeros((n,) + values.shape[1:])
    if len(seg) == 0:
        return out
    starts = np.flatnonzero(np.r_[True, seg[1:] != seg[:-1]])
    out[seg[starts]] = np.add.reduceat(values, starts, axis=0)
    return out


def _tree_sum(x: np.ndarray) -> np.ndarray:
    """Pairwise sum over axis 1: ``R`` equal terms (``R`` a power of two) give exactly ``R`` times one."""
    while x.shape[1] > 1:
        if x.shape[1] % 2:
            x = np.concatenate([x, np.zeros_like(x[:, :1])], axis=1)
        x = x[:, 0::2] + x[:, 1::2]
    return x[:, 0]


def deform_attn_forward(q: np.ndarray, refs: ReferencePoints, values: np.ndarray, p: DeformAttnParams):
    """Deformable attention; returns ``(out [N, C], cache)``.

    ``out[n] = sum_r scale[n,r] * (W_out @ sum_h,k A[n,h,k] * V_h(loc[n,r] + off[n,h,k]) + b_out)``
    """
    N, C = q.shape
    B, *S = values.shape[:-1]
    d = len(S)
    if C != p.embed_dim:
        raise ConfigError(f"query dim {C} != embed_dim {p.embed_dim}")
    if d != p.dim or refs.dim != d:
        raise ConfigError(f"params dim {p.dim}, refs dim {refs.dim}, volume dim {d} disagree")
    if refs.num_queries != N:
        raise ShapeError(f"{refs.num_queries} reference sets for {N} queries")
    Hh, K = p.heads, p.points
    Dh = C // Hh
    n_cells = int(np.prod(S))

    off = (q @ p.offset_w.data + p.offset_b.data).reshape(N, Hh, K, d)
    A = softmax((q @ p.weight_w.data + p.weight_b.data).reshape(N, Hh, K))
    vflat = values.reshape(B * n_cells, -1)
    V = vflat @ p.value_w.data + p.value_b.data
    # head-major table so each head reads its own channel slice
    table = V.reshape(B * n_cells, Hh, Dh).transpose(1, 0, 2).reshape(Hh * B * n_cells, Dh)

    n_idx, r_idx = np.nonzero(refs.scale)
    s = refs.scale[n_idx, r_idx]
    loc = refs.loc[n_idx, r_idx][:, None, None, :] + off[n_idx]          # [P,Hh,K,d]
    if _cell_log is not None:
        _cell_log.append(np.floor(loc).astype(np.int64).ravel())
    base = (np.arange(Hh)[None, :] * B + refs.bank[n_idx, r_idx][:, None]) * n_cells  # [P,Hh]
    flat, w, dw = interp_corners(loc, S)
    flat = flat + base[:, :, None, None]
    gathered = table[flat]                                                 # [P,Hh,K,c,Dh]
    sampled = np.einsum("phkc,phkcx->phkx", w, gathered)
    Ap = A[n_idx]
    agg = np.einsum("phk,phkx->phx", Ap, sampled).reshape(-1, C)
    R = refs.loc.shape[1]
    dense = np.zeros((N, R, C))
    dense[n_idx, r_idx] = s[:, None] * agg
    z = _tree_sum(dense)
    s_tot = _tree_sum(refs.scale[:, :, None])[:, 0]
    out = z @ p.out_w.data + s_tot[:, None] * p.out_b.data
    cache = dict(q=q, A=A, Ap=Ap, vflat=vflat, n_idx=n_idx, r_idx=r_idx, s=s, flat=flat, w=w,
                 dw=dw, gathered=gathered, sampled=sampled, z=z, s_tot=s_tot,
                 shape=(N, C, B, tuple(S), Hh, K, Dh, d), n_refs=refs.loc.shape[1])
    return out, cache


def deform_attn_backward(dout: np.ndarray, cache, p: DeformAttnParams):
    """Accumulates param grads; returns ``(dq, dvalues, dloc)``.

    ``dloc`` has the reference-location shape ``[N, R, dim]``.
    """
    N, C, B, S, Hh, K, Dh, d = cache["shape"]
    n_cells = int(np.prod(S))
    n_idx, r_idx, s = cache["n_idx"], cache["r_idx"], cache["s"]
    P = len(n_idx)

    p.out_w.accumulate(cache["z"].T @ dout)
    p.out_b.accumulate((cache["s_tot"][:, None] * dout).sum(axis=0))
    dz = dout @ p.out_w.data.T
    dagg = (s[:, None] * dz[n_idx]).reshape(P, Hh, Dh)

    sampled = cache["sampled"]
    dA = _segment_sum(np.einsum("phx,phkx->phk", dagg, sampled), n_idx, N)
    dsampled = cache["Ap"][..., None] * dagg[:, :, None, :]                 # [P,Hh,K,Dh]

    g = np.einsum("phkcx,phkx->phkc", cache["gathered"], dsampled)
    dloc_p = np.einsum("phkc,phkcd->phkd", g, cache["dw"])                  # [P,Hh,K,d]
    contrib = (cache["w"][..., None] * dsampled[:, :, :, None, :]).reshape(-1, Dh)
    dtable = scatter_rows(cache["flat"].ravel(), contrib, Hh * B * n_cells)
    dV = dtable.reshape(Hh, B * n_cells, Dh).transpose(1, 0, 2).reshape(B * n_cells, C)

    vflat = cache["vflat"]
    p.value_w.accumulate(vflat.T @ dV)
    p.value_b.accumulate(dV.sum(axis=0))
    dvalues = (dV @ p.value_w.data.T).reshape((B,) + S + (vflat.shape[1],))

    q = cache["q"]
    dlogits = softmax_backward(dA, cache["A"]).reshape(N, Hh * K)
    doff = _segment_sum(dloc_p, n_idx, N).reshape(N, Hh * K * d)
    p.weight_w.accumulate(q.T @ dlogits)
    p.weight_b.accumulate(dlogits.sum(axis=0))
    p.offset_w.accumulate(q.T @ doff)
    p.offset_b.accumulate(doff.sum(axis=0))
    dq = dlogits @ p.weight_w.data.T + doff @ p.offset_w.data.T

    dloc = np.zeros((N, cache["n_refs"], d))
    dloc[n_idx, r_idx] = dloc_p.sum(axis=(1, 2))
    return dq, dvalues, dloc


def _as_volume(fmap: np.ndarray, spatial_dims: int) -> np.ndarray:
    """Channel-first ``[C, *S]`` or banked ``[B, C, *S]`` -> ``[B, *S, C]``."""
    if fmap.ndim == spatial_dims + 1:
        fmap = fmap[None]
    return np.moveaxis(fmap, 1, -1)


def deform_attn_2d(q, refs: ReferencePoints, fmap: np.ndarray, params: DeformAttnParams) -> np.ndarray:
    """Forward only, over a channel-first map ``[C, H, W]`` (or ``[B, C, H, W]``)."""
    if params.dim != 2:
        raise ConfigError("deform_attn_2d needs dim=2 params")
    return deform_attn_forward(q, refs, _as_volume(fmap, 2), params)[0]


def deform_attn_3d(q, refs: ReferencePoints, grid: np.ndarray, params: DeformAttnParams) -> np.ndarray:
    """Forward only, over a channel-first grid ``[C, Z, H, W]`` (or banked)."""
    if params.dim != 3:
        raise ConfigError("deform_attn_3d needs dim=3 params")
    return deform_attn_forward(q, refs, _as_volume(grid, 3), params)[0]


# ---------------------------------------------------------------------------
# loop oracle


def deform_attn_oracle(q, refs: ReferencePoints, fmap: np.ndarray, params: DeformAttnParams) -> np.ndarray:
    """Same math as :func:`deform_attn_forward`, written as plain Python loops.

    ``fmap`` is channel-first, ``[C, *S]`` or banked ``[B, C, *S]``.  Meant
    for small instances only.
    """
    d = params.dim
    vol = fmap if fmap.ndim == d + 2 else fmap[None]
    n_banks, cv = vol.shape[0], vol.shape[1]
    spatial = vol.shape[2:]
    N, C = q.shape
    heads, K = params.heads, params.points
    dh = C // heads
    ow, ob = params.offset_w.data, params.offset_b.data
    aw, ab = params.weight_w.data, params.weight_b.data
    vw, vb = params.value_w.data, params.value_b.data
    wo, bo = params.out_w.data, params.out_b.data

    def proj_value(b, cell, h):
        raw = [vol[(b, ci) + cell] for ci in range(cv)]
        res = []
        for j in range(h * dh, (h + 1) * dh):
            acc = vb[j]
            for ci in range(cv):
                acc += raw[ci] * vw[ci, j]
            res.append(acc)
        return res

    def sample(b, h, pos):
        acc = [0.0] * dh
        base = [math.floor(x) for x in pos]
        for corner in range(1 << d):
            cell = []
            wgt = 1.0
            for axis in range(d):
                bit = (corner >> (d - 1 - axis)) & 1
                i = base[axis] + bit
                f = pos[axis] - base[axis]
                wgt *= f if bit else 1.0 - f
                cell.append(i)
            if any(i < 0 or i >= spatial[a] for a, i in enumerate(cell)):
                continue
            v = proj_value(b, tuple(cell), h)
            for j in range(dh):
                acc[j] += wgt * v[j]
        return acc

    out = np.zeros((N, C))
    for n in range(N):
        qn = q[n]
        offs = [sum(qn[c] * ow[c, m] for c in range(C)) + ob[m] for m in range(ow.shape[1])]
        logits = [sum(qn[c] * aw[c, m] for c in range(C)) + ab[m] for m in range(aw.shape[1])]
        for r in range(refs.loc.shape[1]):
            sc = refs.scale[n, r]
            if not refs.valid[n, r] or sc == 0.0:
                continue
            bank = int(refs.bank[n, r])
            head_out = [0.0] * C
            for h in range(heads):
                lg = logits[h * K:(h + 1) * K]
                mx = max(lg)
                ex = [math.exp(v - mx) for v in lg]
                tot = sum(ex)
                for k in range(K):
                    a = ex[k] / tot
                    pos = [refs.loc[n, r, ax] + offs[(h * K + k) * d + ax] for ax in range(d)]
                    smp = sample(bank, h, pos)
                    for j in range(dh):
                        head_out[h * dh + j] += a * smp[j]
            for c in range(C):
                acc = bo[c]
                for j in range(C):
                    acc += head_out[j] * wo[j, c]
                out[n, c] += sc * acc
    return out


# ---------------------------------------------------------------------------
# dense multi-head attention (decoder self-attention among object queries)


class MultiHeadAttention(Layer):
    def __init__(self, dim: int, heads: int, rng, zero_output: bool = False):
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng, bias=False)  # a key bias cancels in the softmax
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng, zero=zero_output)

    def forward(self, qk_in: np.ndarray, v_in: np.ndarray):
        N, C = v_in.shape
        H = self.heads
        dh = C // H
        Q, cq = self.q.forward(qk_in)
        Kt, ck = self.k.forward(qk_in)
        V, cv = self.v.forward(v_in)
        Qh = Q.reshape(N, H, dh).transpose(1, 0, 2)
        Kh = Kt.reshape(N, H, dh).transpose(1, 0, 2)
        Vh = V.reshape(N, H, dh).transpose(1, 0, 2)
        att = softmax(Qh @ Kh.transpose(0, 2, 1) / np.sqrt(dh))
        ctx = (att @ Vh).transpose(1, 0, 2).reshape(N, C)
        out, co = self.o.forward(ctx)
        return out, (cq, ck, cv, co, Qh, Kh, Vh, att)

    def backward(self, dout, cache):
        cq, ck, cv, co, Qh, Kh, Vh, att = cache
        H, N, dh = Qh.shape
        dctx = self.o.backward(dout, co).reshape(N, H, dh).transpose(1, 0, 2)
        datt = dctx @ Vh.transpose(0, 2, 1)
        dVh = att.transpose(0, 2, 1) @ dctx
        dscore = softmax_backward(datt, att) / np.sqrt(dh)
        dQh = dscore @ Kh
        dKh = dscore.transpose(0, 2, 1) @ Qh
        merge = lambda t: t.transpose(1, 0, 2).reshape(N, H * dh)
        dqk = self.q.backward(merge(dQh), cq) + self.k.backward(merge(dKh), ck)
        dv = self.v.backward(merge(dVh), cv)
        return dqk, dv
