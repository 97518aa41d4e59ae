"""Set-prediction 3-D detection head.

Object queries, each owning a BEV reference point, run through decoder
layers (self-attention among queries, deformable cross-attention into the
BEV map at the reference point, FFN).  Every layer regresses a box relative
to its reference and the next layer starts from the refined center; the
gradient follows that chain, so each layer's reference is a differentiable
function of the earlier layers.

Query groups (the matched set and each denoising group) are decoded
independently.  That is the block-diagonal attention mask in its
strictest form, and it keeps the matched predictions bitwise identical
whether or not denoising groups are present.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import DeformAttnParams, MultiHeadAttention, ReferencePoints, deform_attn_backward, deform_attn_forward
from .geometry import BevGrid
from .mmfe import sinusoidal_2d, sinusoidal_2d_backward
from .numerics import FFN, Layer, LayerNorm, Linear, Tensor, sigmoid

N_PARAMS = 10  # x, y, z, log w, log l, log h, sin yaw, cos yaw, vx, vy
MATCH_DIMS = 8  # velocity stays out of the matching cost


def wrap_angle(a):
    """Map to ``(-pi, pi]``."""
    a = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    return np.where(a == -np.pi, np.pi, a)


@dataclass
class Box3D:
    center: tuple[float, float, float]
    size: tuple[float, float, float]          # w, l, h
    yaw: float = 0.0
    velocity: tuple[float, float] | None = (0.0, 0.0)
    label: int = 0
    score: float = 1.0

    def __post_init__(self):
        self.center = tuple(float(v) for v in self.center)
        self.size = tuple(float(v) for v in self.size)
        if min(self.size) <= 0:
            raise ValueError(f"box sizes must be positive, got {self.size}")
        self.yaw = float(wrap_angle(self.yaw))
        if self.velocity is not None:
            self.velocity = tuple(float(v) for v in self.velocity)
        self.label = int(self.label)
        self.score = float(self.score)


def encode_boxes(boxes: list[Box3D]) -> np.ndarray:
    """``[N, 10]`` regression params; missing velocity becomes NaN."""
    out = np.zeros((len(boxes), N_PARAMS))
    for i, b in enumerate(boxes):
        v = b.velocity if b.velocity is not None else (np.nan, np.nan)
        out[i] = [*b.center, *np.log(b.size), np.sin(b.yaw), np.cos(b.yaw), *v]
    return out


def decode_params(params: np.ndarray, labels=None, scores=None) -> list[Box3D]:
    params = np.atleast_2d(params)
    n = len(params)
    labels = np.zeros(n, dtype=int) if labels is None else labels
    scores = np.ones(n) if scores is None else scores
    out = []
    for p, lab, s in zip(params, labels, scores):
        vel = None if np.isnan(p[8:10]).any() else (p[8], p[9])
        out.append(Box3D(tuple(p[0:3]), tuple(np.exp(p[3:6])), math.atan2(p[6], p[7]), vel, int(lab), float(s)))
    return out


# ---------------------------------------------------------------------------
# matching


def hungarian(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-cost assignment for a rectangular matrix.

    Shortest-augmenting-path form with row/column potentials, O(n^2 m).
    Returns ``(rows, cols)`` index arrays of the ``min(n, m)`` matched pairs,
    sorted by row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be 2-D")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost must be finite")
    transposed = cost.shape[0] > cost.shape[1]
    a = cost.T if transposed else cost
    n, m = a.shape
    if n == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)      # p[j]: row (1-based) matched to column j
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = a[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    cols = np.nonzero(p[1:])[0]
    rows = p[1:][cols] - 1
    if transposed:
        rows, cols = cols, rows
    order = np.argsort(rows)
    return rows[order], cols[order]


def assignment_total(cost: np.ndarray, rows, cols) -> float:
    """Sum of matched costs, accumulated along the shorter side in index order.

    The fixed order makes totals of the same pairs bitwise comparable.
    """
    cost = np.asarray(cost, dtype=np.float64)
    pairs = sorted(zip(cols, rows)) if cost.shape[0] > cost.shape[1] else sorted(zip(rows, cols))
    if cost.shape[0] > cost.shape[1]:
        return sum(cost[i, j] for j, i in pairs)
    return sum(cost[i, j] for i, j in pairs)


def brute_force_assignment(cost: np.ndarray) -> float:
    """Minimum total cost over all injective assignments (tiny matrices only)."""
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    best = np.inf
    if n <= m:
        for perm in itertools.permutations(range(m), n):
            best = min(best, assignment_total(cost, range(n), perm))
    else:
        for perm in itertools.permutations(range(n), m):
            best = min(best, assignment_total(cost, perm, range(m)))
    return best


@dataclass
class CostWeights:
    cls: float = 2.0
    reg: float = 0.25


def match_cost(cls_logits: np.ndarray, params: np.ndarray, gt_params: np.ndarray, gt_labels: np.ndarray,
               w: CostWeights = CostWeights()) -> np.ndarray:
    """``[n_pred, n_gt]`` cost: ``w_cls * -log p(label) + w_reg * L1(box)``."""
    logp = -np.logaddexp(0.0, -cls_logits)                                  # log sigmoid
    c_cls = -logp[:, gt_labels]
    c_reg = np.abs(params[:, None, :MATCH_DIMS] - gt_params[None, :, :MATCH_DIMS]).sum(axis=2)
    return w.cls * c_cls + w.reg * c_reg


def hungarian_match(cls_logits, params, gt: list[Box3D], w: CostWeights = CostWeights()):
    """Returns ``(pred_idx, gt_idx)``; predictions left out are background."""
    if not gt:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    gt_params = encode_boxes(gt)
    labels = np.array([b.label for b in gt])
    return hungarian(match_cost(cls_logits, params, gt_params, labels, w))


# ---------------------------------------------------------------------------
# queries


@dataclass
class DnQueries:
    labels: np.ndarray        # [M]
    features: np.ndarray      # [M, 6] noised z, log sizes, sin, cos
    refs: np.ndarray          # [M, 2] noised centers in BEV cells
    src: np.ndarray           # [M] source GT index
    group: np.ndarray         # [M] group id
    noise: float = 1.0

    @property
    def num_groups(self) -> int:
        return int(self.group.max()) + 1 if len(self.group) else 0


def make_denoising_queries(gt: list[Box3D], grid: BevGrid, noise: float = 1.0, groups: int = 2,
                           rng: np.random.Generator | None = None) -> DnQueries:
    """One query per GT box per group, with the center jittered by up to
    ``noise * 0.5 * size`` along each axis and log-sizes by up to ``0.2 * noise``.
    """
    if noise < 0:
        raise ValueError("noise scale must be >= 0")
    rng = rng if rng is not None else np.random.default_rng(0)
    gp = encode_boxes(gt)
    labels, feats, refs, src, grp = [], [], [], [], []
    for g in range(groups):
        for i, b in enumerate(gt):
            jitter = rng.uniform(-1.0, 1.0, size=2) * noise * 0.5 * np.array([b.size[1], b.size[0]])
            size_j = rng.uniform(-0.2, 0.2, size=3) * noise
            center = np.array(b.center[:2]) + jitter
            labels.append(b.label)
            feats.append(np.r_[gp[i, 2], gp[i, 3:6] + size_j, gp[i, 6:8]])
            refs.append(grid.to_cells(center))
            src.append(i)
            grp.append(g)
    return DnQueries(np.array(labels, dtype=int), np.array(feats).reshape(-1, 6),
                     np.array(refs).reshape(-1, 2), np.array(src, dtype=int), np.array(grp, dtype=int), noise)


@dataclass
class ObjectQuerySet:
    """Queries of one decode call: learnable set plus optional denoising groups."""

    content: Tensor
    ref: Tensor
    dn: DnQueries | None = None


# ---------------------------------------------------------------------------
# decoder


@dataclass
class HeadConfig:
    num_queries: int = 100
    num_layers: int = 3
    num_classes: int = 3
    heads: int = 4
    points: int = 4
    cost: CostWeights = field(default_factory=CostWeights)
    loss_cls: float = 2.0
    loss_reg: float = 0.25
    code_weights: tuple[float, ...] = (1, 1, 1, 1, 1, 1, 1, 1, 0.2, 0.2)
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    dn_groups: int = 2
    dn_noise: float = 1.0


class DecoderLayer(Layer):
    def __init__(self, C: int, cfg: HeadConfig, rng):
        self.sa_norm = LayerNorm(C)
        self.sa = MultiHeadAttention(C, cfg.heads, rng)
        self.ca_norm = LayerNorm(C)
        self.ca = DeformAttnParams(C, cfg.heads, cfg.points, 2, C, rng)
        self.ffn_norm = LayerNorm(C)
        self.ffn = FFN(C, 4 * C, rng)
        self.out_norm = LayerNorm(C)
        self.reg = Linear(C, N_PARAMS, zero=True)
        self.cls = Linear(C, cfg.num_classes, rng)
        self.cls.w.data *= 0.1
        self.cls.b.data[:] = -math.log((1 - 0.01) / 0.01)


def _ref_list(n: int) -> np.ndarray:
    return np.ones(n, dtype=bool)


@dataclass
class GroupPrediction:
    cls: list[np.ndarray]       # per layer [n, n_cls] logits
    params: list[np.ndarray]    # per layer [n, 10]
    refs: list[np.ndarray]      # per layer [n, 2] reference cells used


class DetectionHead(Layer):
    def __init__(self, cfg: HeadConfig, grid: BevGrid, C: int, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.grid = grid
        self.content = Tensor(rng.normal(0.0, 1.0, size=(cfg.num_queries, C)))
        self.ref = Tensor(self.initial_refs(cfg.num_queries, grid))
        self.label_embed = Tensor(rng.normal(0.0, 1.0, size=(cfg.num_classes, C)))
        self.box_embed = Linear(6, C, rng)
        self.layers = [DecoderLayer(C, cfg, rng) for _ in range(cfg.num_layers)]

    @staticmethod
    def initial_refs(n: int, grid: BevGrid) -> np.ndarray:
        """Spread ``n`` references on a near-square lattice covering the grid."""
        rows = int(np.ceil(np.sqrt(n * grid.H / grid.W)))
        cols = int(np.ceil(n / rows))
        r = (np.arange(rows) + 0.5) * grid.H / rows - 0.5
        c = (np.arange(cols) + 0.5) * grid.W / cols - 0.5
        rr, cc = np.meshgrid(r, c, indexing="ij")
        return np.stack([rr.ravel(), cc.ravel()], axis=1)[:n]

    # ------------------------------------------------------------------
    def _decode(self, x, ref0, vol):
        C = x.shape[1]
        cs = self.grid.cell_size
        ref = ref0
        preds = GroupPrediction([], [], [])
        caches = []
        for layer in self.layers:
            pos = sinusoidal_2d(ref[:, 0], ref[:, 1], C)
            h, c_san = layer.sa_norm.forward(x)
            y, c_sa = layer.sa.forward(h + pos, h)
            x = x + y
            h, c_can = layer.ca_norm.forward(x)
            refs = ReferencePoints(ref[:, None, :], _ref_list(len(ref)))
            y, c_ca = deform_attn_forward(h + pos, refs, vol, layer.ca)
            x = x + y
            h, c_fn = layer.ffn_norm.forward(x)
            y, c_ff = layer.ffn.forward(h)
            x = x + y
            h, c_on = layer.out_norm.forward(x)
            reg, c_reg = layer.reg.forward(h)
            logits, c_cls = layer.cls.forward(h)
            center = ref + reg[:, :2]
            params = reg.copy()
            params[:, :2] = self.grid.to_meters(center)
            preds.cls.append(logits)
            preds.params.append(params)
            preds.refs.append(ref)
            caches.append((ref, c_san, c_sa, c_can, c_ca, c_fn, c_ff, c_on, c_reg, c_cls))
            ref = center
        return preds, caches

    def _undecode(self, dcls, dparams, caches):
        """Backward through one group's decoder; returns ``(dx0, dref0, dvol)``."""
        cs = self.grid.cell_size
        dx = None
        dvol = None
        dref = 0.0   # gradient w.r.t. the reference fed to the next layer
        for li in reversed(range(len(self.layers))):
            layer = self.layers[li]
            ref, c_san, c_sa, c_can, c_ca, c_fn, c_ff, c_on, c_reg, c_cls = caches[li]
            dreg = dparams[li].copy()
            dreg[:, :2] = dreg[:, :2] * cs + dref
            dh = layer.reg.backward(dreg, c_reg) + layer.cls.backward(dcls[li], c_cls)
            g = layer.out_norm.backward(dh, c_on)
            dx = g if dx is None else dx + g
            dx = dx + layer.ffn_norm.backward(layer.ffn.backward(dx, c_ff), c_fn)
            dq, dv, dloc = deform_attn_backward(dx, c_ca, layer.ca)
            dx = dx + layer.ca_norm.backward(dq, c_can)
            dvol = dv if dvol is None else dvol + dv
            dqk, dvv = layer.sa.backward(dx, c_sa)
            dx = dx + layer.sa_norm.backward(dqk + dvv, c_san)
            dpos = dq + dqk
            dref = dreg[:, :2] + dloc[:, 0, :] + sinusoidal_2d_backward(dpos, ref[:, 0], ref[:, 1])
        return dx, dref, dvol

    def forward(self, bev: np.ndarray, dn: DnQueries | None = None):
        """Decode the learnable queries and any denoising groups.

        Returns ``(groups, cache)``; ``groups[0]`` is the matched set, then
        one :class:`GroupPrediction` per denoising group.
        """
        vol = np.ascontiguousarray(bev.transpose(1, 2, 0))[None]
        out, caches = [], []
        preds, c = self._decode(self.content.data, self.ref.data, vol)
        out.append(preds)
        caches.append(("match", c, None))
        if dn is not None:
            for g in range(dn.num_groups):
                sel = np.flatnonzero(dn.group == g)
                feat, c_be = self.box_embed.forward(dn.features[sel])
                x0 = self.label_embed.data[dn.labels[sel]] + feat
                preds, c = self._decode(x0, dn.refs[sel], vol)
                out.append(preds)
                caches.append(("dn", c, (sel, c_be, dn.labels[sel])))
        return out, dict(groups=caches, shape=bev.shape)

    def backward(self, grads: list[tuple[list, list]], cache) -> np.ndarray:
        """``grads[g] = (dcls per layer, dparams per layer)``; returns ``dbev``."""
        C, H, W = cache["shape"]
        dbev = np.zeros((1, H, W, C))
        for (kind, c, extra), (dcls, dparams) in zip(cache["groups"], grads):
            dx, dref, dvol = self._undecode(dcls, dparams, c)
            dbev += dvol
            if kind == "match":
                self.content.accumulate(dx)
                self.ref.accumulate(dref)
            else:
                sel, c_be, labels = extra
                np.add.at(self.label_embed.grad, labels, dx)
                self.box_embed.backward(dx, c_be)
        return dbev[0].transpose(2, 0, 1)


def head_forward(bev: np.ndarray, head: DetectionHead, dn: DnQueries | None = None) -> list[list[Box3D]]:
    """Per-layer decoded boxes of the matched query set."""
    groups, _ = head.forward(bev, dn)
    g = groups[0]
    out = []
    for logits, params in zip(g.cls, g.params):
        prob = sigmoid(logits)
        out.append(decode_params(params, prob.argmax(axis=1), prob.max(axis=1)))
    return out


# ---------------------------------------------------------------------------
# loss


def focal_loss(logits: np.ndarray, target: np.ndarray, alpha: float = 0.25, gamma: float = 2.0):
    """Sigmoid focal loss summed over entries; returns ``(loss, dlogits)``."""
    log_p = -np.logaddexp(0.0, -logits)
    log_q = -np.logaddexp(0.0, logits)
    p = np.exp(log_p)
    q = np.exp(log_q)
    pos = -alpha * q ** gamma * log_p
    neg = -(1 - alpha) * p ** gamma * log_q
    loss = np.where(target > 0, pos, neg)
    dpos = alpha * q ** gamma * (gamma * p * log_p - q)
    dneg = (1 - alpha) * p ** gamma * (p - gamma * q * log_q)
    return float(loss.sum()), np.where(target > 0, dpos, dneg)


@dataclass
class LossBreakdown:
    total: float
    cls: float
    box: float
    vel: float
    dn: float


def _group_loss(logits, params, tgt_idx, gt_params, gt_labels, n_norm, cfg: HeadConfig):
    """Loss of one layer's predictions with prediction ``tgt_idx[k][0]`` -> gt ``tgt_idx[k][1]``."""
    pi, gi = tgt_idx
    target = np.zeros_like(logits)
    target[pi, gt_labels[gi]] = 1.0
    l_cls, d_cls = focal_loss(logits, target, cfg.focal_alpha, cfg.focal_gamma)
    cw = np.asarray(cfg.code_weights, dtype=np.float64)
    diff = params[pi] - gt_params[gi]
    present = ~np.isnan(diff)
    diff = np.where(present, diff, 0.0)
    l1 = np.abs(diff) * cw
    d_params = np.zeros_like(params)
    d_params[pi] = np.sign(diff) * cw * present
    l_box = float(l1[:, :8].sum())
    l_vel = float(l1[:, 8:].sum())
    scale_c = cfg.loss_cls / n_norm
    scale_r = cfg.loss_reg / n_norm
    return (scale_c * l_cls, scale_r * l_box, scale_r * l_vel), (scale_c * d_cls, scale_r * d_params)


def detection_loss(groups: list[GroupPrediction], gt: list[Box3D], assignment, cfg: HeadConfig,
                   dn: DnQueries | None = None):
    """Composite loss summed over decoder layers.

    ``assignment`` is one ``(pred_idx, gt_idx)`` pair per decoder layer (or a
    single pair reused for all).  Returns ``(LossBreakdown, grads)`` where
    ``grads`` matches :meth:`DetectionHead.backward`.
    """
    n_layers = len(groups[0].cls)
    if isinstance(assignment, tuple):
        assignment = [assignment] * n_layers
    gt_params = encode_boxes(gt) if gt else np.zeros((0, N_PARAMS))
    gt_labels = np.array([b.label for b in gt], dtype=int)
    n_norm = max(len(gt), 1)
    cls_t = box_t = vel_t = dn_t = 0.0
    grads = []
    g0 = groups[0]
    dcls, dpar = [], []
    for li in range(n_layers):
        (lc, lb, lv), (dc, dp) = _group_loss(g0.cls[li], g0.params[li], assignment[li], gt_params,
                                             gt_labels, n_norm, cfg)
        cls_t += lc
        box_t += lb
        vel_t += lv
        dcls.append(dc)
        dpar.append(dp)
    grads.append((dcls, dpar))
    for gi, gp in enumerate(groups[1:]):
        sel = np.flatnonzero(dn.group == gi)
        idx = (np.arange(len(sel)), dn.src[sel])
        dcls, dpar = [], []
        for li in range(n_layers):
            (lc, lb, lv), (dc, dp) = _group_loss(gp.cls[li], gp.params[li], idx, gt_params, gt_labels,
                                                 n_norm, cfg)
            dn_t += lc + lb + lv
            dcls.append(dc)
            dpar.append(dp)
        grads.append((dcls, dpar))
    total = cls_t + box_t + vel_t + dn_t
    return LossBreakdown(total, cls_t, box_t, vel_t, dn_t), grads


def match_layers(groups: list[GroupPrediction], gt: list[Box3D], w: CostWeights = CostWeights()):
    """Independent Hungarian assignment for every decoder layer of the matched set."""
    g0 = groups[0]
    return [hungarian_match(c, p, gt, w) for c, p in zip(g0.cls, g0.params)]


# ---------------------------------------------------------------------------
# detections file: '#' header, then one line per box
#   label score x y z w l h yaw vx vy


def save_detections(path: str | Path, boxes: list[Box3D]) -> None:
    lines = ["# label score x y z w l h yaw vx vy"]
    for b in boxes:
        v = b.velocity if b.velocity is not None else (float("nan"), float("nan"))
        vals = [b.score, *b.center, *b.size, b.yaw, *v]
        lines.append(f"{b.label} " + " ".join(repr(float(x)) for x in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def load_detections(path: str | Path) -> list[Box3D]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        tok = line.split()
        v = [float(t) for t in tok[1:]]
        vel = None if math.isnan(v[8]) else (v[8], v[9])
        out.append(Box3D(tuple(v[1:4]), tuple(v[4:7]), v[7], vel, int(tok[0]), v[0]))
    return out
