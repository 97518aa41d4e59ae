"""Central-difference gradient checks for every learned stage.

Each stage builds a small instance, moves all weights to a generic random
point (zero-initialised projections would make many checks trivial),
reduces the output with a fixed random projection and compares the
hand-written backward against central differences.
"""
from __future__ import annotations

import numpy as np

from .attention import (DeformAttnParams, MultiHeadAttention, ReferencePoints, deform_attn_backward,
                        deform_attn_forward, record_sample_cells)
from .branches import DepthBranch, DepthFeatures, ImageBackboneStub, ImageFeatures, LidarBranch
from .geometry import BevGrid, CameraRig, DepthBinSpec, LidarFrame
from .head import Box3D, DetectionHead, HeadConfig, detection_loss, make_denoising_queries, match_layers
from .mmfe import ModalInputs, MmfeConfig, MultiModalEncoder
from .numerics import (FFN, Conv, GradCheckReport, Layer, LayerNorm, Linear, Tensor, finite_difference_check,
                       interp, interp_backward, softmax, softmax_backward)
from .tfe import TemporalConfig, TemporalEncoder

STEP = 1e-5


def _jitter(layer: Layer, rng, scale: float = 0.1) -> None:
    for p in layer.params():
        p.data += rng.normal(0.0, scale, p.shape)


def _merge(reports: list[GradCheckReport]) -> GradCheckReport:
    worst = max(reports, key=lambda r: r.max_rel_err)
    return GradCheckReport(max(r.max_abs_err for r in reports), worst.max_rel_err, worst.worst_index,
                           worst.step, sum(r.n_checked for r in reports), sum(r.n_total for r in reports),
                           worst.worst_name, n_skipped=sum(r.n_skipped for r in reports))


def _check(f, tensors: dict[str, Tensor], max_coords, seed) -> GradCheckReport:
    """Probes whose deformable samples change cells straddle a kink and are skipped."""
    last: list = [np.zeros(0, dtype=np.int64)]

    def traced():
        with record_sample_cells() as log:
            val = f()
        last[0] = np.concatenate(log) if log else np.zeros(0, dtype=np.int64)
        return val

    return finite_difference_check(traced, tensors, STEP, max_coords=max_coords, seed=seed,
                                   region=lambda: last[0])


def check_numerics(seed: int = 0, max_coords: int | None = 40) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    reps = []
    # linear -> layer norm -> FFN (tanh-GELU) -> softmax
    lin, ln, ffn = Linear(5, 8, rng), LayerNorm(8), FFN(8, 12, rng)
    for m in (lin, ln, ffn):
        _jitter(m, rng, 0.3)
    x = Tensor(rng.normal(size=(6, 5)))
    R = rng.normal(size=(6, 8))

    def run():
        a, ca = lin.forward(x.data)
        b, cb = ln.forward(a)
        c, cc = ffn.forward(b)
        s = softmax(c)
        return a, b, c, s, (ca, cb, cc)

    def f():
        return float((run()[3] * R).sum())

    for m in (lin, ln, ffn):
        m.zero_grad()
    x.zero_grad()
    a, b, c, s, (ca, cb, cc) = run()
    dc = softmax_backward(R, s)
    x.grad += lin.backward(ln.backward(ffn.backward(dc, cc), cb), ca)
    tensors = {"x": x, **lin.named_params("lin."), **ln.named_params("ln."), **ffn.named_params("ffn.")}
    reps.append(_check(f, tensors, max_coords, seed))
    # 2-D and 3-D convolution, strided and padded
    for nd, stride in ((2, 2), (3, 1)):
        conv = Conv(3, 4, 3, nd, rng, stride=stride)
        _jitter(conv, rng)
        xin = Tensor(rng.normal(size=(3,) + (5,) * nd))
        y, cc = conv.forward(xin.data)
        Ry = rng.normal(size=y.shape)
        conv.zero_grad()
        xin.grad[...] = conv.backward(Ry, cc)
        reps.append(_check(lambda: float((conv.forward(xin.data)[0] * Ry).sum()),
                           {"x": xin, **conv.named_params(f"conv{nd}d.")}, max_coords, seed))
    # multilinear sampling w.r.t. volume and location
    for nd in (2, 3):
        vol = Tensor(rng.normal(size=(3,) + (4,) * nd))
        loc = Tensor(rng.uniform(-0.7, 3.7, size=(9, nd)))
        Rs = rng.normal(size=(9, 3))
        dv, dl = interp_backward(Rs, vol.data, loc.data)
        vol.grad[...] = dv
        loc.grad[...] = dl
        reps.append(_check(lambda: float((interp(vol.data, loc.data) * Rs).sum()),
                           {f"vol{nd}": vol, f"loc{nd}": loc}, max_coords, seed))
    # dense multi-head attention
    mha = MultiHeadAttention(8, 2, rng)
    _jitter(mha, rng)
    qk, v = Tensor(rng.normal(size=(5, 8))), Tensor(rng.normal(size=(5, 8)))
    Ro = rng.normal(size=(5, 8))
    out, cm = mha.forward(qk.data, v.data)
    mha.zero_grad()
    dqk, dv = mha.backward(Ro, cm)
    qk.grad[...] = dqk
    v.grad[...] = dv
    reps.append(_check(lambda: float((mha.forward(qk.data, v.data)[0] * Ro).sum()),
                       {"qk": qk, "v": v, **mha.named_params("mha.")}, max_coords, seed))
    return _merge(reps)


def check_deform_attn(dim: int = 2, seed: int = 0, max_coords: int | None = 40) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    S = (5, 6) if dim == 2 else (3, 4, 5)
    p = DeformAttnParams(8, 2, 3, dim, 5, rng)
    _jitter(p, rng, 0.3)
    N, R, B = 6, 2, 2
    q = Tensor(rng.normal(size=(N, 8)))
    loc = Tensor(rng.uniform(0.2, min(S) - 1.2, size=(N, R, dim)))
    valid = rng.uniform(size=(N, R)) < 0.8
    bank = rng.integers(0, B, size=(N, R))
    scale = np.where(valid, rng.uniform(0.3, 1.0, size=(N, R)), 0.0)
    vals = Tensor(rng.normal(size=(B,) + S + (5,)))
    Ro = rng.normal(size=(N, 8))

    def refs():
        return ReferencePoints(loc.data, valid, bank=bank, scale=scale)

    out, cache = deform_attn_forward(q.data, refs(), vals.data, p)
    p.zero_grad()
    dq, dv, dl = deform_attn_backward(Ro, cache, p)
    q.grad[...], vals.grad[...], loc.grad[...] = dq, dv, dl
    f = lambda: float((deform_attn_forward(q.data, refs(), vals.data, p)[0] * Ro).sum())
    return _check(f, {"q": q, "values": vals, "loc": loc, **p.named_params("attn.")}, max_coords, seed)


def small_world(seed: int = 0):
    """An 8x8 BEV grid with a coarse voxel frame, two cameras and random features."""
    rng = np.random.default_rng(seed)
    grid = BevGrid(8, 8, (-16.0, 16.0, -16.0, 16.0), (0.0, 0.6, 1.2, 1.8))
    frame = LidarFrame(np.eye(4), (-16.0, -16.0, -1.0), 4.0, (2, 8, 8))
    rig = CameraRig.symmetric(2, (24, 48))
    bins = DepthBinSpec(tuple(np.arange(1.0, 34.0, 4.0)))
    image = ImageFeatures([rng.normal(size=(2, 6, 12, 24)), rng.normal(size=(2, 6, 6, 12))], (2, 4))
    depth = DepthFeatures(rng.normal(size=(2, 5, bins.num_bins, 12, 24)), None, bins)
    lidar = rng.normal(size=(7, 2, 8, 8))
    return grid, ModalInputs(lidar, frame, image, depth, rig), rng


def check_mmfe(seed: int = 0, max_coords: int | None = 5, layers: int = 2) -> GradCheckReport:
    grid, inputs, rng = small_world(seed)
    cfg = MmfeConfig(num_layers=layers, embed_dim=16, modality_order=("points", "image", "depth"))
    enc = MultiModalEncoder(cfg, grid, {"points": 7, "image": 6, "depth": 5}, rng)
    _jitter(enc, rng)
    R = rng.normal(size=(16, grid.H, grid.W))
    _, cache = enc.forward(inputs)
    enc.zero_grad()
    d = enc.backward(R, cache)
    lid, img, dep = Tensor(inputs.lidar), Tensor(inputs.image.levels[0]), Tensor(inputs.depth.grids)
    # the tensors share memory with the inputs, so perturbations reach the encoder
    inputs.lidar, inputs.image.levels[0], inputs.depth.grids = lid.data, img.data, dep.data
    lid.grad[...], img.grad[...], dep.grad[...] = d["points"], d["image"], d["depth"]
    f = lambda: float((enc.forward(inputs)[0] * R).sum())
    return _check(f, {"in.points": lid, "in.image": img, "in.depth": dep, **enc.named_params()},
                  max_coords, seed)


def check_tfe(seed: int = 0, max_coords: int | None = 10, frames: int = 3) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    grid = BevGrid(8, 8, (-16.0, 16.0, -16.0, 16.0))
    te = TemporalEncoder(TemporalConfig(num_layers=1, frames=frames), grid, 16, rng=rng)
    _jitter(te, rng)
    maps = [rng.normal(size=(16, 8, 8)) for _ in range(frames)]
    cur = Tensor(maps[0])
    maps[0] = cur.data
    R = rng.normal(size=(16, 8, 8))
    _, c = te.forward(maps)
    te.zero_grad()
    cur.grad[...] = te.backward(R, c)
    f = lambda: float((te.forward(maps)[0] * R).sum())
    return _check(f, {"current": cur, **te.named_params()}, max_coords, seed)


def check_head(seed: int = 0, max_coords: int | None = 6) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    grid = BevGrid(8, 8, (-8.0, 8.0, -8.0, 8.0))
    cfg = HeadConfig(num_queries=6, num_layers=2, num_classes=3)
    head = DetectionHead(cfg, grid, 16, rng)
    _jitter(head, rng)
    for layer in head.layers:
        layer.cls.b.data[:] = rng.normal(0.0, 0.5, layer.cls.b.shape)
    head.ref.data += rng.uniform(0.1, 0.4, head.ref.shape)
    bev = Tensor(rng.normal(size=(16, 8, 8)))
    gt = [Box3D((1.3, -2.1, 0.2), (1.5, 3.0, 1.2), 0.4, (1.0, 0.5), 1),
          Box3D((-3.3, 2.6, 0.1), (0.8, 0.9, 1.7), -1.0, None, 2)]
    dn = make_denoising_queries(gt, grid, 1.0, 2, np.random.default_rng(seed + 1))
    groups, cache = head.forward(bev.data, dn)
    assign = match_layers(groups, gt, cfg.cost)
    _, grads = detection_loss(groups, gt, assign, cfg, dn)
    head.zero_grad()
    bev.grad[...] = head.backward(grads, cache)

    def f():
        return detection_loss(head.forward(bev.data, dn)[0], gt, assign, cfg, dn)[0].total

    return _check(f, {"bev": bev, **head.named_params()}, max_coords, seed)


def check_depth(seed: int = 0, max_coords: int | None = 20) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    bins = DepthBinSpec(tuple(np.arange(1.0, 12.0, 2.0)))
    branch = DepthBranch(4, bins, 3, 4, rng)
    _jitter(branch, rng)
    x = Tensor(rng.normal(size=(2, 4, 5, 6)))
    feats = ImageFeatures([x.data], (2,))
    out, c = branch.forward(feats)
    R = rng.normal(size=out.grids.shape)
    branch.zero_grad()
    x.grad[...] = branch.backward(R, c)
    f = lambda: float((branch.forward(feats)[0].grids * R).sum())
    return _check(f, {"features": x, **branch.named_params()}, max_coords, seed)


def check_branches(seed: int = 0, max_coords: int | None = 20) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    reps = []
    frame = LidarFrame(np.eye(4), (-8.0, -8.0, -1.0), 2.0, (2, 8, 8))
    for form in ("voxel", "bev"):
        lb = LidarBranch(frame, 3, 4, rng, form)
        _jitter(lb, rng)
        raw = Tensor(rng.normal(size=(5, 2, 8, 8)))
        y, c = lb.forward(raw.data)
        R = rng.normal(size=y.shape)
        lb.zero_grad()
        raw.grad[...] = lb.backward(R, c)
        reps.append(_check(lambda: float((lb.forward(raw.data)[0] * R).sum()),
                           {"raw": raw, **lb.named_params(f"lidar_{form}.")}, max_coords, seed))
    bb = ImageBackboneStub(4, rng, 2, 3)
    _jitter(bb, rng)
    img = Tensor(rng.normal(size=(2, 3, 8, 12)))
    feats, c = bb.forward(img.data)
    Rs = [rng.normal(size=lv.shape) for lv in feats.levels]
    bb.zero_grad()
    img.grad[...] = bb.backward(Rs, c)
    f = lambda: float(sum((lv * r).sum() for lv, r in zip(bb.forward(img.data)[0].levels, Rs)))
    reps.append(_check(f, {"images": img, **bb.named_params("backbone.")}, max_coords, seed))
    return _merge(reps)


STAGES = {
    "numerics": check_numerics,
    "attn2d": lambda seed=0: check_deform_attn(2, seed),
    "attn3d": lambda seed=0: check_deform_attn(3, seed),
    "branches": check_branches,
    "depth": check_depth,
    "mmfe": check_mmfe,
    "tfe": check_tfe,
    "head": check_head,
}


def run_suite(names=None, seed: int = 0) -> dict[str, GradCheckReport]:
    names = list(STAGES) if names is None else list(names)
    return {n: STAGES[n](seed=seed) for n in names}
