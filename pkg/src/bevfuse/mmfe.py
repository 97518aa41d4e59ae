"""Multi-modal fusion encoder over a BEV query lattice.

Each layer runs pre-norm residual sublayers: deformable self-attention,
then one cross-attention per active modality in the configured order, then
an FFN.  A masked modality's sublayer is skipped outright, which makes the
layer identical to one built without it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import (ConfigError, DeformAttnParams, ReferencePoints, deform_attn_backward,
                        deform_attn_forward)
from .branches import DepthFeatures, ImageFeatures
from .geometry import (BevGrid, CameraRig, DepthBinSpec, LidarFrame, make_reference_points_3d,
                       project_to_camera, project_to_frustum, project_to_lidar_bev, project_to_voxel)
from .numerics import FFN, Layer, LayerNorm, Tensor

MODALITIES = ("points", "image", "depth")


class InputError(ValueError):
    pass


@dataclass
class MmfeConfig:
    num_layers: int = 6
    embed_dim: int = 32
    heads: int = 4
    points_per_head: int = 4
    modality_order: tuple[str, ...] = ("points", "image")
    modality_mask: frozenset = frozenset()
    lidar_form: str = "voxel"
    image_level: int = 0
    ffn_ratio: int = 4

    def __post_init__(self):
        self.modality_order = tuple(self.modality_order)
        self.modality_mask = frozenset(self.modality_mask)
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if len(set(self.modality_order)) != len(self.modality_order):
            raise ConfigError(f"modality listed twice in {self.modality_order}")
        unknown = set(self.modality_order) - set(MODALITIES)
        if unknown:
            raise ConfigError(f"unknown modalities {sorted(unknown)}")
        if self.lidar_form not in ("bev", "voxel"):
            raise ConfigError(f"lidar_form must be 'bev' or 'voxel', got {self.lidar_form!r}")
        if not self.active:
            raise ConfigError("every modality is masked")

    @property
    def active(self) -> tuple[str, ...]:
        return tuple(m for m in self.modality_order if m not in self.modality_mask)


@dataclass
class ModalInputs:
    """Features handed to the encoder.

    ``lidar`` is channel-first: ``[C, Z, H, W]`` voxels or ``[C, H, W]`` BEV.
    """

    lidar: np.ndarray | None = None
    lidar_frame: LidarFrame | None = None
    image: ImageFeatures | None = None
    depth: DepthFeatures | None = None
    rig: CameraRig | None = None


def sinusoidal_2d(rows: np.ndarray, cols: np.ndarray, dim: int, temperature: float = 10000.0) -> np.ndarray:
    """Fixed encoding of continuous ``(row, col)``; half the channels each."""
    if dim % 4:
        raise ConfigError("positional encoding dim must be a multiple of 4")
    quarter = dim // 4
    freq = 1.0 / temperature ** (np.arange(quarter) / quarter)
    parts = []
    for coord in (rows, cols):
        ang = np.asarray(coord, dtype=np.float64)[:, None] * freq[None, :]
        parts += [np.sin(ang), np.cos(ang)]
    return np.concatenate(parts, axis=1)


def sinusoidal_2d_backward(dpos: np.ndarray, rows: np.ndarray, cols: np.ndarray,
                           temperature: float = 10000.0) -> np.ndarray:
    """Gradient of :func:`sinusoidal_2d` w.r.t. ``(row, col)``, shape ``[N, 2]``."""
    quarter = dpos.shape[1] // 4
    freq = 1.0 / temperature ** (np.arange(quarter) / quarter)
    out = np.zeros((dpos.shape[0], 2))
    for k, coord in enumerate((rows, cols)):
        ang = np.asarray(coord, dtype=np.float64)[:, None] * freq[None, :]
        ds = dpos[:, 2 * k * quarter:(2 * k + 1) * quarter]
        dc = dpos[:, (2 * k + 1) * quarter:(2 * k + 2) * quarter]
        out[:, k] = ((ds * np.cos(ang) - dc * np.sin(ang)) * freq).sum(axis=1)
    return out


@dataclass
class BevQueries:
    Q: Tensor
    pos_enc: np.ndarray
    grid: BevGrid

    def initial(self) -> np.ndarray:
        return self.Q.data + self.pos_enc


def init_bev_queries(grid: BevGrid, C: int, rng: np.random.Generator | None = None,
                     std: float = 0.02) -> BevQueries:
    rng = rng if rng is not None else np.random.default_rng(0)
    n = np.arange(grid.num_cells)
    pos = sinusoidal_2d(n // grid.W, n % grid.W, C)
    return BevQueries(Tensor(rng.normal(0.0, std, size=(grid.num_cells, C))), pos, grid)


# ---------------------------------------------------------------------------
# reference points per modality


def self_refs(grid: BevGrid) -> ReferencePoints:
    n = np.arange(grid.num_cells)
    loc = np.stack([n // grid.W, n % grid.W], axis=1).astype(np.float64)
    return ReferencePoints(loc, np.ones(len(n), dtype=bool))


def lidar_bev_refs(grid: BevGrid, frame: LidarFrame) -> ReferencePoints:
    return project_to_lidar_bev(grid.cell_centers(), frame)


def lidar_voxel_refs(grid: BevGrid, frame: LidarFrame) -> ReferencePoints:
    return project_to_voxel(make_reference_points_3d(grid), frame)


def _multiview_refs(per_cam: list[ReferencePoints]) -> ReferencePoints:
    """Stack per-camera references and weight each query by 1/|V_hit|."""
    loc = np.concatenate([r.loc for r in per_cam], axis=1)
    valid = np.concatenate([r.valid for r in per_cam], axis=1)
    bank = np.concatenate([r.bank for r in per_cam], axis=1)
    n_hit = np.stack([r.valid.any(axis=1) for r in per_cam], axis=1).sum(axis=1)
    scale = np.broadcast_to((1.0 / np.maximum(n_hit, 1))[:, None], valid.shape)
    return ReferencePoints(loc, valid, bank=bank, scale=scale)


def image_refs(grid: BevGrid, rig: CameraRig, level: int) -> ReferencePoints:
    pts = make_reference_points_3d(grid)
    return _multiview_refs([project_to_camera(pts, rig, j, level)[0] for j in range(rig.num_cams)])


def depth_refs(grid: BevGrid, rig: CameraRig, bins: DepthBinSpec, level: int) -> ReferencePoints:
    pts = make_reference_points_3d(grid)
    return _multiview_refs([project_to_frustum(pts, rig, j, bins, level)[0] for j in range(rig.num_cams)])


def hit_counts(refs: ReferencePoints, n_cams: int) -> np.ndarray:
    """``|V_hit|`` per query for a multi-view reference set."""
    return np.stack([(refs.valid & (refs.bank == j)).any(axis=1) for j in range(n_cams)], axis=1).sum(axis=1)


def frame_key(fr: LidarFrame) -> tuple:
    return (fr.T_ego_lidar.tobytes(), tuple(fr.origin), fr.voxel_size, fr.dims)


def rig_key(rig: CameraRig) -> tuple:
    return (tuple(k.tobytes() for k in rig.K), tuple(t.tobytes() for t in rig.T_ego_cam),
            rig.image_hw, rig.feature_strides)


# ---------------------------------------------------------------------------
# sublayers


class AttnSublayer(Layer):
    """``x + DefAttn(LN(x), refs, volume)``."""

    def __init__(self, C: int, heads: int, points: int, dim: int, value_dim: int, rng,
                 zero_output: bool = False):
        self.norm = LayerNorm(C)
        self.attn = DeformAttnParams(C, heads, points, dim, value_dim, rng, zero_output=zero_output)

    def increment(self, x, refs, volume):
        h, cn = self.norm.forward(x)
        y, ca = deform_attn_forward(h, refs, volume, self.attn)
        return y, (cn, ca)

    def increment_backward(self, dy, cache):
        cn, ca = cache
        dh, dvol, _ = deform_attn_backward(dy, ca, self.attn)
        return self.norm.backward(dh, cn), dvol


class SelfAttnSublayer(Layer):
    """Deformable self-attention: the normalized queries are also the value map."""

    def __init__(self, C: int, heads: int, points: int, rng, zero_output: bool = False):
        self.norm = LayerNorm(C)
        self.attn = DeformAttnParams(C, heads, points, 2, C, rng, zero_output=zero_output)

    def increment(self, x, refs, grid: BevGrid):
        h, cn = self.norm.forward(x)
        y, ca = deform_attn_forward(h, refs, h.reshape(1, grid.H, grid.W, -1), self.attn)
        return y, (cn, ca)

    def increment_backward(self, dy, cache):
        cn, ca = cache
        dh, dvol, _ = deform_attn_backward(dy, ca, self.attn)
        return self.norm.backward(dh + dvol.reshape(dh.shape), cn)


class FFNSublayer(Layer):
    def __init__(self, C: int, hidden: int, rng, zero_output: bool = False):
        self.norm = LayerNorm(C)
        self.ffn = FFN(C, hidden, rng, zero_out=zero_output)

    def increment(self, x):
        h, cn = self.norm.forward(x)
        y, cf = self.ffn.forward(h)
        return y, (cn, cf)

    def increment_backward(self, dy, cache):
        cn, cf = cache
        return self.norm.backward(self.ffn.backward(dy, cf), cn)


class MmfeLayer(Layer):
    def __init__(self, cfg: MmfeConfig, value_dims: dict[str, int], rng, zero_init: bool = False):
        C = cfg.embed_dim
        self.self_attn = SelfAttnSublayer(C, cfg.heads, cfg.points_per_head, rng, zero_init)
        self.cross = {}
        for m in cfg.modality_order:
            dim = 3 if (m == "depth" or (m == "points" and cfg.lidar_form == "voxel")) else 2
            self.cross[m] = AttnSublayer(C, cfg.heads, cfg.points_per_head, dim, value_dims[m], rng, zero_init)
        self.ffn = FFNSublayer(C, cfg.ffn_ratio * C, rng, zero_init)


def _channel_last(vol: np.ndarray, spatial: int) -> np.ndarray:
    if vol.ndim == spatial + 1:
        vol = vol[None]
    return np.ascontiguousarray(np.moveaxis(vol, 1, -1))


def _channel_first(dvol: np.ndarray, like: np.ndarray) -> np.ndarray:
    out = np.moveaxis(dvol, -1, 1)
    return out.reshape(like.shape)


class MultiModalEncoder(Layer):
    """Stack of :class:`MmfeLayer` producing a fused ``[C, H, W]`` BEV map."""

    def __init__(self, cfg: MmfeConfig, grid: BevGrid, value_dims: dict[str, int], rng=None,
                 zero_init: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.grid = grid
        self.queries = init_bev_queries(grid, cfg.embed_dim, rng)
        self.Q = self.queries.Q
        self.layers = [MmfeLayer(cfg, value_dims, rng, zero_init) for _ in range(cfg.num_layers)]
        self.final_norm = LayerNorm(cfg.embed_dim)
        self._ref_cache: dict = {}

    # reference sets only depend on geometry; keep them across calls
    def _refs(self, key, build):
        if key not in self._ref_cache:
            self._ref_cache[key] = build()
        return self._ref_cache[key]

    def modality_refs(self, m: str, inputs: ModalInputs) -> ReferencePoints:
        g, cfg = self.grid, self.cfg
        if m == "points":
            fr = inputs.lidar_frame
            key = ("points", cfg.lidar_form, frame_key(fr))
            build = (lambda: lidar_voxel_refs(g, fr)) if cfg.lidar_form == "voxel" else (lambda: lidar_bev_refs(g, fr))
            return self._refs(key, build)
        rig = inputs.rig
        if m == "image":
            return self._refs(("image", rig_key(rig)), lambda: image_refs(g, rig, cfg.image_level))
        bins = inputs.depth.bins
        return self._refs(("depth", rig_key(rig), bins.edges),
                          lambda: depth_refs(g, rig, bins, cfg.image_level))

    def _volume(self, m: str, inputs: ModalInputs) -> np.ndarray:
        if m == "points":
            if inputs.lidar is None or inputs.lidar_frame is None:
                raise InputError("points modality active but no LiDAR features given")
            return _channel_last(inputs.lidar, 3 if self.cfg.lidar_form == "voxel" else 2)
        if inputs.rig is None:
            raise InputError(f"{m} modality active but no camera rig given")
        if m == "image":
            if inputs.image is None:
                raise InputError("image modality active but no image features given")
            return _channel_last(inputs.image.levels[self.cfg.image_level], 2)
        if inputs.depth is None:
            raise InputError("depth modality active but no depth features given")
        return _channel_last(inputs.depth.grids, 3)

    def forward(self, inputs: ModalInputs, mask: frozenset | None = None):
        """Returns ``(bev [C, H, W], cache)``."""
        mask = self.cfg.modality_mask if mask is None else frozenset(mask)
        active = [m for m in self.cfg.modality_order if m not in mask]
        if not active:
            raise ConfigError("every modality is masked")
        grid = self.grid
        srefs = self._refs(("self",), lambda: self_refs(grid))
        vols = {m: self._volume(m, inputs) for m in active}
        refs = {m: self.modality_refs(m, inputs) for m in active}
        x = self.queries.initial()
        layer_caches = []
        for layer in self.layers:
            steps = []
            y, c = layer.self_attn.increment(x, srefs, grid)
            x = x + y
            steps.append(("self", c))
            for m in active:
                y, c = layer.cross[m].increment(x, refs[m], vols[m])
                x = x + y
                steps.append((m, c))
            y, c = layer.ffn.increment(x)
            x = x + y
            steps.append(("ffn", c))
            layer_caches.append(steps)
        out, cn = self.final_norm.forward(x)
        bev = out.T.reshape(-1, grid.H, grid.W)
        return bev, dict(layers=layer_caches, norm=cn, active=active, inputs=inputs)

    def backward(self, dbev: np.ndarray, cache) -> dict[str, np.ndarray]:
        """Accumulates weight grads; returns channel-first grads per modality volume."""
        dx = self.final_norm.backward(dbev.reshape(dbev.shape[0], -1).T, cache["norm"])
        dvols: dict[str, np.ndarray] = {}
        for layer, steps in zip(reversed(self.layers), reversed(cache["layers"])):
            for kind, c in reversed(steps):
                if kind == "ffn":
                    dx = dx + layer.ffn.increment_backward(dx, c)
                elif kind == "self":
                    dx = dx + layer.self_attn.increment_backward(dx, c)
                else:
                    dh, dvol = layer.cross[kind].increment_backward(dx, c)
                    dx = dx + dh
                    dvols[kind] = dvols[kind] + dvol if kind in dvols else dvol
        self.Q.accumulate(dx)
        inputs = cache["inputs"]
        out = {}
        for m, dv in dvols.items():
            like = {"points": inputs.lidar,
                    "image": inputs.image.levels[self.cfg.image_level] if inputs.image else None,
                    "depth": inputs.depth.grids if inputs.depth else None}[m]
            out[m] = _channel_first(dv, like)
        return out


def mmfe_forward(encoder: MultiModalEncoder, inputs: ModalInputs, mask=None) -> np.ndarray:
    return encoder.forward(inputs, mask)[0]


def sublayer_increment(encoder: MultiModalEncoder, modality: str, x: np.ndarray,
                       inputs: ModalInputs, layer: int = 0) -> np.ndarray:
    """The pre-residual cross-attention term of one sublayer (for inspection)."""
    sub = encoder.layers[layer].cross[modality]
    return sub.increment(x, encoder.modality_refs(modality, inputs), encoder._volume(modality, inputs))[0]
