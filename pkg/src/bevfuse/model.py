"""The full detector: sensor branches -> fusion encoder -> temporal encoder -> head."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import ConfigError
from .branches import DepthBranch, ImageBackboneStub, LidarBranch, PointCloud, voxelize, RAW_VOXEL_CHANNELS
from .geometry import BevGrid, CameraRig, DepthBinSpec, EgoPose, LidarFrame, align_history_bev
from .head import DetectionHead, DnQueries, HeadConfig
from .mmfe import ModalInputs, MmfeConfig, MultiModalEncoder
from .numerics import Conv, Layer, LayerNorm, gelu, gelu_backward
from .scene import IMAGE_CHANNELS, Scene
from .tfe import TemporalConcat, TemporalConfig, TemporalEncoder


@dataclass
class ModelConfig:
    bev_hw: tuple[int, int] = (32, 32)
    roi: float = 16.0
    z_anchors: tuple[float, ...] = (0.0, 0.6, 1.2, 1.8)
    voxel_size: float = 1.0
    voxel_z: tuple[float, float] = (-1.0, 3.0)
    lidar_mid: int = 8
    lidar_out: int = 16
    image_hw: tuple[int, int] = (48, 96)
    n_cams: int = 2
    image_channels: int = 16
    depth_edges: tuple[float, ...] = tuple(float(v) for v in np.arange(1.0, 26.0, 2.0))
    depth_ctx: int = 8
    depth_out: int = 8
    fusion: str = "mmfe"            # mmfe | add | concat
    mmfe: MmfeConfig = field(default_factory=lambda: MmfeConfig(num_layers=2))
    temporal: TemporalConfig = field(default_factory=lambda: TemporalConfig(num_layers=1, frames=1))
    head: HeadConfig = field(default_factory=HeadConfig)

    def __post_init__(self):
        if self.fusion not in ("mmfe", "add", "concat"):
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        self.bev_hw = tuple(self.bev_hw)
        self.image_hw = tuple(self.image_hw)

    @property
    def grid(self) -> BevGrid:
        r = self.roi
        return BevGrid(self.bev_hw[0], self.bev_hw[1], (-r, r, -r, r), self.z_anchors)

    @property
    def lidar_frame(self) -> LidarFrame:
        r = self.roi
        nz = int(round((self.voxel_z[1] - self.voxel_z[0]) / self.voxel_size))
        n = int(round(2 * r / self.voxel_size))
        return LidarFrame(np.eye(4), (-r, -r, self.voxel_z[0]), self.voxel_size, (nz, n, n))

    @property
    def rig(self) -> CameraRig:
        return CameraRig.symmetric(self.n_cams, self.image_hw)

    @property
    def bins(self) -> DepthBinSpec:
        return DepthBinSpec(self.depth_edges)

    @property
    def uses(self) -> set[str]:
        if self.fusion != "mmfe":
            return {"points", "image"}
        return set(self.mmfe.modality_order)


@dataclass
class Sample:
    """Network-ready inputs of one scene, oldest frame first."""

    raw: list[np.ndarray]           # voxelized points [5, Z, H, W] per frame
    images: list[np.ndarray]        # [n_cams, 3, h, w] per frame
    poses: list[EgoPose]
    boxes: list
    rig: CameraRig

    @property
    def labels(self) -> np.ndarray:
        return np.array([b.label for b in self.boxes], dtype=int)


def prepare(scene: Scene, cfg: ModelConfig) -> Sample:
    fr = cfg.lidar_frame
    raw = [voxelize(pc, fr).grid for pc in scene.clouds]
    return Sample(raw, list(scene.images), list(scene.poses), list(scene.boxes), scene.rig)


class Detector(Layer):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self._grid = cfg.grid
        self._frame = cfg.lidar_frame
        C = cfg.mmfe.embed_dim
        uses = cfg.uses
        form = cfg.mmfe.lidar_form if cfg.fusion == "mmfe" else "bev"
        lid_out = cfg.lidar_out if cfg.fusion == "mmfe" else C
        self.lidar = LidarBranch(self._frame, cfg.lidar_mid, lid_out, rng, form) if "points" in uses else None
        need_img = bool(uses & {"image", "depth"})
        self.backbone = ImageBackboneStub(cfg.image_channels, rng, 2, IMAGE_CHANNELS) if need_img else None
        self.depth = (DepthBranch(cfg.image_channels, cfg.bins, cfg.depth_ctx, cfg.depth_out, rng,
                                  cfg.mmfe.image_level) if "depth" in uses else None)
        dims = {"points": lid_out, "image": cfg.image_channels, "depth": cfg.depth_out}
        if cfg.fusion == "mmfe":
            self.encoder = MultiModalEncoder(cfg.mmfe, self._grid, dims, rng)
            self.fuse = None
        else:
            cam_cfg = MmfeConfig(cfg.mmfe.num_layers, C, cfg.mmfe.heads, cfg.mmfe.points_per_head, ("image",),
                                 image_level=cfg.mmfe.image_level)
            self.encoder = MultiModalEncoder(cam_cfg, self._grid, dims, rng)
            self.fuse = Conv(C if cfg.fusion == "add" else 2 * C, C, 3, 2, rng)
            self.fuse_norm = LayerNorm(C)
        t = cfg.temporal
        self.temporal = None
        if t.frames > 1:
            self.temporal = (TemporalEncoder(t, self._grid, C, cfg.mmfe.heads, cfg.mmfe.points_per_head, rng)
                             if t.method == "attention" else TemporalConcat(t, C, rng))
        self.head = DetectionHead(cfg.head, self._grid, C, rng)

    @property
    def grid(self) -> BevGrid:
        return self._grid

    # ------------------------------------------------------------------
    def encode_frame(self, raw: np.ndarray, images: np.ndarray, rig: CameraRig, mask=frozenset()):
        """Single-frame fused BEV map ``[C, H, W]`` and the cache for :meth:`backward_frame`."""
        cfg = self.cfg
        mask = frozenset(mask)
        c = {}
        inputs = ModalInputs(rig=rig, lidar_frame=self._frame)
        if self.lidar is not None and "points" not in mask:
            inputs.lidar, c["lidar"] = self.lidar.forward(raw)
        if self.backbone is not None and not ({"image", "depth"} & self.cfg.uses) <= mask:
            inputs.image, c["backbone"] = self.backbone.forward(images)
            if self.depth is not None and "depth" not in mask:
                inputs.depth, c["depth"] = self.depth.forward(inputs.image)
        if self.fuse is None:
            bev, c["encoder"] = self.encoder.forward(inputs, mask)
            return bev, c
        # baseline: camera-only encoder, then add / concat with the LiDAR BEV map
        C = cfg.mmfe.embed_dim
        H, W = self._grid.H, self._grid.W
        img_bev = np.zeros((C, H, W))
        if "image" not in mask:
            img_bev, c["encoder"] = self.encoder.forward(inputs)
        lid_bev = inputs.lidar if inputs.lidar is not None else np.zeros((C, H, W))
        x = img_bev + lid_bev if cfg.fusion == "add" else np.concatenate([lid_bev, img_bev])
        y, c["fuse"] = self.fuse.forward(x)
        a = gelu(y)
        flat, c["fuse_norm"] = self.fuse_norm.forward(a.reshape(C, -1).T)
        c["fuse_pre"] = y
        return flat.T.reshape(C, H, W), c

    def backward_frame(self, dbev: np.ndarray, c) -> None:
        cfg = self.cfg
        dvols: dict[str, np.ndarray] = {}
        if self.fuse is None:
            dvols = self.encoder.backward(dbev, c["encoder"])
        else:
            C = cfg.mmfe.embed_dim
            da = self.fuse_norm.backward(dbev.reshape(C, -1).T, c["fuse_norm"]).T.reshape(dbev.shape)
            dx = self.fuse.backward(gelu_backward(da, c["fuse_pre"]), c["fuse"])
            d_img, d_lid = (dx, dx) if cfg.fusion == "add" else (dx[C:], dx[:C])
            if "encoder" in c:
                dvols = self.encoder.backward(d_img, c["encoder"])
            if "lidar" in c:
                dvols["points"] = d_lid
        if "lidar" in c and "points" in dvols:
            self.lidar.backward(dvols["points"], c["lidar"])
        if "backbone" in c:
            lvl = cfg.mmfe.image_level
            dlevels: list = [None, None]
            if "image" in dvols:
                dlevels[lvl] = dvols["image"]
            if "depth" in c and "depth" in dvols:
                dd = self.depth.backward(dvols["depth"], c["depth"])
                dlevels[lvl] = dd if dlevels[lvl] is None else dlevels[lvl] + dd
            if any(d is not None for d in dlevels):
                self.backbone.backward(dlevels, c["backbone"])

    # ------------------------------------------------------------------
    def forward(self, sample: Sample, dn: DnQueries | None = None, mask=frozenset()):
        """Returns ``(head groups, cache)``; history frames are encoded without gradient."""
        bev, c_frame = self.encode_frame(sample.raw[-1], sample.images[-1], sample.rig, mask)
        cache = dict(frame=c_frame)
        if self.temporal is not None:
            frames = self.temporal_frames(bev, sample, mask)
            bev, cache["temporal"] = self.temporal.forward(frames)
        groups, cache["head"] = self.head.forward(bev, dn)
        cache["bev"] = bev
        return groups, cache

    def temporal_frames(self, current: np.ndarray, sample: Sample, mask=frozenset()) -> list[np.ndarray]:
        t = self.cfg.temporal
        out = [current]
        n_hist = min(t.frames - 1, len(sample.raw) - 1)
        now = sample.poses[-1]
        for k in range(1, n_hist + 1):
            hist, _ = self.encode_frame(sample.raw[-1 - k], sample.images[-1 - k], sample.rig, mask)
            out.append(align_history_bev(hist, sample.poses[-1 - k], now, self._grid))
        return out

    def backward(self, grads, cache) -> None:
        dbev = self.head.backward(grads, cache["head"])
        if self.temporal is not None:
            dbev = self.temporal.backward(dbev, cache["temporal"])
        self.backward_frame(dbev, cache["frame"])

    def bev(self, sample: Sample, mask=frozenset()) -> np.ndarray:
        bev, _ = self.encode_frame(sample.raw[-1], sample.images[-1], sample.rig, mask)
        if self.temporal is not None:
            bev, _ = self.temporal.forward(self.temporal_frames(bev, sample, mask))
        return bev


def empty_sample(cfg: ModelConfig, frames: int = 1) -> Sample:
    """All-missing inputs: no points, black images."""
    fr = cfg.lidar_frame
    raw = voxelize(PointCloud(), fr).grid
    rig = cfg.rig
    img = np.zeros((rig.num_cams, IMAGE_CHANNELS) + rig.image_hw)
    poses = [EgoPose.planar(k, 0.0, 0.0, 0.0) for k in range(frames)]
    return Sample([raw] * frames, [img] * frames, poses, [], rig)
