"""Per-modality feature producers: LiDAR voxels/BEV, image pyramid, depth frustum."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import DepthBinSpec, LidarFrame
from .numerics import Conv, Layer, ShapeError, gelu, gelu_backward, softmax, softmax_backward

RAW_VOXEL_CHANNELS = 5  # dx, dy, dz (in voxel units), intensity, occupancy


@dataclass
class PointCloud:
    """``points [N, 4]``: x, y, z (meters, LiDAR frame), intensity."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class VoxelizeResult:
    grid: np.ndarray          # [C_raw, Z, H_v, W_v]
    counts: np.ndarray        # [Z, H_v, W_v] points per voxel
    rejected: int             # non-finite points
    outside: int              # finite points outside the grid


def voxelize(pc: PointCloud, frame: LidarFrame) -> VoxelizeResult:
    """Mean-pool per-point encodings into the frame's voxel grid.

    Points are binned by ``floor((p - origin) / voxel_size)``; empty voxels
    stay zero.  Non-finite points are dropped and counted in ``rejected``.
    """
    Z, Hv, Wv = frame.dims
    pts = pc.points
    finite = np.all(np.isfinite(pts), axis=1)
    pts = pts[finite]
    rel = (pts[:, :3] - np.asarray(frame.origin)) / frame.voxel_size
    idx = np.floor(rel).astype(np.int64)
    inside = ((idx[:, 0] >= 0) & (idx[:, 0] < Hv) & (idx[:, 1] >= 0) & (idx[:, 1] < Wv)
              & (idx[:, 2] >= 0) & (idx[:, 2] < Z))
    rel, idx, pts = rel[inside], idx[inside], pts[inside]
    enc = np.concatenate([rel - idx - 0.5, pts[:, 3:4], np.ones((len(pts), 1))], axis=1)
    flat = (idx[:, 2] * Hv + idx[:, 0]) * Wv + idx[:, 1]
    n_vox = Z * Hv * Wv
    counts = np.bincount(flat, minlength=n_vox).astype(np.float64)
    sums = np.stack([np.bincount(flat, weights=enc[:, c], minlength=n_vox)
                     for c in range(RAW_VOXEL_CHANNELS)]).astype(np.float64)
    mean = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    return VoxelizeResult(mean.reshape(RAW_VOXEL_CHANNELS, Z, Hv, Wv), counts.reshape(Z, Hv, Wv),
                          rejected=int((~finite).sum()), outside=int((~inside).sum()))


@dataclass
class VoxelFeatures:
    grid: np.ndarray  # [C, Z, H_v, W_v]
    frame: LidarFrame


@dataclass
class LidarBevFeatures:
    map: np.ndarray   # [C_bev, H_v, W_v]
    frame: LidarFrame


class VoxelEncoder(Layer):
    """Dense stand-in for a sparse 3-D conv backbone: conv3d-GELU-conv3d."""

    def __init__(self, c_in: int, c_mid: int, c_out: int, rng, stride: int = 1):
        self.conv1 = Conv(c_in, c_mid, 3, 3, rng)
        self.conv2 = Conv(c_mid, c_out, 3, 3, rng, stride=stride)

    def forward(self, raw):
        h, c1 = self.conv1.forward(raw)
        y, c2 = self.conv2.forward(gelu(h))
        return y, (c1, h, c2)

    def backward(self, dy, cache):
        c1, h, c2 = cache
        return self.conv1.backward(gelu_backward(self.conv2.backward(dy, c2), h), c1)


def fold_z(grid: np.ndarray) -> np.ndarray:
    """``[C, Z, H, W] -> [C*Z, H, W]``; output channel ``c*Z + z``."""
    C, Z, H, W = grid.shape
    return grid.reshape(C * Z, H, W)


def unfold_z(bev: np.ndarray, Z: int) -> np.ndarray:
    CZ, H, W = bev.shape
    if CZ % Z:
        raise ShapeError(f"{CZ} channels not divisible by Z={Z}")
    return bev.reshape(CZ // Z, Z, H, W)


class BevCompressor(Layer):
    """Fold Z into channels, then a 3x3 conv."""

    def __init__(self, c_in: int, z: int, c_out: int, rng):
        self.z = z
        self.conv = Conv(c_in * z, c_out, 3, 2, rng)

    def forward(self, grid):
        if grid.shape[1] != self.z:
            raise ShapeError(f"expected Z={self.z}, got {grid.shape[1]}")
        return self.conv.forward(fold_z(grid))

    def backward(self, dy, cache):
        return unfold_z(self.conv.backward(dy, cache), self.z)


class LidarBranch(Layer):
    """Voxel encoder with an optional BEV compression head."""

    def __init__(self, frame: LidarFrame, c_mid: int, c_out: int, rng, form: str = "voxel"):
        if form not in ("voxel", "bev"):
            raise ValueError(f"unknown lidar form {form!r}")
        self.form = form
        self.encoder = VoxelEncoder(RAW_VOXEL_CHANNELS, c_mid, c_out, rng)
        if form == "bev":
            self.compress = BevCompressor(c_out, frame.dims[0], c_out, rng)

    def forward(self, raw):
        v, ce = self.encoder.forward(raw)
        if self.form == "voxel":
            return v, (ce, None)
        b, cc = self.compress.forward(v)
        return b, (ce, cc)

    def backward(self, dy, cache):
        ce, cc = cache
        if cc is not None:
            dy = self.compress.backward(dy, cc)
        return self.encoder.backward(dy, ce)


def lidar_encoder_voxel(raw: np.ndarray, frame: LidarFrame, encoder: VoxelEncoder) -> VoxelFeatures:
    if raw.shape[1:] != frame.dims:
        raise ShapeError(f"raw grid {raw.shape[1:]} does not match frame dims {frame.dims}")
    return VoxelFeatures(encoder.forward(raw)[0], frame)


def compress_to_bev(v: VoxelFeatures, compressor: BevCompressor) -> LidarBevFeatures:
    return LidarBevFeatures(compressor.forward(v.grid)[0], v.frame)


# ---------------------------------------------------------------------------
# images


@dataclass
class ImageFeatures:
    """``levels[l]`` is ``[n_cams, C, h_l, w_l]``; ``strides[l]`` pixels per cell."""

    levels: list[np.ndarray]
    strides: tuple[int, ...]


class ImageBackboneStub(Layer):
    """Strided conv pyramid standing in for backbone + FPN (stride 2 per level)."""

    def __init__(self, c_out: int, rng, n_levels: int = 2, c_in: int = 3):
        self.convs = [Conv(c_in if i == 0 else c_out, c_out, 3, 2, rng, stride=2) for i in range(n_levels)]

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(2 ** (i + 1) for i in range(len(self.convs)))

    def forward(self, images: np.ndarray):
        """``images [n_cams, 3, H, W]`` -> :class:`ImageFeatures`."""
        levels = [[] for _ in self.convs]
        caches = []
        for img in images:
            x = img
            cam_cache = []
            for i, conv in enumerate(self.convs):
                h, c = conv.forward(x)
                x = gelu(h)
                levels[i].append(x)
                cam_cache.append((c, h))
            caches.append(cam_cache)
        return ImageFeatures([np.stack(lv) for lv in levels], self.strides), caches

    def backward(self, dlevels: list[np.ndarray | None], caches) -> np.ndarray:
        dimgs = []
        for cam, cam_cache in enumerate(caches):
            dx = None
            for i in reversed(range(len(self.convs))):
                c, h = cam_cache[i]
                g = dlevels[i][cam] if dlevels[i] is not None else 0.0
                if dx is not None:
                    g = g + dx
                dx = self.convs[i].backward(gelu_backward(np.broadcast_to(g, h.shape), h), c)
            dimgs.append(dx)
        return np.stack(dimgs)


def image_backbone_stub(images: np.ndarray, backbone: ImageBackboneStub) -> ImageFeatures:
    return backbone.forward(images)[0]


# ---------------------------------------------------------------------------
# depth


@dataclass
class DepthFeatures:
    grids: np.ndarray       # [n_cams, C_d, D, h, w]
    dist: np.ndarray        # [n_cams, D, h, w]  per-pixel bin distribution
    bins: DepthBinSpec


class DepthBranch(Layer):
    """Per-pixel depth distribution lifted into frustum features.

    A 1x1 conv predicts bin logits, softmax turns them into a distribution,
    its outer product with a 1x1-conv context vector gives a
    ``[C_ctx, D, h, w]`` volume that a 3x3x3 conv encodes.
    """

    def __init__(self, c_in: int, bins: DepthBinSpec, c_ctx: int, c_out: int, rng, level: int = 0):
        self.bins = bins
        self.level = level
        self.logits = Conv(c_in, bins.num_bins, 1, 2, rng)
        self.context = Conv(c_in, c_ctx, 1, 2, rng)
        self.encode = Conv(c_ctx, c_out, 3, 3, rng)

    def forward(self, feats: ImageFeatures):
        x_all = feats.levels[self.level]
        grids, dists, caches = [], [], []
        for x in x_all:
            lg, cl = self.logits.forward(x)
            dist = softmax(lg, axis=0)
            ctx, cc = self.context.forward(x)
            vol = ctx[:, None] * dist[None]
            g, ce = self.encode.forward(vol)
            grids.append(g)
            dists.append(dist)
            caches.append((cl, dist, ctx, cc, ce))
        return DepthFeatures(np.stack(grids), np.stack(dists), self.bins), caches

    def backward(self, dgrids: np.ndarray, caches) -> np.ndarray:
        """Returns the gradient w.r.t. the attended image level ``[n_cams, C, h, w]``."""
        out = []
        for dg, (cl, dist, ctx, cc, ce) in zip(dgrids, caches):
            dvol = self.encode.backward(dg, ce)
            dctx = (dvol * dist[None]).sum(axis=1)
            ddist = (dvol * ctx[:, None]).sum(axis=0)
            dx = self.logits.backward(softmax_backward(ddist, dist, axis=0), cl)
            dx = dx + self.context.backward(dctx, cc)
            out.append(dx)
        return np.stack(out)


def depth_branch(feats: ImageFeatures, branch: DepthBranch) -> DepthFeatures:
    return branch.forward(feats)[0]


# ---------------------------------------------------------------------------
# binary scene formats (little-endian)
#   point cloud: b"FBPC1" u64 count, then count x (x, y, z, intensity) f64
#   tensor:      b"FBTN1" u32 ndim, u64 dims[ndim], f64 data row-major

PC_MAGIC = b"FBPC1"
TENSOR_MAGIC = b"FBTN1"


def save_point_cloud(path: str | Path, pc: PointCloud) -> None:
    with open(path, "wb") as fh:
        fh.write(PC_MAGIC)
        fh.write(struct.pack("<Q", len(pc)))
        fh.write(np.ascontiguousarray(pc.points, dtype="<f8").tobytes())


def load_point_cloud(path: str | Path) -> PointCloud:
    blob = Path(path).read_bytes()
    if blob[:5] != PC_MAGIC:
        raise ValueError(f"{path}: not a point cloud file")
    (n,) = struct.unpack_from("<Q", blob, 5)
    pts = np.frombuffer(blob, dtype="<f8", count=4 * n, offset=13).reshape(n, 4)
    return PointCloud(pts.astype(np.float64))


def write_tensor(fh, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_tensor(blob: bytes, pos: int = 0) -> tuple[np.ndarray, int]:
    if blob[pos:pos + 5] != TENSOR_MAGIC:
        raise ValueError("not a tensor record")
    pos += 5
    (ndim,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    dims = struct.unpack_from(f"<{ndim}Q", blob, pos)
    pos += 8 * ndim
    n = int(np.prod(dims)) if ndim else 1
    arr = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
    return arr, pos + 8 * n


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path: str | Path) -> np.ndarray:
    return read_tensor(Path(path).read_bytes())[0]
