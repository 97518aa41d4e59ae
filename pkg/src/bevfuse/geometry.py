"""Coordinate frames, projections and ego-motion alignment of BEV maps.

Conventions
-----------
* Ego frame: x forward, y left, z up, meters.  Everything is expressed
  relative to it; sensors carry explicit extrinsics.
* Rigid transforms are 4x4 homogeneous matrices; ``T_a_b`` maps frame-b
  coordinates into frame a.
* Grids use the cell-center convention: index ``i`` sits at
  ``min + (i + 0.5) * cell``, so a continuous cell coordinate is
  ``(x - min) / cell - 0.5`` and integer coordinates land on stored values.
* Camera frames are x right, y down, z forward (optical axis); pixel
  coordinates put integer values on pixel centers.
* Depth bins use the edge convention: depth equal to edge ``k`` maps to
  bin coordinate ``k``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import ReferencePoints
from .numerics import interp

DEPTH_MIN = 0.1
ORTHO_TOL = 1e-9


# ---------------------------------------------------------------------------
# rigid transforms


def rigid(R: np.ndarray | None = None, t=(0.0, 0.0, 0.0)) -> np.ndarray:
    T = np.eye(4)
    if R is not None:
        T[:3, :3] = R
    T[:3, 3] = t
    return T


def rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_y(pitch: float) -> np.ndarray:
    c, s = np.cos(pitch), np.sin(pitch)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def inv_rigid(T: np.ndarray) -> np.ndarray:
    R, t = T[:3, :3], T[:3, 3]
    return rigid(R.T, -R.T @ t)


def is_rigid(T: np.ndarray, tol: float = ORTHO_TOL) -> bool:
    R = T[:3, :3]
    return (T.shape == (4, 4) and np.allclose(T[3], [0, 0, 0, 1], atol=tol)
            and np.abs(R.T @ R - np.eye(3)).max() <= tol and np.linalg.det(R) > 0)


def transform_points(T: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ T[:3, :3].T + T[:3, 3]


def relative_pose(T_world_then: np.ndarray, T_world_now: np.ndarray) -> np.ndarray:
    """``T_then_now``; exactly the identity when both poses are equal."""
    if np.array_equal(T_world_then, T_world_now):
        return np.eye(4)
    return inv_rigid(T_world_then) @ T_world_now


# camera looking along ego +x: cam z -> ego x, cam x -> ego -y, cam y -> ego -z
CAM_TO_EGO_FORWARD = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def camera_extrinsic(yaw: float, position=(0.0, 0.0, 0.0), pitch: float = 0.0) -> np.ndarray:
    """``T_ego_cam`` for a camera at ``position`` looking along ego yaw/pitch."""
    return rigid(rot_z(yaw) @ rot_y(pitch) @ CAM_TO_EGO_FORWARD, position)


# ---------------------------------------------------------------------------
# frames and grids


@dataclass
class BevGrid:
    """``H x W`` query lattice; rows follow ego x, columns ego y."""

    H: int
    W: int
    roi: tuple[float, float, float, float] = (-51.2, 51.2, -51.2, 51.2)
    z_anchors: tuple[float, ...] = (-3.0, -1.0, 1.0, 3.0)

    def __post_init__(self):
        x0, x1, y0, y1 = self.roi
        cx, cy = (x1 - x0) / self.H, (y1 - y0) / self.W
        if not np.isclose(cx, cy, rtol=1e-12):
            raise ValueError(f"cells must be square, got {cx} x {cy}")
        z = np.asarray(self.z_anchors, dtype=np.float64)
        if z.ndim != 1 or len(z) == 0 or np.any(np.diff(z) <= 0):
            raise ValueError("z_anchors must be a non-empty strictly increasing list")
        self.z_anchors = tuple(float(v) for v in z)

    @property
    def cell_size(self) -> float:
        return (self.roi[1] - self.roi[0]) / self.H

    @property
    def n_ref(self) -> int:
        return len(self.z_anchors)

    @property
    def num_cells(self) -> int:
        return self.H * self.W

    def cell_centers(self) -> np.ndarray:
        """``[H*W, 2]`` ego-frame centers; row ``n`` is cell ``(n // W, n % W)``."""
        ix, iy = np.meshgrid(np.arange(self.H), np.arange(self.W), indexing="ij")
        cs = self.cell_size
        return np.stack([self.roi[0] + (ix.ravel() + 0.5) * cs,
                         self.roi[2] + (iy.ravel() + 0.5) * cs], axis=1)

    def to_cells(self, xy: np.ndarray) -> np.ndarray:
        """Meters -> continuous cell coordinates ``(row, col)``."""
        xy = np.asarray(xy, dtype=np.float64)
        cs = self.cell_size
        return np.stack([(xy[..., 0] - self.roi[0]) / cs - 0.5,
                         (xy[..., 1] - self.roi[2]) / cs - 0.5], axis=-1)

    def to_meters(self, cells: np.ndarray) -> np.ndarray:
        cells = np.asarray(cells, dtype=np.float64)
        cs = self.cell_size
        return np.stack([self.roi[0] + (cells[..., 0] + 0.5) * cs,
                         self.roi[2] + (cells[..., 1] + 0.5) * cs], axis=-1)

    def contains(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        x0, x1, y0, y1 = self.roi
        return (xy[..., 0] >= x0) & (xy[..., 0] < x1) & (xy[..., 1] >= y0) & (xy[..., 1] < y1)


def bev_cell_center(grid: BevGrid, ix: int, iy: int) -> tuple[float, float]:
    if not (0 <= ix < grid.H and 0 <= iy < grid.W):
        raise IndexError(f"cell ({ix}, {iy}) outside {grid.H}x{grid.W} grid")
    cs = grid.cell_size
    return grid.roi[0] + (ix + 0.5) * cs, grid.roi[2] + (iy + 0.5) * cs


def bev_cell_index(grid: BevGrid, x: float, y: float) -> tuple[int, int]:
    """Floor-map an ego point to the cell containing it."""
    cs = grid.cell_size
    ix = int(np.floor((x - grid.roi[0]) / cs))
    iy = int(np.floor((y - grid.roi[2]) / cs))
    if not (0 <= ix < grid.H and 0 <= iy < grid.W):
        raise IndexError(f"point ({x}, {y}) outside the grid")
    return ix, iy


def make_reference_points_3d(grid: BevGrid) -> np.ndarray:
    """``[H*W, N_ref, 3]`` pillar points at each cell center, one per height anchor."""
    xy = grid.cell_centers()
    z = np.asarray(grid.z_anchors)
    out = np.empty((grid.num_cells, len(z), 3))
    out[:, :, :2] = xy[:, None, :]
    out[:, :, 2] = z[None, :]
    return out


@dataclass
class EgoPose:
    timestamp: int
    T_world_ego: np.ndarray

    def __post_init__(self):
        self.T_world_ego = np.asarray(self.T_world_ego, dtype=np.float64)
        if not is_rigid(self.T_world_ego):
            raise ValueError("ego pose is not a rigid transform")

    @classmethod
    def planar(cls, timestamp: int, x: float, y: float, yaw: float) -> "EgoPose":
        return cls(timestamp, rigid(rot_z(yaw), (x, y, 0.0)))


@dataclass
class LidarFrame:
    """Voxel grid attached to the LiDAR; ``origin`` is the grid's min corner."""

    T_ego_lidar: np.ndarray = field(default_factory=lambda: np.eye(4))
    origin: tuple[float, float, float] = (-16.0, -16.0, -1.0)
    voxel_size: float = 1.0
    dims: tuple[int, int, int] = (4, 32, 32)  # (Z, H_v, W_v); H_v along x, W_v along y

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if any(int(d) <= 0 for d in self.dims):
            raise ValueError("voxel dims must be positive")
        self.T_ego_lidar = np.asarray(self.T_ego_lidar, dtype=np.float64)
        self.dims = tuple(int(d) for d in self.dims)

    def ego_to_cells(self, pts_ego: np.ndarray) -> np.ndarray:
        """Ego points ``[..., 3]`` -> continuous voxel coords ``(z, row, col)``."""
        p = transform_points(inv_rigid(self.T_ego_lidar), pts_ego)
        o = np.asarray(self.origin)
        c = (p - o) / self.voxel_size - 0.5
        return c[..., [2, 0, 1]]


def _in_bounds(cells: np.ndarray, dims) -> np.ndarray:
    # a sample has support iff it lies within half a cell of the stored lattice
    ok = np.ones(cells.shape[:-1], dtype=bool)
    for a, n in enumerate(dims):
        ok &= (cells[..., a] >= -0.5) & (cells[..., a] <= n - 0.5)
    return ok


def project_to_lidar_bev(pt_ego, lidar: LidarFrame, bev_dims: tuple[int, int] | None = None) -> ReferencePoints:
    """Ego ``(x, y)`` points -> LiDAR BEV map cells ``(row, col)``."""
    pt = np.atleast_2d(np.asarray(pt_ego, dtype=np.float64))
    xyz = np.concatenate([pt[..., :2], np.zeros(pt.shape[:-1] + (1,))], axis=-1)
    # height is irrelevant for the BEV map; evaluate at the lidar-frame z of the point
    cells = lidar.ego_to_cells(xyz)[..., 1:]
    dims = bev_dims if bev_dims is not None else lidar.dims[1:]
    return ReferencePoints(cells.reshape(-1, 1, 2), _in_bounds(cells, dims).reshape(-1, 1))


def project_to_voxel(pt_ego, lidar: LidarFrame) -> ReferencePoints:
    """Ego ``(x, y, z)`` points ``[N, R, 3]`` -> voxel coords ``(z, row, col)``."""
    pt = np.asarray(pt_ego, dtype=np.float64)
    if pt.ndim == 1:
        pt = pt[None, None]
    elif pt.ndim == 2:
        pt = pt[:, None]
    cells = lidar.ego_to_cells(pt)
    return ReferencePoints(cells, _in_bounds(cells, lidar.dims))


@dataclass
class CameraRig:
    """Per-camera intrinsics ``K``, extrinsics ``T_ego_cam`` and image size."""

    K: list[np.ndarray]
    T_ego_cam: list[np.ndarray]
    image_hw: tuple[int, int]
    feature_strides: tuple[int, ...] = (2, 4)

    def __post_init__(self):
        self.K = [np.asarray(k, dtype=np.float64) for k in self.K]
        self.T_ego_cam = [np.asarray(t, dtype=np.float64) for t in self.T_ego_cam]
        if len(self.K) != len(self.T_ego_cam):
            raise ValueError("need one intrinsic and one extrinsic per camera")
        for k in self.K:
            if k[0, 0] <= 0 or k[1, 1] <= 0:
                raise ValueError("focal lengths must be positive")
        for t in self.T_ego_cam:
            if not is_rigid(t):
                raise ValueError("camera extrinsic is not a rigid transform")
        self.image_hw = tuple(int(v) for v in self.image_hw)

    @property
    def num_cams(self) -> int:
        return len(self.K)

    def feature_hw(self, level: int) -> tuple[int, int]:
        s = self.feature_strides[level]
        return -(-self.image_hw[0] // s), -(-self.image_hw[1] // s)

    def duplicate(self, j: int) -> "CameraRig":
        """Rig with camera ``j`` appended again (used to test view normalization)."""
        return CameraRig(self.K + [self.K[j]], self.T_ego_cam + [self.T_ego_cam[j]],
                         self.image_hw, self.feature_strides)

    @classmethod
    def symmetric(cls, n_cams: int, image_hw=(48, 96), hfov_deg: float = 120.0,
                  height: float = 1.6, feature_strides=(2, 4)) -> "CameraRig":
        """``n_cams`` cameras evenly spread in yaw, first one looking forward."""
        h, w = image_hw
        f = (w / 2.0) / np.tan(np.radians(hfov_deg) / 2.0)
        K = np.array([[f, 0.0, (w - 1) / 2.0], [0.0, f, (h - 1) / 2.0], [0.0, 0.0, 1.0]])
        Ts = [camera_extrinsic(2 * np.pi * j / n_cams, (0.0, 0.0, height)) for j in range(n_cams)]
        return cls([K.copy() for _ in range(n_cams)], Ts, image_hw, tuple(feature_strides))


def pixel_to_feature(uv: np.ndarray, stride: int) -> np.ndarray:
    """Pixel ``(u, v)`` -> feature-map cell ``(row, col)`` at the given stride."""
    off = (stride - 1) / 2.0
    return np.stack([(uv[..., 1] - off) / stride, (uv[..., 0] - off) / stride], axis=-1)


def project_pixels(pt_ego: np.ndarray, rig: CameraRig, j: int):
    """Returns ``(uv [...,2], depth [...], hit [...])`` for camera ``j``."""
    p = transform_points(inv_rigid(rig.T_ego_cam[j]), pt_ego)
    depth = p[..., 2]
    safe = np.where(depth > DEPTH_MIN, depth, 1.0)
    K = rig.K[j]
    u = K[0, 0] * p[..., 0] / safe + K[0, 1] * p[..., 1] / safe + K[0, 2]
    v = K[1, 1] * p[..., 1] / safe + K[1, 2]
    h, w = rig.image_hw
    hit = (depth > DEPTH_MIN) & (u >= -0.5) & (u < w - 0.5) & (v >= -0.5) & (v < h - 0.5)
    return np.stack([u, v], axis=-1), depth, hit


def back_project(uv: np.ndarray, depth: np.ndarray, rig: CameraRig, j: int) -> np.ndarray:
    """Pixel + camera depth -> ego point (inverse of :func:`project_pixels`)."""
    uv = np.asarray(uv, dtype=np.float64)
    Kinv = np.linalg.inv(rig.K[j])
    homo = np.concatenate([uv, np.ones(uv.shape[:-1] + (1,))], axis=-1)
    cam = (homo @ Kinv.T) * np.asarray(depth)[..., None]
    return transform_points(rig.T_ego_cam[j], cam)


def project_to_camera(pt_ego, rig: CameraRig, j: int, level: int | None = None):
    """Ego points ``[N, R, 3]`` -> ``(ReferencePoints, hit)`` in camera ``j``.

    With ``level`` given, locations are feature-map cells at that level's
    stride; otherwise they are raw pixel ``(u, v)``.
    """
    pt = np.asarray(pt_ego, dtype=np.float64)
    if pt.ndim == 1:
        pt = pt[None, None]
    elif pt.ndim == 2:
        pt = pt[:, None]
    uv, _, hit = project_pixels(pt, rig, j)
    loc = uv if level is None else pixel_to_feature(uv, rig.feature_strides[level])
    return ReferencePoints(loc, hit, bank=np.full(hit.shape, j)), hit


@dataclass
class DepthBinSpec:
    edges: tuple[float, ...] = tuple(float(v) for v in np.arange(1.0, 42.0))

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.float64)
        if e.ndim != 1 or len(e) < 2 or np.any(np.diff(e) <= 0):
            raise ValueError("depth bin edges must be strictly increasing")
        self.edges = tuple(float(v) for v in e)

    @property
    def num_bins(self) -> int:
        return len(self.edges) - 1

    def depth_to_bin(self, depth: np.ndarray) -> np.ndarray:
        e = np.asarray(self.edges)
        return np.interp(depth, e, np.arange(len(e), dtype=np.float64), left=-1.0, right=len(e))

    def in_range(self, depth: np.ndarray) -> np.ndarray:
        return (depth >= self.edges[0]) & (depth <= self.edges[-1])


def project_to_frustum(pt_ego, rig: CameraRig, j: int, bins: DepthBinSpec, level: int = 0):
    """Ego points -> frustum coords ``(bin, row, col)`` of camera ``j``'s depth grid."""
    pt = np.asarray(pt_ego, dtype=np.float64)
    if pt.ndim == 1:
        pt = pt[None, None]
    elif pt.ndim == 2:
        pt = pt[:, None]
    uv, depth, hit = project_pixels(pt, rig, j)
    hit = hit & bins.in_range(depth)
    rc = pixel_to_feature(uv, rig.feature_strides[level])
    loc = np.concatenate([bins.depth_to_bin(depth)[..., None], rc], axis=-1)
    return ReferencePoints(loc, hit, bank=np.full(hit.shape, j)), hit


# ---------------------------------------------------------------------------
# temporal alignment


def history_sample_locations(grid: BevGrid, pose_then: EgoPose, pose_now: EgoPose) -> np.ndarray:
    """Cell coordinates in the historical map of every current cell center."""
    T = relative_pose(pose_then.T_world_ego, pose_now.T_world_ego)
    if np.array_equal(T, np.eye(4)):
        ix, iy = np.meshgrid(np.arange(grid.H), np.arange(grid.W), indexing="ij")
        return np.stack([ix.ravel(), iy.ravel()], axis=1).astype(np.float64)
    xy = grid.cell_centers()
    pts = np.concatenate([xy, np.zeros((len(xy), 1))], axis=1)
    return grid.to_cells(transform_points(T, pts)[:, :2])


def align_history_bev(hist: np.ndarray, pose_then: EgoPose, pose_now: EgoPose, grid: BevGrid) -> np.ndarray:
    """Warp a ``[C, H, W]`` map from the ``pose_then`` ego frame into ``pose_now``'s."""
    loc = history_sample_locations(grid, pose_then, pose_now)
    out = interp(hist, loc)
    return out.T.reshape(hist.shape)


# ---------------------------------------------------------------------------
# calibration file
#
# One record per line, whitespace separated:
#   camera <name> <h> <w> K <9 doubles row-major> T <12 doubles row-major 3x4>
#   lidar <name> T <12 doubles> origin <3> voxel <size> dims <Z H W>
#   strides <s0> <s1> ...
# Lines starting with '#' are comments.


def _fmt(vals) -> str:
    return " ".join(repr(float(v)) for v in np.ravel(vals))


def save_calibration(path: str | Path, rig: CameraRig, lidar: LidarFrame) -> None:
    lines = ["# bevfuse calibration v1"]
    lines.append("strides " + " ".join(str(s) for s in rig.feature_strides))
    for j in range(rig.num_cams):
        lines.append(f"camera cam{j} {rig.image_hw[0]} {rig.image_hw[1]} K {_fmt(rig.K[j])} "
                     f"T {_fmt(rig.T_ego_cam[j][:3])}")
    lines.append(f"lidar top T {_fmt(lidar.T_ego_lidar[:3])} origin {_fmt(lidar.origin)} "
                 f"voxel {lidar.voxel_size!r} dims {' '.join(str(d) for d in lidar.dims)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_calibration(path: str | Path) -> tuple[CameraRig, LidarFrame]:
    Ks, Ts, hw, strides, lidar = [], [], None, (2, 4), None
    for raw in Path(path).read_text().splitlines():
        tok = raw.split()
        if not tok or tok[0].startswith("#"):
            continue
        if tok[0] == "strides":
            strides = tuple(int(v) for v in tok[1:])
        elif tok[0] == "camera":
            hw = (int(tok[2]), int(tok[3]))
            k_at, t_at = tok.index("K"), tok.index("T")
            Ks.append(np.array([float(v) for v in tok[k_at + 1:k_at + 10]]).reshape(3, 3))
            T = np.eye(4)
            T[:3] = np.array([float(v) for v in tok[t_at + 1:t_at + 13]]).reshape(3, 4)
            Ts.append(T)
        elif tok[0] == "lidar":
            t_at = tok.index("T")
            T = np.eye(4)
            T[:3] = np.array([float(v) for v in tok[t_at + 1:t_at + 13]]).reshape(3, 4)
            o_at = tok.index("origin")
            origin = tuple(float(v) for v in tok[o_at + 1:o_at + 4])
            vs = float(tok[tok.index("voxel") + 1])
            d_at = tok.index("dims")
            dims = tuple(int(v) for v in tok[d_at + 1:d_at + 4])
            lidar = LidarFrame(T, origin, vs, dims)
        else:
            raise ValueError(f"unknown calibration record {tok[0]!r}")
    if hw is None or lidar is None:
        raise ValueError("calibration needs at least one camera and one lidar record")
    return CameraRig(Ks, Ts, hw, strides), lidar
