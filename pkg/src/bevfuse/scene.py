"""Synthetic driving scenes with LiDAR sweeps and camera images.

Boxes stand on a flat ground plane (z = 0 in the ego frame).  LiDAR points
are drawn on box surfaces and on the ground with a density falling off as
``1 / d^2``; images are ray-cast silhouettes carrying a class-coded
intensity, a coverage mask and a depth cue.  Objects move with constant
world velocity; the ego drives a gentle arc.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .branches import PointCloud, read_tensor, write_tensor
from .geometry import CameraRig, EgoPose, LidarFrame, inv_rigid, rigid, rot_z, transform_points
from .head import Box3D

CLASS_NAMES = ("car", "pedestrian", "cyclist")
# mean (w, l, h) and spread
CLASS_SIZES = np.array([[1.8, 4.2, 1.5], [0.6, 0.6, 1.75], [0.7, 1.8, 1.4]])
CLASS_LIDAR_INTENSITY = (0.8, 0.3, 0.55)
CLASS_IMAGE_INTENSITY = (1.0, 0.35, 0.65)
GROUND_INTENSITY = 0.1
IMAGE_CHANNELS = 3   # class intensity, mask, exp(-depth / 20)


@dataclass
class SceneConfig:
    roi: float = 16.0           # half-extent of the square region (m)
    margin: float = 1.5         # keep box centers this far inside the ROI
    min_gap: float = 1.0        # extra clearance between box footprints
    class_probs: tuple[float, ...] = (0.5, 0.25, 0.25)
    density: float = 400.0      # box points ~ ceil(density * area / d^2)
    ground_points: int = 400
    frames: int = 1
    dt: float = 0.5
    speed: tuple[float, float] = (2.0, 6.0)   # range for moving objects (m/s)
    moving_fraction: float = 0.7
    ego_speed: tuple[float, float] = (0.0, 4.0)
    sparse_fraction: float = 0.0   # camera-visible objects reduced to 1-2 points
    image_hw: tuple[int, int] = (48, 96)
    n_cams: int = 2


@dataclass
class Scene:
    """``boxes`` are in the current (last) ego frame; per-frame lists run oldest first."""

    boxes: list[Box3D]
    poses: list[EgoPose]
    clouds: list[PointCloud]
    images: list[np.ndarray]        # [n_cams, 3, h, w] per frame
    rig: CameraRig
    seed: int
    sparse: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def num_frames(self) -> int:
        return len(self.poses)

    @property
    def labels(self) -> np.ndarray:
        return np.array([b.label for b in self.boxes], dtype=int)


# ---------------------------------------------------------------------------
# box geometry


def box_corners(b: Box3D) -> np.ndarray:
    """``[8, 3]`` corners; length runs along the heading."""
    w, l, h = b.size
    dx = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * l / 2
    dy = np.array([1, -1, -1, 1, 1, -1, -1, 1]) * w / 2
    dz = np.array([-1, -1, -1, -1, 1, 1, 1, 1]) * h / 2
    R = rot_z(b.yaw)
    return np.stack([dx, dy, dz], axis=1) @ R.T + np.array(b.center)


def points_in_box(pts: np.ndarray, b: Box3D, pad: float = 0.0) -> np.ndarray:
    local = (pts[:, :3] - np.array(b.center)) @ rot_z(b.yaw)
    half = np.array([b.size[1], b.size[0], b.size[2]]) / 2 + pad
    return np.all(np.abs(local) <= half, axis=1)


def sample_box_surface(b: Box3D, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points on the four sides and the roof, area weighted."""
    w, l, h = b.size
    faces = np.array([w * h, w * h, l * h, l * h, w * l])
    face = rng.choice(5, size=n, p=faces / faces.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 2))
    local = np.zeros((n, 3))
    for k, (ax, sgn) in enumerate([(0, 1), (0, -1), (1, 1), (1, -1), (2, 1)]):
        sel = face == k
        if not sel.any():
            continue
        ext = np.array([l, w, h])
        free = [a for a in range(3) if a != ax]
        local[sel, ax] = sgn * ext[ax] / 2
        local[sel, free[0]] = u[sel, 0] * ext[free[0]]
        local[sel, free[1]] = u[sel, 1] * ext[free[1]]
    return local @ rot_z(b.yaw).T + np.array(b.center)


def box_point_count(b: Box3D, density: float) -> int:
    """Expected returns: ``ceil(density * footprint-ish area / d^2)``, never zero."""
    d2 = max(b.center[0] ** 2 + b.center[1] ** 2, 1.0)
    area = b.size[1] * b.size[2] + b.size[0] * b.size[2]
    return int(np.ceil(density * area / d2))


# ---------------------------------------------------------------------------
# sampling


def _place_boxes(n: int, cfg: SceneConfig, rng) -> list[Box3D]:
    boxes: list[Box3D] = []
    lim = cfg.roi - cfg.margin
    tries = 0
    while len(boxes) < n and tries < 200 * (n + 1):
        tries += 1
        label = int(rng.choice(len(CLASS_NAMES), p=np.asarray(cfg.class_probs) / np.sum(cfg.class_probs)))
        size = CLASS_SIZES[label] * rng.uniform(0.9, 1.1, size=3)
        xy = rng.uniform(-lim, lim, size=2)
        if np.hypot(*xy) < 3.0:
            continue
        rad = 0.5 * np.hypot(size[0], size[1])
        if any(np.hypot(*(xy - b.center[:2])) < rad + 0.5 * np.hypot(b.size[0], b.size[1]) + cfg.min_gap
               for b in boxes):
            continue
        yaw = rng.uniform(-np.pi, np.pi)
        boxes.append(Box3D((xy[0], xy[1], size[2] / 2), tuple(size), yaw, (0.0, 0.0), label))
    return boxes


def _ego_track(cfg: SceneConfig, rng) -> list[np.ndarray]:
    """World-from-ego transforms, oldest first; the current frame is the world origin."""
    v = rng.uniform(*cfg.ego_speed)
    yaw_rate = rng.uniform(-0.1, 0.1)
    out = []
    for k in range(cfg.frames):
        t = -(cfg.frames - 1 - k) * cfg.dt
        yaw = yaw_rate * t
        # constant-speed arc ending at the origin with heading 0
        if abs(yaw_rate) > 1e-9:
            x = v / yaw_rate * np.sin(yaw)
            y = v / yaw_rate * (1 - np.cos(yaw))
        else:
            x, y = v * t, 0.0
        out.append(rigid(rot_z(yaw), (x, y, 0.0)))
    return out


def lidar_sweep(boxes: list[Box3D], cfg: SceneConfig, rng, sparse: np.ndarray | None = None) -> PointCloud:
    pts = []
    for i, b in enumerate(boxes):
        n = box_point_count(b, cfg.density)
        if sparse is not None and sparse[i]:
            n = int(rng.integers(1, 3))
        xyz = sample_box_surface(b, n, rng)
        inten = np.clip(CLASS_LIDAR_INTENSITY[b.label] + rng.normal(0, 0.03, n), 0, 1)
        pts.append(np.c_[xyz, inten])
    # ground: areal density ~ 1/r^2 means radial pdf ~ 1/r
    r = 2.0 * (cfg.roi * np.sqrt(2) / 2.0) ** rng.uniform(0, 1, cfg.ground_points)
    th = rng.uniform(-np.pi, np.pi, cfg.ground_points)
    g = np.c_[r * np.cos(th), r * np.sin(th), np.zeros(cfg.ground_points)]
    g = g[(np.abs(g[:, 0]) < cfg.roi) & (np.abs(g[:, 1]) < cfg.roi)]
    covered = np.zeros(len(g), dtype=bool)
    for b in boxes:
        covered |= points_in_box(g, b, pad=0.05)
    g = g[~covered]
    pts.append(np.c_[g, np.full(len(g), GROUND_INTENSITY)])
    return PointCloud(np.concatenate(pts) if pts else np.zeros((0, 4)))


def render_images(boxes: list[Box3D], rig: CameraRig) -> np.ndarray:
    """Ray-cast box silhouettes: ``[n_cams, 3, h, w]``."""
    h, w = rig.image_hw
    out = np.zeros((rig.num_cams, IMAGE_CHANNELS, h, w))
    vv, uu = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pix = np.stack([uu.ravel(), vv.ravel(), np.ones(h * w)], axis=1)
    for j in range(rig.num_cams):
        T = rig.T_ego_cam[j]
        dirs = (pix @ np.linalg.inv(rig.K[j]).T) @ T[:3, :3].T     # ego-frame rays, unit camera z
        origin = T[:3, 3]
        best = np.full(h * w, np.inf)
        label = np.full(h * w, -1)
        for b in boxes:
            R = rot_z(b.yaw)
            o = (origin - np.array(b.center)) @ R
            d = dirs @ R
            half = np.array([b.size[1], b.size[0], b.size[2]]) / 2
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (-half - o) / d
                t2 = (half - o) / d
            tmin = np.nanmax(np.minimum(t1, t2), axis=1)
            tmax = np.nanmin(np.maximum(t1, t2), axis=1)
            hit = (tmax >= tmin) & (tmax > 0.1)
            t = np.where(tmin > 0.1, tmin, tmax)
            closer = hit & (t < best)
            best[closer] = t[closer]
            label[closer] = b.label
        seen = label >= 0
        img = out[j]
        img[0].ravel()[seen] = np.take(CLASS_IMAGE_INTENSITY, label[seen])
        img[1].ravel()[seen] = 1.0
        img[2].ravel()[seen] = np.exp(-best[seen] / 20.0)
    return out


def camera_visible(b: Box3D, rig: CameraRig) -> bool:
    from .geometry import project_pixels
    for j in range(rig.num_cams):
        if project_pixels(np.array(b.center)[None], rig, j)[2][0]:
            return True
    return False


def generate_scene(seed: int, n_objects: int, motion: bool = False, cfg: SceneConfig | None = None) -> Scene:
    """Deterministic per ``(seed, n_objects, motion, cfg)``."""
    if n_objects < 0:
        raise ValueError("n_objects must be >= 0")
    cfg = cfg if cfg is not None else SceneConfig()
    rng = np.random.default_rng(seed)
    rig = CameraRig.symmetric(cfg.n_cams, cfg.image_hw)
    boxes_now = _place_boxes(n_objects, cfg, rng)
    # world velocities; the current ego frame coincides with the world frame
    vel = np.zeros((len(boxes_now), 2))
    if motion:
        for i in range(len(boxes_now)):
            if rng.uniform() < cfg.moving_fraction:
                speed = rng.uniform(*cfg.speed)
                vel[i] = speed * np.array([np.cos(boxes_now[i].yaw), np.sin(boxes_now[i].yaw)])
    boxes_now = [Box3D(b.center, b.size, b.yaw, tuple(v), b.label) for b, v in zip(boxes_now, vel)]
    sparse = np.zeros(len(boxes_now), dtype=bool)
    if cfg.sparse_fraction > 0:
        vis = np.flatnonzero([camera_visible(b, rig) for b in boxes_now])
        k = int(round(cfg.sparse_fraction * len(boxes_now)))
        if k and len(vis):
            sparse[rng.choice(vis, size=min(k, len(vis)), replace=False)] = True
    track = _ego_track(cfg, rng) if cfg.frames > 1 else [np.eye(4)]
    poses, clouds, images = [], [], []
    for k, T_we in enumerate(track):
        t = -(len(track) - 1 - k) * cfg.dt
        T_ew = inv_rigid(T_we)
        frame_boxes = []
        for b, v in zip(boxes_now, vel):
            cw = np.array([b.center[0] + v[0] * t, b.center[1] + v[1] * t, b.center[2]])
            ce = transform_points(T_ew, cw)
            yaw_e = b.yaw - np.arctan2(T_we[1, 0], T_we[0, 0])
            frame_boxes.append(Box3D(tuple(ce), b.size, yaw_e, None, b.label))
        poses.append(EgoPose(int(round((t + 100.0) * 1e6)), T_we))
        clouds.append(lidar_sweep(frame_boxes, cfg, rng, sparse))
        images.append(render_images(frame_boxes, rig))
    return Scene(boxes_now, poses, clouds, images, rig, seed, sparse)


def generate_dataset(n_scenes: int, seed: int = 0, objects: tuple[int, int] = (3, 8), motion: bool = False,
                     cfg: SceneConfig | None = None) -> list[Scene]:
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2 ** 31, size=n_scenes)
    counts = rng.integers(objects[0], objects[1] + 1, size=n_scenes)
    return [generate_scene(int(s), int(n), motion, cfg) for s, n in zip(seeds, counts)]


# ---------------------------------------------------------------------------
# class-balanced resampling


def class_counts(scenes: list[Scene], n_classes: int = len(CLASS_NAMES)) -> np.ndarray:
    return np.bincount(np.concatenate([s.labels for s in scenes]) if scenes else np.zeros(0, int),
                       minlength=n_classes)


def cbgs_resample(scenes: list[Scene], counts: np.ndarray | None = None) -> np.ndarray:
    """Per-scene sampling weights, normalized to mean 1.

    A scene's weight sums ``total / count_c`` over the distinct classes it
    contains, so single-class scenes of a balanced set get uniform weights.
    Scenes without objects get weight 1 before the normalization.
    """
    counts = class_counts(scenes) if counts is None else np.asarray(counts)
    present = counts > 0
    if not present.any():
        return np.ones(len(scenes))
    total = counts[present].sum()
    inv = np.where(present, total / np.maximum(counts, 1), 0.0) / present.sum()
    w = np.array([inv[np.unique(s.labels)].sum() if len(s.labels) else 1.0 for s in scenes])
    return w * len(w) / w.sum()


# ---------------------------------------------------------------------------
# scene file: b"FBSC1", u32 seed, u32 n_boxes, u32 n_frames, then
#   per box 11 f64 (x y z w l h yaw vx vy label score) ; per frame i64 ts,
#   16 f64 pose, tensor record (points [N,4]), tensor record (images)

SCENE_MAGIC = b"FBSC1"


def save_scene(path: str | Path, scene: Scene) -> None:
    from .geometry import save_calibration
    with open(path, "wb") as fh:
        fh.write(SCENE_MAGIC)
        fh.write(struct.pack("<III", scene.seed, len(scene.boxes), scene.num_frames))
        for b in scene.boxes:
            v = b.velocity if b.velocity is not None else (np.nan, np.nan)
            fh.write(np.array([*b.center, *b.size, b.yaw, *v, b.label, b.score], dtype="<f8").tobytes())
        for pose, pc, img in zip(scene.poses, scene.clouds, scene.images):
            fh.write(struct.pack("<q", pose.timestamp))
            fh.write(np.ascontiguousarray(pose.T_world_ego, dtype="<f8").tobytes())
            write_tensor(fh, pc.points)
            write_tensor(fh, img)
        write_tensor(fh, scene.sparse.astype(np.float64))
    save_calibration(str(path) + ".calib", scene.rig, LidarFrame())


def load_scene(path: str | Path) -> Scene:
    from .geometry import load_calibration
    blob = Path(path).read_bytes()
    if blob[:5] != SCENE_MAGIC:
        raise ValueError(f"{path}: not a scene file")
    seed, nb, nf = struct.unpack_from("<III", blob, 5)
    pos = 17
    boxes = []
    for _ in range(nb):
        v = np.frombuffer(blob, dtype="<f8", count=11, offset=pos)
        pos += 88
        vel = None if np.isnan(v[7]) else (v[7], v[8])
        boxes.append(Box3D(tuple(v[0:3]), tuple(v[3:6]), v[6], vel, int(v[9]), v[10]))
    poses, clouds, images = [], [], []
    for _ in range(nf):
        (ts,) = struct.unpack_from("<q", blob, pos)
        pos += 8
        T = np.frombuffer(blob, dtype="<f8", count=16, offset=pos).reshape(4, 4).astype(np.float64)
        pos += 128
        pts, pos = read_tensor(blob, pos)
        img, pos = read_tensor(blob, pos)
        poses.append(EgoPose(int(ts), T))
        clouds.append(PointCloud(pts))
        images.append(img)
    sparse, pos = read_tensor(blob, pos)
    rig, _ = load_calibration(str(path) + ".calib")
    return Scene(boxes, poses, clouds, images, rig, seed, sparse.astype(bool))
