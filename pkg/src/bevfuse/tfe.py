"""Temporal fusion of the current BEV map with ego-aligned history.

Queries start from the current fused map.  Each layer's temporal
cross-attention sums one deformable-attention term per frame (current
frame included), every term referencing the query's own cell in that
frame's aligned map.  History maps are treated as constants: no gradient
flows into earlier frames.
"""
from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import ConfigError, ReferencePoints
from .branches import read_tensor, write_tensor
from .geometry import BevGrid, EgoPose, align_history_bev
from .mmfe import AttnSublayer, FFNSublayer, sinusoidal_2d
from .numerics import Conv, Layer, LayerNorm


class HistoryError(ValueError):
    pass


class BevHistory:
    """Ring buffer of ``(bev [C, H, W], EgoPose)`` ordered by timestamp."""

    def __init__(self, capacity: int = 8):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self.entries: deque[tuple[np.ndarray, EgoPose]] = deque(maxlen=capacity if capacity else 0)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def timestamps(self) -> list[int]:
        return [p.timestamp for _, p in self.entries]

    def push(self, bev: np.ndarray, pose: EgoPose) -> "BevHistory":
        if self.entries and pose.timestamp <= self.entries[-1][1].timestamp:
            raise HistoryError(f"timestamp {pose.timestamp} not after {self.entries[-1][1].timestamp}")
        if self.capacity:
            self.entries.append((np.array(bev, dtype=np.float64), pose))
        return self

    def latest(self, n: int) -> list[tuple[np.ndarray, EgoPose]]:
        """The ``n`` most recent entries, newest first."""
        return list(reversed(self.entries))[:n]


def push_history(buf: BevHistory, bev: np.ndarray, pose: EgoPose) -> BevHistory:
    return buf.push(bev, pose)


def aligned_frames(current: np.ndarray, buf: BevHistory, pose_now: EgoPose, grid: BevGrid,
                   frames: int) -> list[np.ndarray]:
    """``[current, aligned t-1, aligned t-2, ...]`` with at most ``frames`` maps."""
    out = [current]
    for bev, pose in buf.latest(max(frames - 1, 0)):
        out.append(align_history_bev(bev, pose, pose_now, grid))
    return out


@dataclass
class TemporalConfig:
    num_layers: int = 3
    frames: int = 8           # maps attended per query, current frame included
    method: str = "attention"  # or "concat"
    mean: bool = False        # divide the frame sum by the frame count

    def __post_init__(self):
        if self.num_layers < 1 or self.frames < 1:
            raise ConfigError("num_layers and frames must be >= 1")
        if self.method not in ("attention", "concat"):
            raise ConfigError(f"unknown temporal method {self.method!r}")


def temporal_refs(grid: BevGrid, n_frames: int, mean: bool = False) -> ReferencePoints:
    n = np.arange(grid.num_cells)
    own = np.stack([n // grid.W, n % grid.W], axis=1).astype(np.float64)
    loc = np.repeat(own[:, None, :], n_frames, axis=1)
    bank = np.broadcast_to(np.arange(n_frames)[None, :], (grid.num_cells, n_frames))
    scale = np.full((grid.num_cells, n_frames), 1.0 / n_frames if mean else 1.0)
    return ReferencePoints(loc, np.ones((grid.num_cells, n_frames), dtype=bool), bank=bank, scale=scale)


class TemporalEncoder(Layer):
    def __init__(self, cfg: TemporalConfig, grid: BevGrid, C: int, heads: int = 4, points: int = 4,
                 rng=None, zero_init: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.grid = grid
        n = np.arange(grid.num_cells)
        self._pos = sinusoidal_2d(n // grid.W, n % grid.W, C)
        self.layers = [(AttnSublayer(C, heads, points, 2, C, rng, zero_init),
                        FFNSublayer(C, 4 * C, rng, zero_init)) for _ in range(cfg.num_layers)]
        self.final_norm = LayerNorm(C)

    def named_params(self, prefix: str = ""):
        out = {}
        for i, (tca, ffn) in enumerate(self.layers):
            out.update(tca.named_params(f"{prefix}layers.{i}.tca."))
            out.update(ffn.named_params(f"{prefix}layers.{i}.ffn."))
        out.update(self.final_norm.named_params(f"{prefix}final_norm."))
        return out

    def forward(self, frames: list[np.ndarray]):
        """``frames[0]`` is the current ``[C, H, W]`` map, the rest aligned history."""
        C = frames[0].shape[0]
        vol = np.ascontiguousarray(np.stack(frames).transpose(0, 2, 3, 1))
        refs = temporal_refs(self.grid, len(frames), self.cfg.mean)
        x = frames[0].reshape(C, -1).T + self._pos
        caches = []
        for tca, ffn in self.layers:
            y, ct = tca.increment(x, refs, vol)
            x = x + y
            y, cf = ffn.increment(x)
            x = x + y
            caches.append((ct, cf))
        out, cn = self.final_norm.forward(x)
        return out.T.reshape(frames[0].shape), (caches, cn, frames[0].shape)

    def backward(self, dout: np.ndarray, cache) -> np.ndarray:
        """Returns the gradient w.r.t. the current-frame map only."""
        caches, cn, shape = cache
        C = shape[0]
        dx = self.final_norm.backward(dout.reshape(C, -1).T, cn)
        dcur = np.zeros((shape[1], shape[2], C))
        for (tca, ffn), (ct, cf) in zip(reversed(self.layers), reversed(caches)):
            dx = dx + ffn.increment_backward(dx, cf)
            dh, dvol = tca.increment_backward(dx, ct)
            dx = dx + dh
            dcur += dvol[0]
        return dx.T.reshape(shape) + dcur.transpose(2, 0, 1)

    def attention_term(self, frames: list[np.ndarray], layer: int = 0) -> np.ndarray:
        """Pre-residual temporal cross-attention of the first layer's input."""
        C = frames[0].shape[0]
        vol = np.ascontiguousarray(np.stack(frames).transpose(0, 2, 3, 1))
        x = frames[0].reshape(C, -1).T + self._pos
        return self.layers[layer][0].increment(x, temporal_refs(self.grid, len(frames), self.cfg.mean), vol)[0]


class TemporalConcat(Layer):
    """Baseline: channel-concatenate ``frames`` aligned maps (zero padded) + 3x3 conv."""

    def __init__(self, cfg: TemporalConfig, C: int, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.conv = Conv(C * cfg.frames, C, 3, 2, rng)

    def forward(self, frames: list[np.ndarray]):
        C, H, W = frames[0].shape
        stack = np.zeros((self.cfg.frames, C, H, W))
        for i, f in enumerate(frames[: self.cfg.frames]):
            stack[i] = f
        y, cc = self.conv.forward(stack.reshape(-1, H, W))
        return y, (cc, frames[0].shape)

    def backward(self, dout, cache):
        cc, shape = cache
        return self.conv.backward(dout, cc)[: shape[0]]


def tfe_forward(current: np.ndarray, buf: BevHistory, pose_now: EgoPose, encoder: TemporalEncoder) -> np.ndarray:
    frames = aligned_frames(current, buf, pose_now, encoder.grid, encoder.cfg.frames)
    return encoder.forward(frames)[0]


# ---------------------------------------------------------------------------
# history files: b"FBHS1" u32 count, then per record
#   i64 timestamp, 16 f64 pose (row-major 4x4), tensor record (see branches)

HISTORY_MAGIC = b"FBHS1"


def save_history(path: str | Path, buf: BevHistory) -> None:
    with open(path, "wb") as fh:
        fh.write(HISTORY_MAGIC)
        fh.write(struct.pack("<II", len(buf), buf.capacity))
        for bev, pose in buf:
            fh.write(struct.pack("<q", pose.timestamp))
            fh.write(np.ascontiguousarray(pose.T_world_ego, dtype="<f8").tobytes())
            write_tensor(fh, bev)


def load_history(path: str | Path) -> BevHistory:
    blob = Path(path).read_bytes()
    if blob[:5] != HISTORY_MAGIC:
        raise ValueError(f"{path}: not a history file")
    count, cap = struct.unpack_from("<II", blob, 5)
    pos = 13
    buf = BevHistory(cap)
    for _ in range(count):
        (ts,) = struct.unpack_from("<q", blob, pos)
        pos += 8
        T = np.frombuffer(blob, dtype="<f8", count=16, offset=pos).reshape(4, 4).astype(np.float64)
        pos += 128
        bev, pos = read_tensor(blob, pos)
        buf.push(bev, EgoPose(int(ts), T))
    return buf
