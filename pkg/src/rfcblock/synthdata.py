"""Deterministic synthetic occluded tracklets.

Each identity is a six-part body template (head, upper body, four leg
quadrants) laid out on a fixed background; occluders are bottom-anchored
bands drawn from a small bank of textures shared by every identity. All
randomness comes from Philox streams keyed by (seed, stream, identity,
tracklet, frame), so any sample can be regenerated in isolation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rfct
from .errors import ValidationError
from .partition import one_hot

# body-part boundaries as fractions of the image height/width
SHOULDER, HIP, KNEE = 0.2, 0.5, 0.75
OBSTACLES = 4

_TEMPLATE, _OBSTACLE, _FRAME, _BACKGROUND = 1, 2, 3, 4


@dataclass(frozen=True)
class SynthConfig:
    num_identities: int = 10
    tracklets_per_identity: int = 4
    frames: int = 32
    height: int = 32
    width: int = 16
    channels: int = 3
    occlusion_prob: float = 0.5
    occlusion_range: tuple[float, float] = (0.25, 0.5)
    occlusion_position: str = "bottom"  # or "uniform"
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ValidationError("occlusion_prob must lie in [0, 1]")
        lo, hi = self.occlusion_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValidationError("occlusion_range must satisfy 0 <= lo <= hi <= 1")
        if self.height < 8 or self.width < 4:
            raise ValidationError("images must be at least 8x4")
        if self.occlusion_position not in ("bottom", "uniform"):
            raise ValidationError(f"unknown occlusion position {self.occlusion_position!r}")
        if self.num_identities < 1 or self.frames < 1 or self.channels < 1:
            raise ValidationError("counts must be positive")


def rng_for(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for one (seed, key...) cell."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def keypoint_rows(height: int, width: int) -> tuple[int, int, int, int]:
    """(shoulder row, hip row, knee row, knee column): last row/column of each upper part."""
    a1 = max(int(round(SHOULDER * height)) - 1, 0)
    a2 = max(int(round(HIP * height)) - 1, a1 + 1)
    a3 = max(int(round(KNEE * height)) - 1, a2 + 1)
    a4 = width // 2 - 1
    return a1, a2, a3, a4


def part_map(height: int, width: int) -> np.ndarray:
    """Integer map: -1 background, 0..5 body parts in partition order."""
    a1, a2, a3, a4 = keypoint_rows(height, width)
    parts = np.full((height, width), -1, dtype=np.int64)
    margin = max(width // 8, 1)
    head_margin = max(width // 4, margin)
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    body = (cols >= margin) & (cols < width - margin)
    head = (cols >= head_margin) & (cols < width - head_margin)
    left = cols <= a4
    parts[np.broadcast_to((rows <= a1) & head, parts.shape)] = 0
    parts[np.broadcast_to((rows > a1) & (rows <= a2) & body, parts.shape)] = 1
    mid = (rows > a2) & (rows <= a3) & body
    low = (rows > a3) & body
    parts[np.broadcast_to(mid & left, parts.shape)] = 2
    parts[np.broadcast_to(mid & ~left, parts.shape)] = 3
    parts[np.broadcast_to(low & left, parts.shape)] = 4
    parts[np.broadcast_to(low & ~left, parts.shape)] = 5
    return parts


def background(config: SynthConfig) -> np.ndarray:
    rng = rng_for(config.seed, _BACKGROUND)
    base = rng.normal(0.0, 0.3, config.channels)
    ramp = np.linspace(-0.2, 0.2, config.height)[:, None, None]
    return np.broadcast_to(base + ramp, (config.height, config.width, config.channels)).copy()


@dataclass
class IdentityTemplate:
    identity: int
    image: np.ndarray  # H x W x C, no noise, no occlusion
    body_mask: np.ndarray  # H x W, 1 on the person
    colors: np.ndarray  # 6 x C part colors


def generate_identity(identity: int, config: SynthConfig) -> IdentityTemplate:
    if identity < 0:
        raise ValidationError("identity must be non-negative")
    rng = rng_for(config.seed, _TEMPLATE, identity)
    h, w, c = config.height, config.width, config.channels
    colors = rng.normal(0.0, 1.0, (6, c))
    phases = rng.uniform(0.0, 2 * np.pi, 6)
    freqs = rng.integers(1, 4, 6)
    parts = part_map(h, w)
    image = background(config)
    rows = np.arange(h)[:, None]
    for p in range(6):
        sel = parts == p
        stripes = 0.3 * np.sin(2 * np.pi * freqs[p] * rows / h + phases[p])
        texture = np.broadcast_to(stripes, (h, w))[sel]
        image[sel] = colors[p] + texture[:, None]
    return IdentityTemplate(identity, image, (parts >= 0).astype(np.float64), colors)


def obstacle_bank(config: SynthConfig) -> np.ndarray:
    """OBSTACLES x H x W x C textures shared by all identities."""
    rng = rng_for(config.seed, _OBSTACLE)
    h, w, c = config.height, config.width, config.channels
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    patterns = [
        ((rows // 2 + cols // 2) % 2) * 2.0 - 1.0,  # checker
        np.sin(2 * np.pi * cols / 4.0),  # vertical stripes
        np.sin(2 * np.pi * (rows + cols) / 6.0),  # diagonal
        np.ones((h, w)),  # flat slab
    ]
    bank = np.empty((OBSTACLES, h, w, c))
    for k in range(OBSTACLES):
        color = rng.normal(0.0, 1.0, c)
        bank[k] = color + 0.5 * patterns[k % len(patterns)][..., None]
    return bank


@dataclass
class SynthSample:
    images: np.ndarray  # T x H x W x C
    identity: int
    camera: int
    keypoints: np.ndarray  # T x 4 integer label positions
    foreground: np.ndarray  # T x H x W binary
    occlusion: np.ndarray  # T x 2: (fraction, first occluded row) , fraction 0 when clean
    tracklet: int = 0
    meta: dict = field(default_factory=dict)

    def keypoint_labels(self) -> list[np.ndarray]:
        """Four one-hot label arrays, shapes (T, H), (T, H), (T, H), (T, W)."""
        t, h, w = self.foreground.shape
        return [one_hot(self.keypoints[:, i], h) for i in range(3)] + [one_hot(self.keypoints[:, 3], w)]


def generate_tracklet(identity: int, config: SynthConfig, tracklet: int = 0,
                      occlusion_prob: float | None = None, frames: int | None = None,
                      camera: int | None = None) -> SynthSample:
    template = generate_identity(identity, config)
    bank = obstacle_bank(config)
    prob = config.occlusion_prob if occlusion_prob is None else occlusion_prob
    t = config.frames if frames is None else frames
    h = config.height
    images = np.empty((t, h, config.width, config.channels))
    fg = np.empty((t, h, config.width))
    occ = np.zeros((t, 2))
    lo, hi = config.occlusion_range
    for k in range(t):
        rng = rng_for(config.seed, _FRAME, identity, tracklet, k)
        occluded = rng.random() < prob
        fraction = rng.uniform(lo, hi)
        which = rng.integers(OBSTACLES)
        offset = rng.random()
        noise = rng.normal(0.0, config.noise, images.shape[1:])
        frame = template.image.copy()
        mask = template.body_mask.copy()
        if occluded:
            rows = int(np.ceil(fraction * h))
            if config.occlusion_position == "bottom":
                start = h - rows
            else:
                start = int(np.floor(offset * (h - rows + 1)))
            if rows:
                frame[start:start + rows] = bank[which, start:start + rows]
                mask[start:start + rows] = 0.0
            occ[k] = (rows / h, start)
        images[k] = frame + noise
        fg[k] = mask
    kp = np.tile(np.array(keypoint_rows(h, config.width)), (t, 1))
    cam = tracklet if camera is None else camera
    return SynthSample(images, identity, cam, kp, fg, occ, tracklet)


def export_dataset(directory, config: SynthConfig, query_occlusion: float | None = None,
                   gallery_occlusion: float | None = 0.0) -> Path:
    """Write every tracklet as RFCT plus ``manifest.csv``.

    Camera 0 tracklets act as queries, the rest as gallery.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    tid = 0
    for identity in range(config.num_identities):
        for tr in range(config.tracklets_per_identity):
            prob = query_occlusion if tr == 0 else gallery_occlusion
            sample = generate_tracklet(identity, config, tracklet=tr, occlusion_prob=prob)
            name = f"tracklet_{tid:05d}.rfct"
            rfct.save(directory / name, sample.images)
            rows.append((tid, identity, sample.camera, sample.images.shape[0], name))
            tid += 1
    with open(directory / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tracklet_id", "identity", "camera", "frame_count", "file"])
        writer.writerows(rows)
    return directory / "manifest.csv"


def read_manifest(path) -> list[dict]:
    path = Path(path)
    with open(path, newline="") as fh:
        out = []
        for row in csv.DictReader(fh):
            out.append({
                "tracklet_id": int(row["tracklet_id"]),
                "identity": int(row["identity"]),
                "camera": int(row["camera"]),
                "frame_count": int(row["frame_count"]),
                "file": path.parent / row["file"],
            })
    return out
