"""Ground-truth density maps from head annotations.

Each head contributes a truncated isotropic Gaussian stamp that is
renormalized over its in-image support, so a rendered map sums to the head
count up to float rounding.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

CDM_MAGIC = b"CDM1"


@dataclass
class HeadAnnotations:
    height: int
    width: int
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))  # (N, 2) of (x, y)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.points = pts
        if self.height < 1 or self.width < 1:
            raise ValueError(f"image size must be positive, got {self.height}x{self.width}")
        bad = ~((pts[:, 0] >= 0) & (pts[:, 0] < self.width) & (pts[:, 1] >= 0) & (pts[:, 1] < self.height))
        if bad.any():
            x, y = pts[np.argmax(bad)]
            raise ValueError(
                f"head point ({x}, {y}) lies outside the {self.width}x{self.height} image"
            )

    @property
    def count(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class KernelSpec:
    mode: str = "fixed"
    sigma_fixed: float = 15.0
    beta: float = 0.3
    k_neighbors: int = 3
    truncation_radius_sigmas: float = 4.0

    def __post_init__(self):
        if self.mode not in ("fixed", "adaptive"):
            raise ValueError(f"kernel mode must be 'fixed' or 'adaptive', got {self.mode!r}")
        if self.sigma_fixed <= 0:
            raise ValueError(f"sigma_fixed must be > 0, got {self.sigma_fixed}")
        if self.beta <= 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if self.k_neighbors < 1:
            raise ValueError(f"k_neighbors must be >= 1, got {self.k_neighbors}")
        if self.truncation_radius_sigmas < 2:
            raise ValueError(
                f"truncation_radius_sigmas must be >= 2, got {self.truncation_radius_sigmas}"
            )


@dataclass
class DensityMap:
    raster: np.ndarray  # (h, w), nonnegative
    scale: int = 1

    @property
    def count(self) -> float:
        return float(self.raster.sum(dtype=np.float64))


def _pairwise_distances(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt((diff**2).sum(-1))


def knn_mean_distance(points, i: int, k: int) -> float | None:
    """Mean distance from ``points[i]`` to its ``k`` nearest other points.

    With fewer than ``k`` other points the mean runs over all of them; a lone
    point has no neighbours and yields ``None``.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if not 0 <= i < n:
        raise IndexError(f"point index {i} out of range for {n} points")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if n == 1:
        return None
    d = np.sqrt(((pts - pts[i]) ** 2).sum(axis=1))
    others = np.delete(np.arange(n), i)
    order = others[np.argsort(d[others], kind="stable")]
    return float(d[order[: min(k, n - 1)]].mean())


def knn_mean_distances(points: np.ndarray, k: int) -> np.ndarray:
    """Vectorised :func:`knn_mean_distance` for every point (NaN for a lone point)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n < 2:
        return np.full(n, np.nan)
    d = _pairwise_distances(pts)
    np.fill_diagonal(d, np.inf)
    kk = min(k, n - 1)
    nearest = np.sort(d, axis=1)[:, :kk]
    return nearest.mean(axis=1)


def head_sigmas(ann: HeadAnnotations, spec: KernelSpec) -> np.ndarray:
    n = ann.count
    if spec.mode == "fixed" or n == 0:
        return np.full(n, spec.sigma_fixed)
    dbar = knn_mean_distances(ann.points, spec.k_neighbors)
    diag = math.hypot(ann.height, ann.width)
    sig = np.clip(spec.beta * dbar, 0.5, diag / 4)
    return np.where(np.isnan(dbar), spec.sigma_fixed, sig)


def gaussian_stamp(x: float, y: float, sigma: float, height: int, width: int,
                   truncation: float = 4.0):
    """Unit-mass stamp for one head, clipped to the image.

    Returns ``(row0, col0, patch)``; the patch covers pixels whose centres lie
    within ``truncation * sigma`` of the head.
    """
    radius = truncation * sigma
    ix, iy = math.floor(x), math.floor(y)
    fx, fy = x - ix, y - iy
    r = int(math.ceil(radius)) + 1
    c0, c1 = max(ix - r, 0), min(ix + r + 1, width)
    r0, r1 = max(iy - r, 0), min(iy + r + 1, height)
    # offsets of pixel centres from the head, expressed relative to its integer cell
    dx = (np.arange(c0, c1) - ix) + (0.5 - fx)
    dy = (np.arange(r0, r1) - iy) + (0.5 - fy)
    d2 = dy[:, None] ** 2 + dx[None, :] ** 2
    patch = np.exp(-d2 / (2.0 * sigma * sigma))
    patch[d2 > radius * radius] = 0.0
    mass = patch.sum()
    if mass <= 0:
        # support empty after clipping; put the head's mass on its own pixel
        patch = np.zeros_like(patch)
        patch[iy - r0, ix - c0] = 1.0
        return r0, c0, patch
    return r0, c0, patch / mass


def render_density(ann: HeadAnnotations, spec: KernelSpec | None = None) -> DensityMap:
    spec = spec or KernelSpec()
    raster = np.zeros((ann.height, ann.width), dtype=np.float64)
    sigmas = head_sigmas(ann, spec)
    for (x, y), s in zip(ann.points, sigmas):
        r0, c0, patch = gaussian_stamp(x, y, float(s), ann.height, ann.width,
                                       spec.truncation_radius_sigmas)
        raster[r0 : r0 + patch.shape[0], c0 : c0 + patch.shape[1]] += patch
    return DensityMap(raster, scale=1)


def downsample_preserving_count(dm: DensityMap, factor: int) -> DensityMap:
    """Sum-pool ``factor x factor`` blocks, keeping total mass."""
    if factor not in (1, 2, 4, 8):
        raise ValueError(f"downsampling factor must be one of 1, 2, 4, 8; got {factor}")
    h, w = dm.raster.shape
    if h % factor or w % factor:
        raise ValueError(f"density map {h}x{w} is not divisible by factor {factor}")
    pooled = dm.raster.reshape(h // factor, factor, w // factor, factor).sum(axis=(1, 3))
    return DensityMap(pooled, scale=dm.scale * factor)


def write_cdm(dm: DensityMap, path) -> None:
    h, w = dm.raster.shape
    data = np.ascontiguousarray(dm.raster, dtype="<f4")
    with open(path, "wb") as f:
        f.write(CDM_MAGIC)
        f.write(struct.pack("<III", h, w, dm.scale))
        f.write(data.tobytes())


def read_cdm(path) -> DensityMap:
    buf = Path(path).read_bytes()
    if buf[:4] != CDM_MAGIC:
        raise ValueError(f"{path}: bad magic {buf[:4]!r}, expected {CDM_MAGIC!r}")
    if len(buf) < 16:
        raise ValueError(f"{path}: truncated header")
    h, w, scale = struct.unpack_from("<III", buf, 4)
    expected = 16 + 4 * h * w
    if len(buf) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for a {h}x{w} map, found {len(buf)}")
    raster = np.frombuffer(buf, dtype="<f4", offset=16).reshape(h, w).astype(np.float32)
    return DensityMap(raster, scale=scale)


def read_annotation_json(path) -> tuple[str, HeadAnnotations]:
    """Parse ``{"image", "width", "height", "points"}``; returns (image path, annotations)."""
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"annotation file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: malformed annotation JSON ({e})") from None
    missing = [k for k in ("image", "width", "height", "points") if k not in obj]
    if missing:
        raise ValueError(f"{path}: annotation JSON missing keys {missing}")
    try:
        ann = HeadAnnotations(int(obj["height"]), int(obj["width"]), np.asarray(obj["points"], float))
    except ValueError as e:
        raise ValueError(f"{path}: {e}") from None
    return obj["image"], ann


def write_annotation_json(path, image: str, ann: HeadAnnotations) -> None:
    obj = {
        "image": image,
        "width": ann.width,
        "height": ann.height,
        "points": [[float(x), float(y)] for x, y in ann.points],
    }
    Path(path).write_text(json.dumps(obj))


def render_stack(anns: Sequence[HeadAnnotations], spec: KernelSpec, factor: int) -> np.ndarray:
    """Render and sum-pool a list of annotations into an (n, 1, h/f, w/f) float32 batch."""
    maps = [downsample_preserving_count(render_density(a, spec), factor).raster for a in anns]
    return np.stack(maps)[:, None].astype(np.float32)
