"""Scenes, PGM/PPM images, dataset manifests, synthetic crowds and training batches."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .density import HeadAnnotations, KernelSpec, read_annotation_json, render_stack, write_annotation_json

SPLITS = ("train", "val", "test")
LUMA = np.array([0.299, 0.587, 0.114])


class DatasetError(ValueError):
    pass


@dataclass
class Scene:
    image: np.ndarray  # (c, h, w) float32 in [0, 1]
    annotations: HeadAnnotations
    id: str = ""

    def __post_init__(self):
        if self.image.ndim != 3:
            raise ValueError(f"scene image must be (c, h, w), got {self.image.shape}")
        if self.image.shape[1:] != (self.annotations.height, self.annotations.width):
            raise ValueError(
                f"scene {self.id!r}: image size {self.image.shape[1:]} != annotation size "
                f"{(self.annotations.height, self.annotations.width)}"
            )

    @property
    def count(self) -> int:
        return self.annotations.count


# --- PGM / PPM -------------------------------------------------------------

_PNM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*(\S+)")


def read_pnm(path) -> tuple[np.ndarray, int]:
    """Read a binary PGM (P5) or PPM (P6) into an (h, w) or (h, w, 3) array of raw values.

    Returns ``(array, maxval)``.
    """
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"image file not found: {path}") from None
    pos, tokens = 0, []
    for _ in range(4):
        m = _PNM_TOKEN.match(buf, pos)
        if not m:
            raise DatasetError(f"{path}: truncated PNM header")
        tokens.append(m.group(1))
        pos = m.end()
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise DatasetError(f"{path}: unsupported image format {magic!r} (only binary P5/P6)")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DatasetError(f"{path}: malformed PNM header {tokens}") from None
    if not 0 < maxval < 65536:
        raise DatasetError(f"{path}: maxval {maxval} out of range")
    pos += 1  # single whitespace byte after maxval
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    if len(buf) - pos < count * dtype.itemsize:
        raise DatasetError(f"{path}: pixel data truncated")
    data = np.frombuffer(buf, dtype, count, pos)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return data.reshape(shape), maxval


def write_pnm(path, pixels: np.ndarray, maxval: int = 255) -> None:
    """Write 8-bit (h, w) as P5 or (h, w, 3) as P6."""
    pixels = np.asarray(pixels)
    magic = b"P6" if pixels.ndim == 3 else b"P5"
    h, w = pixels.shape[:2]
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n%d\n" % (w, h, maxval))
        f.write(np.ascontiguousarray(pixels, dtype=dtype).tobytes())


def image_to_tensor(pixels: np.ndarray, maxval: int, channels: int = 1) -> np.ndarray:
    """Scale raw PNM values to [0, 1] as a (c, h, w) float32 array."""
    img = pixels.astype(np.float64) / maxval
    if img.ndim == 2:
        img = img[None] if channels == 1 else np.repeat(img[None], 3, axis=0)
    else:
        img = (img @ LUMA)[None] if channels == 1 else img.transpose(2, 0, 1)
    return img.astype(np.float32)


# --- scenes ------------------------------------------------------------------

def crop_scene(scene: Scene, height: int, width: int) -> Scene:
    """Center crop; heads falling outside the crop are dropped."""
    _, h, w = scene.image.shape
    if height > h or width > w:
        raise DatasetError(f"scene {scene.id!r} is {h}x{w}, smaller than crop {height}x{width}")
    top, left = (h - height) // 2, (w - width) // 2
    pts = scene.annotations.points - np.array([left, top], dtype=np.float64)
    keep = (pts[:, 0] >= 0) & (pts[:, 0] < width) & (pts[:, 1] >= 0) & (pts[:, 1] < height)
    return Scene(
        scene.image[:, top : top + height, left : left + width].copy(),
        HeadAnnotations(height, width, pts[keep]),
        scene.id,
    )


def crop_to_multiple(scene: Scene, multiple: int = 8) -> Scene:
    _, h, w = scene.image.shape
    return crop_scene(scene, h - h % multiple, w - w % multiple)


def load_scene(annotation_path, channels: int = 1, multiple: int = 8) -> Scene:
    annotation_path = Path(annotation_path)
    image_ref, ann = read_annotation_json(annotation_path)
    image_path = Path(image_ref)
    if not image_path.is_absolute():
        image_path = annotation_path.parent / image_path
    pixels, maxval = read_pnm(image_path)
    if pixels.shape[:2] != (ann.height, ann.width):
        raise DatasetError(
            f"{annotation_path}: image {image_path} is {pixels.shape[1]}x{pixels.shape[0]}, "
            f"annotation says {ann.width}x{ann.height}"
        )
    scene = Scene(image_to_tensor(pixels, maxval, channels), ann, annotation_path.stem)
    return crop_to_multiple(scene, multiple)


def save_scene(scene: Scene, directory) -> Path:
    """Write ``<id>.pgm`` (or .ppm) plus ``<id>.json``; returns the annotation path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    img = np.clip(np.rint(scene.image * 255), 0, 255).astype(np.uint8)
    ext = "ppm" if img.shape[0] == 3 else "pgm"
    write_pnm(directory / f"{scene.id}.{ext}", img.transpose(1, 2, 0) if ext == "ppm" else img[0])
    ann_path = directory / f"{scene.id}.json"
    write_annotation_json(ann_path, f"{scene.id}.{ext}", scene.annotations)
    return ann_path


# --- manifests ---------------------------------------------------------------

def read_manifest(path) -> list[tuple[Path, str]]:
    path = Path(path)
    try:
        entries = json.loads(path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: malformed manifest JSON ({e})") from None
    out = []
    for e in entries:
        if not isinstance(e, dict) or "annotation" not in e or e.get("split") not in SPLITS:
            raise DatasetError(f"{path}: bad manifest entry {e!r}; need annotation and split in {SPLITS}")
        p = Path(e["annotation"])
        out.append((p if p.is_absolute() else path.parent / p, e["split"]))
    return out


def write_manifest(path, entries: Sequence[tuple[str, str]]) -> None:
    Path(path).write_text(json.dumps([{"annotation": a, "split": s} for a, s in entries], indent=1))


def load_split(manifest_path, split: str, channels: int = 1) -> list[Scene]:
    return [load_scene(p, channels) for p, s in read_manifest(manifest_path) if s == split]


# --- synthetic crowds --------------------------------------------------------

@dataclass
class SyntheticSceneSpec:
    image_size: tuple[int, int] = (192, 192)
    head_count: tuple[int, int] = (10, 80)
    cluster_count: tuple[int, int] = (1, 4)
    cluster_spread: float = 30.0
    disk_radius: tuple[float, float] = (2.5, 4.0)
    intensity: tuple[float, float] = (0.7, 1.0)
    noise: float = 0.05
    background: float = 0.2
    channels: int = 1
    seed: int = 0
    # "clustered" scatters head_count heads around random centres; "lattice" seats heads on a
    # randomly spaced and offset square grid covering the whole frame, like stadium seating
    layout: str = "clustered"
    lattice_spacing: tuple[float, float] = (14.0, 22.0)
    lattice_jitter: float = 0.0

    def __post_init__(self):
        if self.layout not in ("clustered", "lattice"):
            raise ValueError(f"layout must be 'clustered' or 'lattice', got {self.layout!r}")
        if self.lattice_spacing[0] <= 0 or self.lattice_jitter < 0:
            raise ValueError("lattice_spacing must be positive and lattice_jitter >= 0")
        for name in ("head_count", "cluster_count", "disk_radius", "intensity", "lattice_spacing"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is empty: ({lo}, {hi})")
            setattr(self, name, (lo, hi))
        self.image_size = tuple(int(v) for v in self.image_size)
        if self.head_count[0] < 0 or self.cluster_count[0] < 1 or min(self.image_size) < 1:
            raise ValueError("head_count must be >= 0, cluster_count >= 1 and image_size positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _clustered_points(spec: SyntheticSceneSpec, rng) -> np.ndarray:
    h, w = spec.image_size
    n = int(rng.integers(spec.head_count[0], spec.head_count[1] + 1))
    k = int(rng.integers(spec.cluster_count[0], spec.cluster_count[1] + 1))
    centers = rng.uniform([0, 0], [w, h], size=(k, 2))
    points = np.empty((n, 2))
    for i in range(n):
        c = centers[rng.integers(k)]
        while True:
            p = c + rng.normal(0.0, spec.cluster_spread, 2)
            if 0 <= p[0] < w and 0 <= p[1] < h:
                break
        points[i] = p
    return points


def _lattice_points(spec: SyntheticSceneSpec, rng) -> np.ndarray:
    h, w = spec.image_size
    step = rng.uniform(*spec.lattice_spacing)
    ox, oy = rng.uniform(0, step, 2)
    gx, gy = np.meshgrid(np.arange(ox, w, step), np.arange(oy, h, step))
    points = np.stack([gx.ravel(), gy.ravel()], axis=1)
    points += rng.normal(0.0, spec.lattice_jitter, points.shape)
    inside = (points[:, 0] >= 0) & (points[:, 0] < w) & (points[:, 1] >= 0) & (points[:, 1] < h)
    return points[inside]


def generate_synthetic(spec: SyntheticSceneSpec, scene_id: str | None = None) -> Scene:
    """Heads painted as bright disks over a noisy background."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.image_size
    points = _lattice_points(spec, rng) if spec.layout == "lattice" else _clustered_points(spec, rng)
    n = len(points)

    img = spec.background + rng.normal(0.0, spec.noise, (h, w))
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    radii = rng.uniform(*spec.disk_radius, size=n)
    levels = rng.uniform(*spec.intensity, size=n)
    for (x, y), r, v in zip(points, radii, levels):
        y0, y1 = max(int(y - r) - 1, 0), min(int(y + r) + 2, h)
        x0, x1 = max(int(x - r) - 1, 0), min(int(x + r) + 2, w)
        disk = (xx[y0:y1, x0:x1] - x) ** 2 + (yy[y0:y1, x0:x1] - y) ** 2 <= r * r
        img[y0:y1, x0:x1][disk] = v
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    img = np.repeat(img[None], spec.channels, axis=0)
    return Scene(img, HeadAnnotations(h, w, points), scene_id or f"synth_{spec.seed:06d}")


def synthetic_set(spec: SyntheticSceneSpec, count: int, first_seed: int | None = None) -> list[Scene]:
    base = spec.seed if first_seed is None else first_seed
    out = []
    for i in range(count):
        s = SyntheticSceneSpec(**{**spec.to_dict(), "seed": base + i})
        out.append(generate_synthetic(s))
    return out


# --- batching ----------------------------------------------------------------

@dataclass
class Batch:
    images: np.ndarray  # (n, c, h, w)
    gt_density: np.ndarray  # (n, 1, h/f, w/f)
    ids: list[str] = field(default_factory=list)
    counts: np.ndarray = field(default_factory=lambda: np.zeros(0))


def stack_scenes(scenes: Sequence[Scene], factor: int, spec: KernelSpec):
    """Images, sum-pooled ground truth and head counts for equally sized scenes."""
    shapes = {s.image.shape for s in scenes}
    if len(shapes) != 1:
        raise ValueError(f"scenes must share one image shape to be batched, got {sorted(shapes)}")
    images = np.stack([s.image for s in scenes]).astype(np.float32)
    gt = render_stack([s.annotations for s in scenes], spec, factor)
    counts = np.array([s.count for s in scenes], dtype=np.float64)
    return images, gt, counts


def iter_batches(n: int, batch_size: int, rng: np.random.Generator | None) -> Iterator[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def make_batches(scenes: Sequence[Scene], batch_size: int, factor: int, spec: KernelSpec | None = None,
                 seed: int | None = 0) -> list[Batch]:
    """Shuffle (``seed=None`` keeps input order) and cut into batches; last may be partial."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    images, gt, counts = stack_scenes(scenes, factor, spec or KernelSpec())
    rng = None if seed is None else np.random.default_rng(seed)
    return [
        Batch(images[idx], gt[idx], [scenes[i].id for i in idx], counts[idx])
        for idx in iter_batches(len(scenes), batch_size, rng)
    ]
