"""Datasets and image perturbations.

Synthetic samples are a desk-scale stand-in for the pets task: one textured
shape (ellipse, convex polygon, or Fourier blob) on a differently textured
background, labelled background / object / object-boundary.  The boundary
class is the morphological band of configurable thickness around the
object contour.  All images live in [-0.5, 0.5].
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .rng import RngStream, STREAM_DATA

CLASS_BACKGROUND = 0
CLASS_OBJECT = 1
CLASS_BOUNDARY = 2
NUM_CLASSES = 3

# Oxford pets trimap codes -> our classes
_PETS_TRIMAP = {1: CLASS_OBJECT, 2: CLASS_BACKGROUND, 3: CLASS_BOUNDARY}


class DataError(ValueError):
    pass


@dataclass
class LabelMask:
    """Integer class map (h, w) with values in {0, 1, 2}."""
    classes: np.ndarray

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.int8)
        if self.classes.ndim != 2:
            raise DataError("label mask must be 2-d")
        if self.classes.min() < 0 or self.classes.max() >= NUM_CLASSES:
            raise DataError("label values out of range")

    def one_hot(self, num_classes: int = NUM_CLASSES) -> np.ndarray:
        return np.eye(num_classes, dtype=np.float32)[self.classes]

    @property
    def shape(self):
        return self.classes.shape


@dataclass
class Sample:
    image: np.ndarray          # (h, w, 3) float32 in [-0.5, 0.5]
    label: LabelMask
    source_id: str = ""

    def __post_init__(self):
        if self.image.shape[:2] != self.label.shape:
            raise DataError("image and label spatial shapes differ")


@dataclass
class SyntheticSpec:
    resolution: int = 48
    count: int = 64
    seed: int = 0
    families: Sequence[str] = ("ellipse", "polygon", "blob")
    boundary_thickness: int = 2
    noise_sigma: float = 0.03
    min_object_frac: float = 0.10
    max_object_frac: float = 0.60

    def validate(self):
        if self.resolution < 8:
            raise DataError("resolution too small")
        if self.boundary_thickness < 1:
            raise DataError("boundary thickness must be >= 1")
        known = {"ellipse", "polygon", "blob"}
        bad = set(self.families) - known
        if bad:
            raise DataError(f"unknown shape families {sorted(bad)}")
        if not self.families:
            raise DataError("no shape families")
        return self


def _dilate(mask: np.ndarray, iterations: int) -> np.ndarray:
    """Binary dilation with the full 3x3 structuring element (shift-or)."""
    out = mask.copy()
    for _ in range(iterations):
        padded = np.pad(out, 1)
        acc = np.zeros_like(out)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                acc |= padded[1 + dy:1 + dy + out.shape[0],
                              1 + dx:1 + dx + out.shape[1]]
        out = acc
    return out


def _erode(mask: np.ndarray, iterations: int) -> np.ndarray:
    """Binary erosion, outside-of-frame counts as background (shift-and)."""
    out = mask.copy()
    for _ in range(iterations):
        padded = np.pad(out, 1, constant_values=False)
        acc = np.ones_like(out)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                acc &= padded[1 + dy:1 + dy + out.shape[0],
                              1 + dx:1 + dx + out.shape[1]]
        out = acc
    return out


def boundary_band(mask: np.ndarray, thickness: int) -> np.ndarray:
    """Pixels within `thickness` of the contour: dilate(M) & ~erode(M)."""
    d_it = (thickness + 1) // 2
    e_it = thickness // 2
    return _dilate(mask, d_it) & ~_erode(mask, e_it)


def _ellipse_mask(res: int, rng: RngStream) -> np.ndarray:
    cy, cx = (rng.uniform(2) * 0.4 + 0.3) * res
    ry = (rng.uniform(1)[0] * 0.25 + 0.15) * res
    rx = (rng.uniform(1)[0] * 0.25 + 0.15) * res
    theta = rng.uniform(1)[0] * np.pi
    yy, xx = np.mgrid[0:res, 0:res]
    y, x = yy - cy, xx - cx
    ct, st = np.cos(theta), np.sin(theta)
    u, v = ct * x + st * y, -st * x + ct * y
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew monotone chain; points (n, 2) -> hull vertices (m, 2) CCW."""
    pts = points[np.lexsort((points[:, 1], points[:, 0]))]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    def half(iterable):
        out: list[np.ndarray] = []
        for p in iterable:
            while len(out) >= 2 and cross(out[-2], out[-1], p) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def _polygon_mask(res: int, rng: RngStream) -> np.ndarray:
    n = int(rng.integers(5, 9))
    center = (rng.uniform(2) * 0.3 + 0.35) * res
    radius = (rng.uniform(n) * 0.2 + 0.18) * res
    angles = np.sort(rng.uniform(n)) * 2.0 * np.pi
    pts = np.stack([center[0] + radius * np.sin(angles),
                    center[1] + radius * np.cos(angles)], axis=1)
    hull = _convex_hull(pts)
    yy, xx = np.mgrid[0:res, 0:res]
    inside = np.ones((res, res), dtype=bool)
    for i in range(len(hull)):
        a, b = hull[i], hull[(i + 1) % len(hull)]
        inside &= ((b[0] - a[0]) * (xx - a[1]) - (b[1] - a[1]) * (yy - a[0])) <= 0
    return inside


def _blob_mask(res: int, rng: RngStream) -> np.ndarray:
    """Star-convex region with a random low-order Fourier boundary radius."""
    cy, cx = (rng.uniform(2) * 0.3 + 0.35) * res
    r0 = (rng.uniform(1)[0] * 0.18 + 0.2) * res
    amps = (rng.uniform(4) * 0.25) * r0
    phases = rng.uniform(4) * 2.0 * np.pi
    yy, xx = np.mgrid[0:res, 0:res]
    ang = np.arctan2(yy - cy, xx - cx)
    rad = np.hypot(yy - cy, xx - cx)
    rb = np.full((res, res), r0)
    for k in range(4):
        rb = rb + amps[k] * np.cos((k + 2) * ang + phases[k])
    return rad <= rb


_SHAPE_FN = {"ellipse": _ellipse_mask, "polygon": _polygon_mask, "blob": _blob_mask}


def _distinct_colors(rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    for _ in range(100):
        bg = (rng.uniform(3) * 0.8 - 0.4).astype(np.float32)
        obj = (rng.uniform(3) * 0.8 - 0.4).astype(np.float32)
        if np.abs(bg - obj).max() >= 0.25:
            return bg, obj
    raise DataError("could not draw distinct region colors")


def _make_sample(spec: SyntheticSpec, rng: RngStream, index: int) -> Sample:
    res = spec.resolution
    lo, hi = spec.min_object_frac, spec.max_object_frac
    for _ in range(200):
        family = spec.families[int(rng.integers(0, len(spec.families)))]
        mask = _SHAPE_FN[family](res, rng)
        frac = mask.mean()
        if not lo <= frac <= hi:
            continue
        band = boundary_band(mask, spec.boundary_thickness)
        classes = np.full((res, res), CLASS_BACKGROUND, dtype=np.int8)
        classes[mask] = CLASS_OBJECT
        classes[band] = CLASS_BOUNDARY
        if (classes == CLASS_OBJECT).sum() == 0:
            continue  # band swallowed the interior; too thin
        bg, obj = _distinct_colors(rng)
        image = np.where(mask[..., None], obj, bg).astype(np.float32)
        image += (rng.normal((res, res, 3)) * spec.noise_sigma)
        image = np.clip(image, -0.5, 0.5)
        return Sample(image, LabelMask(classes), source_id=f"synthetic/{index}")
    raise DataError("degenerate spec: could not generate a usable shape")


def generate_synthetic(spec: SyntheticSpec) -> list[Sample]:
    """Deterministic for a given seed; every sample has all 3 classes."""
    spec.validate()
    base = RngStream(spec.seed, STREAM_DATA)
    return [_make_sample(spec, base.spawn(i), i) for i in range(spec.count)]


class Dataset:
    """An indexable sample list with seeded uniform draws."""

    def __init__(self, samples: list[Sample]):
        if not samples:
            raise DataError("empty dataset")
        self.samples = samples

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i) -> Sample:
        return self.samples[i]

    def draw(self, rng: RngStream) -> Sample:
        return self.samples[int(rng.integers(0, len(self.samples)))]


def synthetic_dataset(spec: SyntheticSpec) -> Dataset:
    return Dataset(generate_synthetic(spec))


# -- perturbations -----------------------------------------------------------

def shift_image(image: np.ndarray, dx: int, dy: int, fill: float = 0.0) -> np.ndarray:
    h, w = image.shape[:2]
    if abs(dx) > w // 4 or abs(dy) > h // 4:
        raise DataError(f"shift ({dx},{dy}) exceeds a quarter of the frame")
    out = np.full_like(image, fill)
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    ys_src = slice(max(-dy, 0), h + min(-dy, 0))
    xs_src = slice(max(-dx, 0), w + min(-dx, 0))
    out[ys, xs] = image[ys_src, xs_src]
    return out


def shift_sample(sample: Sample, dx: int, dy: int) -> Sample:
    """Translate image and label together; vacated pixels become background."""
    img = shift_image(sample.image, dx, dy, fill=0.0)
    lab = shift_image(sample.label.classes, dx, dy, fill=CLASS_BACKGROUND)
    return Sample(img, LabelMask(lab), source_id=sample.source_id + f"+shift({dx},{dy})")


def _check_rect(shape, rect):
    x, y, w, h = rect
    H, W = shape[:2]
    if w < 0 or h < 0 or x < 0 or y < 0 or x + w > W or y + h > H:
        raise DataError(f"rect {rect} outside {W}x{H} frame")


def gray_region(image: np.ndarray, rect) -> np.ndarray:
    """Homogeneous mid-gray (0 in [-0.5,0.5] coordinates); label untouched."""
    _check_rect(image.shape, rect)
    x, y, w, h = rect
    out = image.copy()
    out[y:y + h, x:x + w, :] = 0.0
    return out


def noise_region(image: np.ndarray, rect, sigma: float, rng: RngStream) -> np.ndarray:
    _check_rect(image.shape, rect)
    x, y, w, h = rect
    out = image.copy()
    out[y:y + h, x:x + w, :] = np.clip(
        out[y:y + h, x:x + w, :] + rng.normal((h, w, 3)) * sigma, -0.5, 0.5)
    return out


def perturb(sample: Sample, kind: str, *, dx: int = 0, dy: int = 0,
            new_sample: Optional[Sample] = None, rect=None,
            sigma: float = 0.1, rng: Optional[RngStream] = None) -> Sample:
    """Dispatcher over the supported perturbation kinds."""
    if kind == "shift":
        return shift_sample(sample, dx, dy)
    if kind == "swap":
        if new_sample is None:
            raise DataError("swap needs a replacement sample")
        return new_sample
    if kind == "gray_region":
        return Sample(gray_region(sample.image, rect), sample.label, sample.source_id)
    if kind == "noise_region":
        if rng is None:
            raise DataError("noise_region needs an rng")
        return Sample(noise_region(sample.image, rect, sigma, rng),
                      sample.label, sample.source_id)
    raise DataError(f"unknown perturbation {kind!r}")


# -- PNG cache ---------------------------------------------------------------

def save_dataset(samples: Sequence[Sample], directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        u8 = np.clip((s.image + 0.5) * 255.0, 0, 255).astype(np.uint8)
        Image.fromarray(u8).save(d / f"{i:05d}_image.png")
        Image.fromarray(s.label.classes.astype(np.uint8), mode="L").save(
            d / f"{i:05d}_label.png")


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    images = sorted(d.glob("*_image.png"))
    if not images:
        raise DataError(f"no cached samples in {d}")
    samples = []
    for img_path in images:
        lab_path = d / img_path.name.replace("_image", "_label")
        img = np.asarray(Image.open(img_path), dtype=np.float32) / 255.0 - 0.5
        lab = np.asarray(Image.open(lab_path), dtype=np.int8)
        samples.append(Sample(img, LabelMask(lab), source_id=img_path.stem))
    return Dataset(samples)


# -- Oxford pets -------------------------------------------------------------

def _resize_image(img: Image.Image, resolution: int) -> np.ndarray:
    arr = img.convert("RGB").resize((resolution, resolution), Image.BOX)
    return np.asarray(arr, dtype=np.float32) / 255.0 - 0.5


def _resize_trimap(img: Image.Image, resolution: int) -> np.ndarray:
    arr = img.resize((resolution, resolution), Image.NEAREST)
    tri = np.asarray(arr)
    out = np.zeros(tri.shape, dtype=np.int8)
    for code, cls in _PETS_TRIMAP.items():
        out[tri == code] = cls
    return out


def load_pets(root, resolution: int) -> tuple[Dataset, Dataset]:
    """Oxford-IIIT Pet: images/ + annotations/trimaps, official splits when
    the list files exist, otherwise a deterministic half/half split."""
    root = Path(root)
    img_dir = root / "images"
    tri_dir = root / "annotations" / "trimaps"
    if not img_dir.is_dir() or not tri_dir.is_dir():
        raise DataError(f"{root} lacks images/ or annotations/trimaps/")

    def read_list(name):
        p = root / "annotations" / name
        if p.exists():
            return [ln.split()[0] for ln in p.read_text().splitlines() if ln.strip()]
        return None

    train_ids = read_list("trainval.txt")
    test_ids = read_list("test.txt")
    if train_ids is None or test_ids is None:
        stems = sorted(p.stem for p in img_dir.glob("*.jpg"))
        half = len(stems) // 2
        train_ids, test_ids = stems[:half], stems[half:]

    skipped: list[str] = []

    def build(ids):
        out = []
        for stem in ids:
            ipath, tpath = img_dir / f"{stem}.jpg", tri_dir / f"{stem}.png"
            try:
                with Image.open(ipath) as im, Image.open(tpath) as tri:
                    sample = Sample(_resize_image(im, resolution),
                                    LabelMask(_resize_trimap(tri, resolution)),
                                    source_id=stem)
            except (OSError, DataError):
                skipped.append(stem)
                continue
            out.append(sample)
        return out

    train, test = build(train_ids), build(test_ids)
    if skipped:
        print(f"load_pets: skipped {len(skipped)} unreadable samples "
              f"({', '.join(skipped[:5])}{'...' if len(skipped) > 5 else ''})")
    if not train or not test:
        raise DataError("pets ingestion produced an empty split")
    return Dataset(train), Dataset(test)
