"""PNG dataset ingestion and synthetic lesion generation."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .augment import SamplePair
from .errors import InvalidInputError

log = logging.getLogger(__name__)

MASK_SUFFIX = "_segmentation"


def worker_count() -> int:
    """Parallelism cap from IIFCN_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("IIFCN_THREADS", "1")))
    except ValueError:
        return 1


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im)


def write_png(path, array: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(array, dtype=np.uint8)).save(path, format="PNG")


@dataclass
class DatasetManifest:
    root: Path
    entries: list[tuple[Path, Path, str]] = field(default_factory=list)
    candidates: int = 0

    @property
    def count(self) -> int:
        return len(self.entries)


class DatasetError(InvalidInputError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__(f"{len(problems)} invalid file(s):\n" + "\n".join(problems))


def _decode(image_path: Path, mask_path: Path, sid: str):
    problems = []
    image = read_png(image_path)
    if image.ndim == 3 and image.shape[2] == 4:
        image = image[..., :3]
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        problems.append(f"{image_path.name}: expected 8-bit RGB, got shape {image.shape} dtype {image.dtype}")
    mask = read_png(mask_path)
    if mask.ndim == 3:
        mask = mask[..., 0]
    if mask.dtype != np.uint8:
        problems.append(f"{mask_path.name}: expected 8-bit mask, got dtype {mask.dtype}")
    bad = ~np.isin(mask, (0, 255))
    if bad.any():
        problems.append(f"{mask_path.name}: non-binary mask value {int(mask[bad].flat[0])}")
    if image.shape[:2] != mask.shape[:2]:
        problems.append(f"{sid}: image {image.shape[:2]} and mask {mask.shape[:2]} differ in size")
    if problems:
        return None, problems
    return SamplePair(np.ascontiguousarray(image), np.ascontiguousarray(mask), sid), []


def load_dataset(root) -> tuple[DatasetManifest, list[SamplePair]]:
    """Pair ``<id>.png`` with ``<id>_segmentation.png`` and decode both.

    Every candidate image either yields a sample or a diagnostic; if any
    diagnostic is produced a ``DatasetError`` lists them all.
    """
    root = Path(root)
    if not root.is_dir():
        raise InvalidInputError(f"dataset directory {root} does not exist")
    pngs = sorted(p for p in root.iterdir() if p.suffix.lower() == ".png")
    images = [p for p in pngs if not p.stem.endswith(MASK_SUFFIX)]
    masks = {p.stem[:-len(MASK_SUFFIX)]: p for p in pngs if p.stem.endswith(MASK_SUFFIX)}
    manifest = DatasetManifest(root, candidates=len(images))
    problems = []
    for img in images:
        sid = img.stem
        if sid not in masks:
            problems.append(f"{img.name}: missing mask {sid}{MASK_SUFFIX}.png")
            continue
        manifest.entries.append((img, masks.pop(sid), sid))
    for sid, m in sorted(masks.items()):
        problems.append(f"{m.name}: mask without image {sid}.png")
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        decoded = list(pool.map(lambda e: _decode(*e), manifest.entries))
    samples = []
    for sample, errs in decoded:
        problems.extend(errs)
        if sample is not None:
            samples.append(sample)
    if problems:
        raise DatasetError(problems)
    return manifest, samples


def save_dataset(samples, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_png(root / f"{s.id}.png", s.image)
        write_png(root / f"{s.id}{MASK_SUFFIX}.png", s.mask)


# synthetic data ------------------------------------------------------------

def ellipse_mask(h: int, w: int, cy: float, cx: float, a: float, b: float, angle: float) -> np.ndarray:
    """Pixels whose centres fall inside the ellipse with semi-axes a, b rotated by ``angle`` radians."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _smooth_noise(rng, h, w, sigma, channels=3) -> np.ndarray:
    n = rng.standard_normal((h, w, channels))
    n = ndimage.gaussian_filter(n, sigma=(sigma, sigma, 0), mode="wrap")
    return n / (n.std() + 1e-12)


def synth_sample(rng: np.random.Generator, size: tuple[int, int], sid: str) -> SamplePair:
    h, w = size
    skin = np.array([205.0, 165.0, 145.0]) + rng.uniform(-15, 15, 3)
    img = skin + 12.0 * _smooth_noise(rng, h, w, max(h, w) / 10)
    mask = np.zeros((h, w), dtype=bool)
    side = min(h, w)
    for _ in range(int(rng.integers(1, 4))):
        a, b = rng.uniform(0.1, 0.25, 2) * side
        cy = rng.uniform(0.25, 0.75) * h
        cx = rng.uniform(0.25, 0.75) * w
        region = ellipse_mask(h, w, cy, cx, a, b, rng.uniform(0, np.pi))
        color = np.array([110.0, 70.0, 55.0]) + rng.uniform(-25, 25, 3)
        texture = 8.0 * _smooth_noise(rng, h, w, 2.0)
        img[region] = (color + texture)[region]
        mask |= region
    img += rng.normal(0, 3.0, img.shape)
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return SamplePair(image, (mask * 255).astype(np.uint8), sid)


def synth_dataset(n: int, size, seed: int) -> list[SamplePair]:
    """``n`` textured images with 1-3 dark elliptical lesions each."""
    if isinstance(size, int):
        size = (size, size)
    rng = np.random.default_rng(seed)
    return [synth_sample(rng, tuple(size), f"synth_{i:05d}") for i in range(n)]
