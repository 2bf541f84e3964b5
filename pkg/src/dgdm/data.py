"""Synthetic shapes dataset and generic folder-format loading.

Generated images hold one class-determining shape (square, disc,
triangle, ring, cross) on a noise background, with an exact tight
ground-truth box.  Optional distractor textures co-occur with each class
so that erasing-style regularizers have misleading context to latch onto.

Folder format: ``root/<class_name>/<image>.png`` plus ``root/annotations.txt``
with one line per box: ``relative/path x_min y_min x_max y_max class_id``
(space-delimited, pixel units, inclusive-exclusive).
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .evaluation import BBox

__all__ = [
    "SyntheticSpec",
    "Sample",
    "generate",
    "save_folder",
    "load_folder",
    "random_flip",
    "random_crop",
]

SHAPE_NAMES = ("square", "disc", "triangle", "ring", "cross")


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the generated dataset."""

    n_images: int
    image_size: int = 64
    n_classes: int = 3
    noise: float = 0.1
    distractors: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_images < 1:
            raise ValueError(f"n_images must be >= 1, got {self.n_images}")
        if self.image_size < 32:
            raise ValueError(f"image_size must be >= 32, got {self.image_size}")
        if not 2 <= self.n_classes <= 5:
            raise ValueError(f"n_classes must be in [2, 5], got {self.n_classes}")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError(f"noise must be in [0, 1], got {self.noise}")


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    label: int
    boxes: tuple[BBox, ...]
    image_id: str

    def __post_init__(self):
        if not self.boxes:
            raise ValueError(f"sample {self.image_id} has no ground-truth box")
        _, h, w = self.image.shape
        for box in self.boxes:
            if box.x_max > w or box.y_max > h:
                raise ValueError(f"box {box} exceeds image bounds {w}x{h}")


def _shape_mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean (size, size) mask of one randomly placed shape."""
    mask = np.zeros((size, size), dtype=bool)
    extent = int(rng.integers(int(size * 0.40), int(size * 0.65)))
    cy = int(rng.integers(extent // 2 + 2, size - extent // 2 - 2))
    cx = int(rng.integers(extent // 2 + 2, size - extent // 2 - 2))
    half = extent // 2
    yy, xx = np.ogrid[:size, :size]
    if kind == "square":
        mask[cy - half : cy + half + 1, cx - half : cx + half + 1] = True
    elif kind == "disc":
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= half**2
    elif kind == "triangle":
        # filled, apex up: row span widens linearly from apex to base
        for row in range(extent):
            width = int(round(half * row / max(extent - 1, 1)))
            y = cy - half + row
            mask[y, cx - width : cx + width + 1] = True
    elif kind == "ring":
        dist2 = (yy - cy) ** 2 + (xx - cx) ** 2
        mask = (dist2 <= half**2) & (dist2 >= (0.55 * half) ** 2)
    elif kind == "cross":
        arm = max(half // 3, 1)
        mask[cy - half : cy + half + 1, cx - arm : cx + arm + 1] = True
        mask[cy - arm : cy + arm + 1, cx - half : cx + half + 1] = True
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    return mask


def _tight_box(mask: np.ndarray) -> BBox:
    ys, xs = np.nonzero(mask)
    return BBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def _add_distractor(
    image: np.ndarray, shape_box: BBox, label: int, rng: np.random.Generator
) -> None:
    """Striped texture patch correlated with the class, away from the shape."""
    size = image.shape[1]
    patch = max(size // 5, 8)
    for _ in range(20):
        y0 = int(rng.integers(0, size - patch))
        x0 = int(rng.integers(0, size - patch))
        overlaps = not (
            x0 + patch <= shape_box.x_min
            or x0 >= shape_box.x_max
            or y0 + patch <= shape_box.y_min
            or y0 >= shape_box.y_max
        )
        if not overlaps:
            yy, xx = np.mgrid[0:patch, 0:patch]
            # stripe period keyed to the class
            phase = (yy + (label + 1) * xx) % (2 * (label + 2))
            stripes = (phase < (label + 2)).astype(np.float32)
            level = rng.uniform(0.25, 0.45)
            image[:, y0 : y0 + patch, x0 : x0 + patch] = level * stripes
            return


def generate(spec: SyntheticSpec) -> list[Sample]:
    """Seeded-deterministic dataset with exactly balanced class counts."""
    rng = np.random.default_rng(spec.seed)
    shapes = SHAPE_NAMES[: spec.n_classes]
    labels = np.arange(spec.n_images) % spec.n_classes
    labels = labels[rng.permutation(spec.n_images)]
    samples = []
    for i in range(spec.n_images):
        label = int(labels[i])
        size = spec.image_size
        image = (spec.noise * rng.random((3, size, size))).astype(np.float32)
        mask = _shape_mask(shapes[label], size, rng)
        box = _tight_box(mask)
        if spec.distractors and rng.random() < 0.9:
            _add_distractor(image, box, label, rng)
        color = rng.uniform(0.55, 1.0, size=3).astype(np.float32)
        image[:, mask] = color[:, None]
        samples.append(
            Sample(image=image, label=label, boxes=(box,), image_id=f"synthetic_{i:05d}")
        )
    return samples


def _to_png_array(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def _from_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def save_folder(samples, root, class_names=None) -> None:
    """Materialize samples to the folder format (PNG files + annotations)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for sample in samples:
        name = class_names[sample.label] if class_names else f"class_{sample.label}"
        class_dir = root / name
        class_dir.mkdir(exist_ok=True)
        rel = f"{name}/{sample.image_id}.png"
        Image.fromarray(_to_png_array(sample.image)).save(root / rel)
        for box in sample.boxes:
            lines.append(
                f"{rel} {box.x_min} {box.y_min} {box.x_max} {box.y_max} {sample.label}"
            )
    (root / "annotations.txt").write_text("\n".join(lines) + "\n")


def _loader_workers() -> int:
    cap = os.environ.get("DGDM_NUM_WORKERS")
    workers = min(os.cpu_count() or 1, 8)
    if cap is not None:
        workers = max(1, min(workers, int(cap)))
    return workers


def load_folder(root) -> list[Sample]:
    """Load a folder-format dataset in lexicographic image order.

    Decoding may run in parallel (capped by DGDM_NUM_WORKERS); the result
    order never depends on the worker count.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    annotations = root / "annotations.txt"
    if not annotations.is_file():
        raise FileNotFoundError(f"missing annotation file {annotations}")

    by_path: dict[str, dict] = {}
    for lineno, line in enumerate(annotations.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ValueError(
                f"{annotations}:{lineno}: expected 6 fields "
                f"'path x_min y_min x_max y_max class_id', got {len(parts)}"
            )
        rel, *numbers = parts
        try:
            x_min, y_min, x_max, y_max, label = (int(v) for v in numbers)
        except ValueError as err:
            raise ValueError(f"{annotations}:{lineno}: non-integer field ({err})") from None
        try:
            box = BBox(x_min, y_min, x_max, y_max)
        except ValueError as err:
            raise ValueError(f"{annotations}:{lineno}: {err}") from None
        if not (root / rel).is_file():
            raise FileNotFoundError(f"{annotations}:{lineno}: image {rel} not found")
        entry = by_path.setdefault(rel, {"label": label, "boxes": []})
        if entry["label"] != label:
            raise ValueError(f"{annotations}:{lineno}: conflicting class for {rel}")
        entry["boxes"].append(box)

    if not by_path:
        raise ValueError(f"dataset root {root} contains no annotated images")

    paths = sorted(by_path)
    with ThreadPoolExecutor(max_workers=_loader_workers()) as pool:
        images = list(pool.map(lambda rel: _from_png(root / rel), paths))

    samples = []
    for rel, image in zip(paths, images):
        entry = by_path[rel]
        samples.append(
            Sample(
                image=image,
                label=entry["label"],
                boxes=tuple(entry["boxes"]),
                image_id=Path(rel).stem,
            )
        )
    return samples


def random_flip(batch: torch.Tensor, rng: torch.Generator) -> torch.Tensor:
    """Horizontally flip each image with probability 0.5."""
    flips = torch.rand(batch.shape[0], generator=rng) < 0.5
    out = batch.clone()
    out[flips] = torch.flip(batch[flips], dims=[-1])
    return out


def random_crop(batch: torch.Tensor, rng: torch.Generator, pad: int = 4) -> torch.Tensor:
    """Zero-pad by ``pad`` and crop back at a random offset, per image."""
    b, _, h, w = batch.shape
    padded = torch.nn.functional.pad(batch, (pad, pad, pad, pad))
    dy = torch.randint(0, 2 * pad + 1, (b,), generator=rng)
    dx = torch.randint(0, 2 * pad + 1, (b,), generator=rng)
    out = torch.empty_like(batch)
    for i in range(b):
        out[i] = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
    return out
