"""Synthetic weakly-labelled shapes data, manifest I/O and augmentation."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw

from . import IGNORE

SHAPE_NAMES = ("circle", "rectangle", "triangle", "cross", "diamond", "ring")

# base RGB per archetype; jittered per instance
SHAPE_COLORS = np.array(
    [
        [0.85, 0.20, 0.20],
        [0.20, 0.45, 0.90],
        [0.95, 0.80, 0.15],
        [0.25, 0.75, 0.30],
        [0.70, 0.30, 0.80],
        [0.95, 0.55, 0.15],
    ],
    dtype=np.float32,
)

IMAGE_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGE_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

MIN_VISIBLE_PIXELS = 12


class ConfigError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class ImageSample:
    image: np.ndarray  # H x W x 3 float32
    tags: np.ndarray  # length C, uint8
    gt_mask: np.ndarray | None = None  # H x W uint8, 0 = background, k = class k, 255 = ignore
    id: str = ""

    @property
    def present_classes(self) -> np.ndarray:
        return np.flatnonzero(self.tags) + 1


@dataclass
class ManifestRecord:
    image_path: Path
    tags: tuple[str, ...]
    mask_path: Path | None = None


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    class_names: list[str]
    path: Path | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def tag_vector(self, tags: Sequence[str]) -> np.ndarray:
        vec = np.zeros(self.num_classes, dtype=np.uint8)
        for t in tags:
            vec[self.class_names.index(t)] = 1
        return vec


# ---------------------------------------------------------------------------
# generation


def _fractal_noise(rng: np.random.Generator, size: int, octaves: int = 4) -> np.ndarray:
    """Sum of bilinearly upsampled random grids, roughly Perlin-like, in [0, 1]."""
    out = np.zeros((size, size), dtype=np.float32)
    amp, total = 1.0, 0.0
    for o in range(octaves):
        cells = 2 ** (o + 2)
        grid = rng.random((1, 1, cells + 1, cells + 1), dtype=np.float32)
        up = F.interpolate(torch.from_numpy(grid), size=(size, size), mode="bilinear", align_corners=True)
        out += amp * up[0, 0].numpy()
        total += amp
        amp *= 0.5
    out /= total
    return (out - out.min()) / max(float(out.max() - out.min()), 1e-6)


def _draw_shape(kind: str, size: int, cx: float, cy: float, r: float, angle: float) -> np.ndarray:
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    if kind == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=1)
    elif kind == "rectangle":
        draw.rectangle([cx - r, cy - 0.6 * r, cx + r, cy + 0.6 * r], fill=1)
    elif kind == "triangle":
        draw.regular_polygon((cx, cy, r), 3, rotation=angle, fill=1)
    elif kind == "diamond":
        draw.polygon([(cx, cy - r), (cx + 0.65 * r, cy), (cx, cy + r), (cx - 0.65 * r, cy)], fill=1)
    elif kind == "cross":
        t = 0.35 * r
        draw.rectangle([cx - r, cy - t, cx + r, cy + t], fill=1)
        draw.rectangle([cx - t, cy - r, cx + t, cy + r], fill=1)
    elif kind == "ring":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=1)
        ri = 0.5 * r
        draw.ellipse([cx - ri, cy - ri, cx + ri, cy + ri], fill=0)
    else:
        raise ConfigError(f"unknown shape archetype {kind!r}")
    return np.asarray(canvas, dtype=bool)


def render_shapes_sample(rng: np.random.Generator, classes: int, image_size: int, sample_id: str = "") -> ImageSample:
    """Draw 1-3 shape instances on a textured background."""
    if classes > len(SHAPE_NAMES):
        raise ConfigError(f"at most {len(SHAPE_NAMES)} shape classes are supported, got {classes}")
    size = image_size
    while True:
        tex = _fractal_noise(rng, size)
        bg_a = rng.uniform(0.15, 0.55, 3).astype(np.float32)
        bg_b = rng.uniform(0.15, 0.55, 3).astype(np.float32)
        image = bg_a[None, None] * tex[..., None] + bg_b[None, None] * (1 - tex[..., None])
        mask = np.zeros((size, size), dtype=np.uint8)

        n_inst = int(rng.integers(1, 4))
        for _ in range(n_inst):
            c = int(rng.integers(0, classes))
            r = rng.uniform(0.12, 0.24) * size
            cx, cy = rng.uniform(r, size - r, 2)
            region = _draw_shape(SHAPE_NAMES[c], size, cx, cy, r, float(rng.uniform(0, 360)))
            color = np.clip(SHAPE_COLORS[c] + rng.normal(0, 0.06, 3), 0, 1).astype(np.float32)
            # directional shading so object appearance is not uniform
            yy, xx = np.mgrid[:size, :size].astype(np.float32)
            theta = rng.uniform(0, 2 * np.pi)
            shade = 0.75 + 0.25 * np.cos(theta) * (xx - cx) / r + 0.25 * np.sin(theta) * (yy - cy) / r
            obj = np.clip(color[None, None] * shade[..., None], 0, 1)
            image[region] = obj[region]
            mask[region] = c + 1

        counts = np.bincount(mask.ravel(), minlength=classes + 1)
        present = [k for k in range(1, classes + 1) if counts[k] > 0]
        if present and all(counts[k] >= MIN_VISIBLE_PIXELS for k in present):
            break

    image = np.clip(image + rng.normal(0, 0.02, image.shape).astype(np.float32), 0, 1)
    tags = np.zeros(classes, dtype=np.uint8)
    tags[np.array(present) - 1] = 1
    return ImageSample(image=image.astype(np.float32), tags=tags, gt_mask=mask, id=sample_id)


def generate_shapes_dataset(
    n_images: int, classes: int, image_size: int, seed: int, out_dir: str | Path, prefix: str = "img"
) -> DatasetManifest:
    """Render a shapes dataset to ``out_dir`` and write ``out_dir/manifest.tsv``."""
    if classes < 2:
        raise ConfigError("need at least 2 classes")
    if classes > len(SHAPE_NAMES):
        raise ConfigError(f"at most {len(SHAPE_NAMES)} shape classes are supported, got {classes}")
    if image_size < 32:
        raise ConfigError("image_size must be >= 32")
    if n_images < 1:
        raise ConfigError("n_images must be >= 1")

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    class_names = list(SHAPE_NAMES[:classes])
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_images):
        name = f"{prefix}_{i:05d}"
        s = render_shapes_sample(rng, classes, image_size, name)
        img_path = out_dir / "images" / f"{name}.png"
        mask_path = out_dir / "masks" / f"{name}.png"
        Image.fromarray(np.round(s.image * 255).astype(np.uint8)).save(img_path)
        Image.fromarray(s.gt_mask).save(mask_path)
        tags = tuple(class_names[k] for k in np.flatnonzero(s.tags))
        records.append(ManifestRecord(img_path, tags, mask_path))

    manifest = DatasetManifest(records, class_names, out_dir / "manifest.tsv")
    write_manifest(manifest, manifest.path)
    return manifest


# ---------------------------------------------------------------------------
# manifest I/O


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    root = path.parent
    lines = ["# classes: " + ",".join(manifest.class_names)]
    for rec in manifest.records:
        fields = [_relpath(rec.image_path, root), ",".join(rec.tags)]
        if rec.mask_path is not None:
            fields.append(_relpath(rec.mask_path, root))
        lines.append("\t".join(fields))
    path.write_text("\n".join(lines) + "\n")
    return path


def _relpath(p: Path, root: Path) -> str:
    try:
        return str(Path(p).resolve().relative_to(root.resolve()))
    except ValueError:
        return str(Path(p).resolve())


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("# classes:"):
        raise ManifestError(f"{path}: first line must be '# classes: name1,name2,...'")
    class_names = [c.strip() for c in lines[0].split(":", 1)[1].split(",") if c.strip()]
    if len(set(class_names)) != len(class_names) or not class_names:
        raise ManifestError(f"{path}: class list is empty or has duplicates")

    root = path.parent
    records = []
    for idx, line in enumerate(l for l in lines[1:] if l.strip() and not l.startswith("#")):
        fields = line.split("\t")
        if len(fields) not in (2, 3):
            raise ManifestError(f"record {idx}: expected 2 or 3 tab-separated fields, got {len(fields)}")
        tags = tuple(t.strip() for t in fields[1].split(",") if t.strip())
        if not tags:
            raise ManifestError(f"record {idx}: no tags")
        for t in tags:
            if t not in class_names:
                raise ManifestError(f"record {idx}: unknown class tag {t!r}")
        image_path = (root / fields[0]).resolve()
        if not image_path.is_file():
            raise ManifestError(f"record {idx}: image not found: {image_path}")
        mask_path = None
        if len(fields) == 3 and fields[2].strip():
            mask_path = (root / fields[2]).resolve()
            if not mask_path.is_file():
                raise ManifestError(f"record {idx}: mask not found: {mask_path}")
        records.append(ManifestRecord(image_path, tags, mask_path))
    return DatasetManifest(records, class_names, path)


def load_sample(manifest: DatasetManifest, index: int) -> ImageSample:
    if index in manifest._cache:
        return manifest._cache[index]
    rec = manifest.records[index]
    image = np.asarray(Image.open(rec.image_path).convert("RGB"), dtype=np.float32) / 255.0
    mask = None
    if rec.mask_path is not None:
        mask = np.asarray(Image.open(rec.mask_path), dtype=np.uint8)
        if mask.ndim != 2 or mask.shape != image.shape[:2]:
            raise ManifestError(f"record {index}: mask shape {mask.shape} does not match image {image.shape[:2]}")
    sample = ImageSample(image, manifest.tag_vector(rec.tags), mask, rec.image_path.stem)
    manifest._cache[index] = sample
    return sample


def load_samples(manifest: DatasetManifest) -> list[ImageSample]:
    return [load_sample(manifest, i) for i in range(len(manifest))]


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def iterate_batches(
    data: DatasetManifest | Sequence[ImageSample], batch_size: int, seed: int, epoch: int = 0
) -> Iterator[list[ImageSample]]:
    """One epoch of shuffled batches; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if isinstance(data, DatasetManifest):
        fetch = lambda i: load_sample(data, i)  # noqa: E731
    else:
        fetch = data.__getitem__
    order = epoch_order(len(data), seed, epoch)
    for start in range(0, len(order), batch_size):
        yield [fetch(int(i)) for i in order[start : start + batch_size]]


# ---------------------------------------------------------------------------
# augmentation


def normalize(image: np.ndarray) -> np.ndarray:
    return (image - IMAGE_MEAN) / IMAGE_STD


def denormalize(image: np.ndarray) -> np.ndarray:
    return image * IMAGE_STD + IMAGE_MEAN


def hflip(sample: ImageSample) -> ImageSample:
    mask = None if sample.gt_mask is None else sample.gt_mask[:, ::-1].copy()
    return replace(sample, image=sample.image[:, ::-1].copy(), gt_mask=mask)


def _resize(sample: ImageSample, scale: float) -> ImageSample:
    h, w = sample.image.shape[:2]
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    if (nh, nw) == (h, w):
        return sample
    img = torch.tensor(sample.image).permute(2, 0, 1)[None]
    img = F.interpolate(img, size=(nh, nw), mode="bilinear", align_corners=False)[0].permute(1, 2, 0).numpy()
    mask = None
    if sample.gt_mask is not None:
        m = torch.tensor(sample.gt_mask, dtype=torch.float32)[None, None]
        mask = F.interpolate(m, size=(nh, nw), mode="nearest")[0, 0].numpy().astype(np.uint8)
    return replace(sample, image=np.ascontiguousarray(img), gt_mask=mask)


def apply_transform(
    sample: ImageSample,
    scale: float = 1.0,
    flip: bool = False,
    crop_size: int | None = None,
    offset: tuple[int, int] = (0, 0),
) -> ImageSample:
    """Deterministic resize -> flip -> normalize -> crop.

    Regions of the crop window outside the resized image are zero in the
    image and IGNORE in the mask. Tags are never touched.
    """
    out = _resize(sample, scale)
    if flip:
        out = hflip(out)
    image = normalize(out.image).astype(np.float32)
    mask = out.gt_mask
    if crop_size is None:
        return replace(out, image=image)

    h, w = image.shape[:2]
    ph, pw = max(crop_size, h), max(crop_size, w)
    if (ph, pw) != (h, w):
        padded = np.zeros((ph, pw, 3), dtype=np.float32)
        padded[:h, :w] = image
        image = padded
        if mask is not None:
            pm = np.full((ph, pw), IGNORE, dtype=np.uint8)
            pm[:h, :w] = mask
            mask = pm
    y0, x0 = offset
    y0 = min(max(y0, 0), ph - crop_size)
    x0 = min(max(x0, 0), pw - crop_size)
    image = image[y0 : y0 + crop_size, x0 : x0 + crop_size].copy()
    if mask is not None:
        mask = mask[y0 : y0 + crop_size, x0 : x0 + crop_size].copy()
    return replace(out, image=image, gt_mask=mask)


def augment(
    sample: ImageSample,
    seed: int | Sequence[int],
    crop_size: int = 64,
    scale_range: tuple[float, float] = (0.7, 1.3),
    flip_prob: float = 0.5,
) -> ImageSample:
    if sample.image.size == 0:
        raise ValueError("empty image")
    rng = np.random.default_rng(seed)
    scale = float(rng.uniform(*scale_range))
    flip = bool(rng.random() < flip_prob)
    h, w = sample.image.shape[:2]
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    y0 = int(rng.integers(0, max(nh - crop_size, 0) + 1))
    x0 = int(rng.integers(0, max(nw - crop_size, 0) + 1))
    return apply_transform(sample, scale, flip, crop_size, (y0, x0))
