"""Dataset manifests, loading, training augmentation and a synthetic-shapes generator.

Manifest file: a header line ``# num_classes=<n>; split=<split>; palette=0:background,1:...``
followed by ``image_path<TAB>mask_path<TAB>case_id`` lines. Relative paths are
resolved against the manifest's directory.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

SPLITS = ("train", "val", "test")


class DataError(ValueError):
    """A manifest entry could not be loaded; the message names the sample id."""


@dataclass
class SampleRecord:
    id: str
    image: np.ndarray  # (H, W, C) float32 in [0, 1]
    mask: np.ndarray  # (H, W) integer labels
    case_id: str
    spacing: tuple[float, float] | None = None


@dataclass
class DatasetManifest:
    root: Path
    split: str
    entries: list[tuple[str, str, str]]
    num_classes: int
    palette: dict[int, str] = field(default_factory=dict)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    palette = ",".join(f"{k}:{v}" for k, v in sorted(manifest.palette.items()))
    lines = [f"# num_classes={manifest.num_classes}; split={manifest.split}; palette={palette}"]
    lines += ["\t".join(e) for e in manifest.entries]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as err:
        raise DataError(f"{path}: cannot read manifest ({err.strerror})") from err
    if not lines or not lines[0].startswith("#"):
        raise DataError(f"{path}: missing '# num_classes=...' header line")
    header = {}
    for part in lines[0].lstrip("#").split(";"):
        if "=" in part:
            k, v = part.split("=", 1)
            header[k.strip()] = v.strip()
    try:
        num_classes = int(header["num_classes"])
    except (KeyError, ValueError) as err:
        raise DataError(f"{path}: header lacks a valid num_classes") from err
    palette = {}
    for item in filter(None, header.get("palette", "").split(",")):
        k, v = item.split(":", 1)
        palette[int(k)] = v
    entries = []
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected image<TAB>mask<TAB>case_id")
        entries.append(tuple(parts))
    split = header.get("split", "train")
    if split not in SPLITS:
        raise DataError(f"{path}: unknown split {split!r}")
    return DatasetManifest(path.parent, split, entries, num_classes, palette)


def sample_id(image_path: str) -> str:
    return Path(image_path).stem


def normalize(image: np.ndarray) -> np.ndarray:
    """Per-image min-max scaling to [0, 1]."""
    image = image.astype(np.float32)
    lo, hi = image.min(), image.max()
    if hi <= lo:
        return np.zeros_like(image)
    return (image - lo) / (hi - lo)


def load_sample(manifest: DatasetManifest, entry: tuple[str, str, str]) -> SampleRecord:
    img_rel, mask_rel, case_id = entry
    sid = sample_id(img_rel)
    try:
        with Image.open(manifest.resolve(img_rel)) as im:
            image = np.asarray(im)
        with Image.open(manifest.resolve(mask_rel)) as im:
            mask = np.asarray(im)
    except FileNotFoundError as err:
        raise DataError(f"sample {sid}: missing file {err.filename}") from err
    except OSError as err:
        raise DataError(f"sample {sid}: cannot decode image ({err})") from err
    if image.ndim == 2:
        image = image[:, :, None]
    if mask.ndim != 2:
        raise DataError(f"sample {sid}: mask must be single-channel")
    if mask.shape != image.shape[:2]:
        raise DataError(f"sample {sid}: image {image.shape[:2]} and mask {mask.shape} differ")
    if mask.max(initial=0) >= manifest.num_classes:
        raise DataError(f"sample {sid}: label {int(mask.max())} out of range for "
                        f"{manifest.num_classes} classes")
    return SampleRecord(sid, normalize(image), mask.astype(np.int64), case_id)


def load_dataset(manifest: DatasetManifest | str | Path) -> list[SampleRecord]:
    """Load every entry, ordered by sample id."""
    if not isinstance(manifest, DatasetManifest):
        manifest = read_manifest(manifest)
    entries = sorted(manifest.entries, key=lambda e: sample_id(e[0]))
    return [load_sample(manifest, e) for e in entries]


# -- augmentation ---------------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    hflip: bool = False
    vflip: bool = False
    angle: float = 0.0


def sample_augment_params(rng: np.random.Generator, max_angle: float = 20.0) -> AugmentParams:
    return AugmentParams(bool(rng.random() < 0.5), bool(rng.random() < 0.5),
                         float(rng.uniform(-max_angle, max_angle)))


def rotate_pair(image, mask, angle: float):
    """Rotate about the centre: bilinear with zero fill for images, nearest with label 0 for masks."""
    image = ndimage.rotate(image, angle, axes=(1, 0), reshape=False, order=1, mode="constant", cval=0.0)
    mask = ndimage.rotate(mask, angle, axes=(1, 0), reshape=False, order=0, mode="constant", cval=0)
    return image, mask


def apply_augment(sample: SampleRecord, params: AugmentParams) -> SampleRecord:
    image, mask = sample.image, sample.mask
    if params.hflip:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if params.vflip:
        image, mask = image[::-1], mask[::-1]
    if params.angle:
        image, mask = rotate_pair(image, mask, params.angle)
    return replace(sample, image=np.ascontiguousarray(image), mask=np.ascontiguousarray(mask))


def augment(sample: SampleRecord, rng: np.random.Generator) -> SampleRecord:
    """Random horizontal/vertical flips (p = 0.5 each) and a rotation in [-20, 20] degrees."""
    return apply_augment(sample, sample_augment_params(rng))


# -- synthetic data -------------------------------------------------------------

class PackingError(RuntimeError):
    pass


def _shape_mask(rng, size: int, kind: str, radius_range):
    yy, xx = np.mgrid[:size, :size]
    ry, rx = rng.uniform(*radius_range, size=2)
    cy, cx = rng.uniform(ry + 1, size - ry - 1), rng.uniform(rx + 1, size - rx - 1)
    if kind == "ellipse":
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)


def _render_mask(rng, size: int, num_classes: int, max_tries: int):
    n_fg = num_classes - 1
    n_shapes = int(rng.integers(1, n_fg + 1))
    labels = rng.permutation(np.arange(1, n_fg + 1))[:n_shapes]
    radius_range = (size * 0.12, size * 0.3)
    for _ in range(max_tries):
        mask = np.zeros((size, size), np.uint8)
        occupied = np.zeros((size, size), bool)
        ok = True
        for label in labels:
            for _ in range(max_tries):
                shape = _shape_mask(rng, size, "ellipse" if rng.random() < 0.5 else "rect", radius_range)
                if not (shape & ndimage.binary_dilation(occupied, iterations=2)).any():
                    break
            else:
                ok = False
                break
            mask[shape] = label
            occupied |= shape
        frac = occupied.mean()
        if ok and 0.05 <= frac <= 0.5:
            return mask
    raise PackingError(f"could not place {n_shapes} non-overlapping shapes in a {size}x{size} image; "
                       "use fewer classes or a larger size")


def render_image(rng, mask: np.ndarray, num_classes: int, channels: int = 3, noise: float = 0.05):
    # class c gets a distinct mean intensity; background sits at 0.1
    levels = 0.1 + 0.8 * np.arange(num_classes) / max(num_classes - 1, 1)
    base = levels[mask][:, :, None].repeat(channels, axis=2)
    img = base + rng.normal(0.0, noise, size=base.shape)
    return (np.clip(img, 0.0, 1.0) * 255).round().astype(np.uint8)


def synth_generate(n: int, size: int, num_classes: int, seed: int, out_dir: str | Path,
                   split: str = "train", channels: int = 3, max_tries: int = 200) -> DatasetManifest:
    """Write ``n`` images with exact masks of random non-overlapping ellipses/rectangles.

    Returns the manifest (also written to ``out_dir/<split>.tsv``).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if size % 32:
        raise ValueError("size must be a multiple of 32")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2 (background plus at least one shape class)")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n):
        mask = _render_mask(rng, size, num_classes, max_tries)
        image = render_image(rng, mask, num_classes, channels)
        name = f"{split}_{i:04d}.png"
        Image.fromarray(image if channels > 1 else image[:, :, 0]).save(out / "images" / name)
        Image.fromarray(mask).save(out / "masks" / name)
        entries.append((f"images/{name}", f"masks/{name}", f"case_{i:04d}"))
    palette = {0: "background", **{c: f"shape{c}" for c in range(1, num_classes)}}
    manifest = DatasetManifest(out, split, entries, num_classes, palette)
    write_manifest(manifest, out / f"{split}.tsv")
    return manifest
