"""Bitemporal image-pair ingestion and a synthetic change generator.

The generator composes a smooth value-noise background with static objects,
then injects structural changes (inserted or removed shapes, marked in the
label) and a global photometric pseudo-change (brightness shift, per-channel
gain, additive noise) that is deliberately NOT marked.  Everything is
quantised to 8-bit so save/load round trips are bit-exact.

Manifests are UTF-8 text, one pair per line:
``t0<TAB>t1<TAB>label<TAB>split`` with relative paths resolved against the
manifest's directory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

SPLITS = ("train", "val", "test")


class IngestionError(ValueError):
    """A dataset file is missing, malformed, or inconsistent."""


@dataclass
class ImagePair:
    """Co-registered acquisitions as HxWx3 reals in [0, 1]."""
    t0: np.ndarray
    t1: np.ndarray

    def __post_init__(self):
        self.t0 = np.asarray(self.t0, dtype=np.float64)
        self.t1 = np.asarray(self.t1, dtype=np.float64)
        if self.t0.shape != self.t1.shape:
            raise IngestionError(f"pair shapes differ: {self.t0.shape} vs {self.t1.shape}")
        if self.t0.ndim != 3 or self.t0.shape[2] != 3:
            raise IngestionError(f"expected HxWx3 images, got shape {self.t0.shape}")

    @property
    def height(self) -> int:
        return self.t0.shape[0]

    @property
    def width(self) -> int:
        return self.t0.shape[1]

    def chw(self) -> tuple[np.ndarray, np.ndarray]:
        """Channel-first views for the encoder."""
        return self.t0.transpose(2, 0, 1), self.t1.transpose(2, 0, 1)


@dataclass
class SyntheticConfig:
    image_size: int = 32
    n_shapes: int = 3                       # structural changes per pair
    shape_kinds: tuple[str, ...] = ("rectangle", "disc")
    n_static: int = 2                       # objects present in both images
    min_shape: int = 6                      # shape extent in pixels
    max_shape: int = 12
    brightness: float = 0.08                # global shift amplitude
    channel_gain: float = 0.08              # per-channel relative gain amplitude
    noise_sigma: float = 0.02               # i.i.d. noise on t1
    changed_band: tuple[float, float] = (0.02, 0.20)
    size_bounds: tuple[int, int] = (16, 512)
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.size_bounds
        if not (lo <= self.image_size <= hi):
            raise ValueError(f"image_size {self.image_size} outside bounds [{lo}, {hi}]")
        if self.n_shapes < 0 or self.n_static < 0:
            raise ValueError("shape counts must be non-negative")
        if not self.shape_kinds or any(k not in ("rectangle", "disc") for k in self.shape_kinds):
            raise ValueError(f"unsupported shape kinds {self.shape_kinds}")
        if not (0 < self.min_shape <= self.max_shape <= self.image_size):
            raise ValueError(
                f"shape extents [{self.min_shape}, {self.max_shape}] invalid for "
                f"size {self.image_size}")
        if min(self.brightness, self.channel_gain, self.noise_sigma) < 0:
            raise ValueError("pseudo-change amplitudes must be non-negative")


def _quantize(img: np.ndarray) -> np.ndarray:
    """Snap reals in [0, 1] to the 8-bit grid (what a PNG round trip keeps)."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _bilinear_upsample(grid: np.ndarray, size: int) -> np.ndarray:
    gh, gw = grid.shape[:2]
    ys = np.linspace(0.0, gh - 1.0, size)
    xs = np.linspace(0.0, gw - 1.0, size)
    y0 = np.minimum(ys.astype(int), gh - 2)
    x0 = np.minimum(xs.astype(int), gw - 2)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    rows0, rows1 = grid[y0], grid[y0 + 1]
    return ((1 - fy) * (1 - fx) * rows0[:, x0] + (1 - fy) * fx * rows0[:, x0 + 1]
            + fy * (1 - fx) * rows1[:, x0] + fy * fx * rows1[:, x0 + 1])


def _shape_mask(rng: np.random.Generator, cfg: SyntheticConfig) -> np.ndarray:
    """Boolean mask of one random rectangle or disc, fully inside the image."""
    size = cfg.image_size
    kind = cfg.shape_kinds[rng.integers(len(cfg.shape_kinds))]
    mask = np.zeros((size, size), dtype=bool)
    if kind == "rectangle":
        h = int(rng.integers(cfg.min_shape, cfg.max_shape + 1))
        w = int(rng.integers(cfg.min_shape, cfg.max_shape + 1))
        top = int(rng.integers(0, size - h + 1))
        left = int(rng.integers(0, size - w + 1))
        mask[top:top + h, left:left + w] = True
    else:
        radius = float(rng.uniform(cfg.min_shape / 2.0, cfg.max_shape / 2.0))
        cy = float(rng.uniform(radius, size - radius))
        cx = float(rng.uniform(radius, size - radius))
        yy, xx = np.mgrid[0:size, 0:size]
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
    return mask


def _shape_color(rng: np.random.Generator) -> np.ndarray:
    # stays clear of the background's [0.25, 0.75] band so quantisation
    # can never erase an injected change
    base = 0.1 if rng.random() < 0.5 else 0.9
    return np.clip(base + rng.uniform(-0.1, 0.1, size=3), 0.0, 1.0)


def _paint(img: np.ndarray, mask: np.ndarray, color: np.ndarray) -> None:
    img[mask] = color


def generate_pair(cfg: SyntheticConfig, seed) -> tuple[ImagePair, np.ndarray]:
    """Deterministically generate one labelled bitemporal pair.

    Structural changes enter the label; the photometric pseudo-change does
    not.  When ``n_shapes`` > 0 the changed fraction must land in
    ``cfg.changed_band``; generation retries a few times before giving up.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    lo_frac, hi_frac = cfg.changed_band
    for _ in range(20):
        cells = max(2, size // 8)
        background = _bilinear_upsample(
            rng.uniform(0.25, 0.75, size=(cells + 1, cells + 1, 3)), size)
        scene0 = background.copy()
        for _ in range(cfg.n_static):
            _paint(scene0, _shape_mask(rng, cfg), rng.uniform(0.0, 1.0, size=3))
        scene1 = scene0.copy()

        label = np.zeros((size, size), dtype=np.uint8)
        for _ in range(cfg.n_shapes):
            mask = _shape_mask(rng, cfg)
            color = _shape_color(rng)
            if rng.random() < 0.5:
                _paint(scene1, mask, color)     # appears at t1
            else:
                _paint(scene0, mask, color)     # vanishes by t1
            label[mask] = 1

        shift = rng.uniform(-cfg.brightness, cfg.brightness)
        gains = 1.0 + rng.uniform(-cfg.channel_gain, cfg.channel_gain, size=3)
        t1 = scene1 * gains[None, None, :] + shift
        if cfg.noise_sigma > 0:
            t1 = t1 + rng.normal(0.0, cfg.noise_sigma, size=t1.shape)

        frac = label.mean()
        if cfg.n_shapes == 0 or lo_frac <= frac <= hi_frac:
            return ImagePair(_quantize(scene0), _quantize(t1)), label
    raise IngestionError(
        f"changed fraction {frac:.3f} stayed outside [{lo_frac}, {hi_frac}] "
        f"after 20 attempts; adjust n_shapes or shape extents")


def synthetic_dataset(cfg: SyntheticConfig, count: int,
                      start_index: int = 0) -> list[tuple[ImagePair, np.ndarray]]:
    """A list of generated pairs with per-pair seeds derived from cfg.seed."""
    return [generate_pair(cfg, [cfg.seed, start_index + i]) for i in range(count)]


# -- image and manifest files --------------------------------------------------


def save_image(path, image: np.ndarray) -> None:
    """Write an HxWx3 [0,1] image or an HxW binary mask as 8-bit PNG."""
    path = Path(path)
    arr = np.asarray(image)
    if arr.ndim == 2:
        # binary mask: white means changed
        data = (arr.astype(bool).astype(np.uint8)) * 255
        Image.fromarray(data, mode="L").save(path, format="PNG")
        return
    if arr.ndim == 3 and arr.shape[2] == 3:
        data = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(data, mode="RGB").save(path, format="PNG")
        return
    raise IngestionError(f"cannot save image of shape {arr.shape}")


def save_grayscale(path, values: np.ndarray) -> None:
    """Write raw 8-bit grayscale values (already in 0..255)."""
    data = np.asarray(values)
    if data.ndim != 2:
        raise IngestionError(f"grayscale image must be 2-D, got shape {data.shape}")
    Image.fromarray(data.astype(np.uint8), mode="L").save(Path(path), format="PNG")


def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"image file not found: {path}")
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def load_label(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"label file not found: {path}")
    with Image.open(path) as img:
        raw = np.asarray(img.convert("L"))
    bad = np.isin(raw, (0, 255), invert=True)
    if bad.any():
        raise IngestionError(
            f"label {path} holds non-binary values (expected only 0 and 255)")
    return (raw == 255).astype(np.uint8)


@dataclass
class ManifestEntry:
    t0: Path
    t1: Path
    label: Path
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]


def parse_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"manifest not found: {path}")
    base = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise IngestionError(f"{path}:{lineno}: expected 4 tab-separated fields")
        t0, t1, label, split = parts
        if split not in SPLITS:
            raise IngestionError(f"{path}:{lineno}: unknown split {split!r}")
        entries.append(ManifestEntry(base / t0, base / t1, base / label, split))
    return DatasetManifest(entries)


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    path = Path(path)
    base = path.parent
    lines = []
    for e in entries:
        lines.append("\t".join([
            str(Path(e.t0).relative_to(base)),
            str(Path(e.t1).relative_to(base)),
            str(Path(e.label).relative_to(base)),
            e.split,
        ]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_pair(entry: ManifestEntry) -> tuple[ImagePair, np.ndarray]:
    """Load and cross-check one manifest entry."""
    t0 = load_image(entry.t0)
    t1 = load_image(entry.t1)
    label = load_label(entry.label)
    if not (t0.shape == t1.shape and t0.shape[:2] == label.shape):
        raise IngestionError(
            f"dimension mismatch across {entry.t0} ({t0.shape}), "
            f"{entry.t1} ({t1.shape}), {entry.label} ({label.shape})")
    return ImagePair(t0, t1), label


@dataclass
class SplitStats:
    changed: int = 0
    unchanged: int = 0

    @property
    def ratio(self) -> float:
        """Changed/unchanged pixel ratio; inf flags a degenerate split."""
        return self.changed / self.unchanged if self.unchanged > 0 else math.inf


def dataset_stats(manifest: DatasetManifest) -> dict[str, SplitStats]:
    """Exact changed/unchanged pixel counts per split plus a total row."""
    stats = {name: SplitStats() for name in SPLITS}
    for entry in manifest.entries:
        label = load_label(entry.label)
        changed = int(np.count_nonzero(label))
        stats[entry.split].changed += changed
        stats[entry.split].unchanged += label.size - changed
    total = SplitStats(
        changed=sum(s.changed for s in stats.values()),
        unchanged=sum(s.unchanged for s in stats.values()),
    )
    stats["total"] = total
    return stats


def stats_table(stats: dict[str, SplitStats]) -> str:
    header = f"{'split':>8}  {'changed':>14}  {'unchanged':>14}  {'c/uc':>7}"
    lines = [header]
    for name in (*SPLITS, "total"):
        s = stats[name]
        ratio = f"{s.ratio:.3f}" if math.isfinite(s.ratio) else "inf"
        lines.append(f"{name:>8}  {s.changed:>14,}  {s.unchanged:>14,}  {ratio:>7}")
    return "\n".join(lines)


def emit_dataset(cfg: SyntheticConfig, out_dir, n_train: int, n_val: int,
                 n_test: int, pseudo_only: bool = False) -> Path:
    """Generate a synthetic dataset on disk and return the manifest path.

    ``pseudo_only`` zeroes the structural-change count, producing pairs
    whose label is identically zero (photometric differences only).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if pseudo_only:
        cfg = SyntheticConfig(**{**cfg.__dict__, "n_shapes": 0})
    counts = {"train": n_train, "val": n_val, "test": n_test}
    entries = []
    index = 0
    for split, count in counts.items():
        for _ in range(count):
            pair, label = generate_pair(cfg, [cfg.seed, index])
            t0_path = out_dir / f"{split}_{index:04d}_t0.png"
            t1_path = out_dir / f"{split}_{index:04d}_t1.png"
            label_path = out_dir / f"{split}_{index:04d}_label.png"
            save_image(t0_path, pair.t0)
            save_image(t1_path, pair.t1)
            save_image(label_path, label)
            entries.append(ManifestEntry(t0_path, t1_path, label_path, split))
            index += 1
    manifest_path = out_dir / "manifest.tsv"
    write_manifest(manifest_path, entries)
    return manifest_path
