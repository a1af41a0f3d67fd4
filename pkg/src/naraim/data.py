"""Dataset manifests, image codecs and the synthetic circle/ellipse benchmark."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

SYNTH_AREA = 280 * 280
RADIUS_LO, RADIUS_HI = 0.25, 0.38    # equal-area radius as a fraction of the short side
CONTRAST_LO, CONTRAST_HI = 0.35, 0.45  # the shape is always brighter than its surroundings
TEXTURE_AMPLITUDE = 0.02             # per plane wave, three waves
SYNTH_CLASS_NAMES = ("circle", "ellipse")


class DatasetError(ValueError):
    pass


# -- codecs ------------------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def encode_ppm(img: np.ndarray) -> bytes:
    """Binary P6 for (h, w, 3) images; P5 for (h, w) arrays. Floats are scaled from [0, 1]."""
    arr = img if img.dtype == np.uint8 else to_uint8(img)
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode array of shape {arr.shape}")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + arr.tobytes()


def decode_image(path: str | Path) -> np.ndarray:
    """Decode PPM/PGM/PNG to a float64 (h, w, 3) array in [0, 1]."""
    with PILImage.open(path) as im:
        rgb = im.convert("RGB")
        return np.asarray(rgb, dtype=np.float64) / 255.0


# -- manifests ---------------------------------------------------------------

@dataclass
class DatasetManifest:
    root: Path
    entries: list[tuple[str, int]]
    classes: int
    class_names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> tuple[np.ndarray, int]:
        rel, label = self.entries[i]
        try:
            return decode_image(self.root / rel), label
        except Exception as exc:
            raise DatasetError(f"entry {i} ({rel}): cannot decode image: {exc}") from None

    def dims(self, i: int) -> tuple[int, int]:
        rel, _ = self.entries[i]
        with PILImage.open(self.root / rel) as im:
            w, h = im.size
        return h, w

    @property
    def labels(self) -> np.ndarray:
        return np.array([lab for _, lab in self.entries], dtype=np.int64)


def load_dataset(manifest_path: str | Path) -> DatasetManifest:
    """Parse ``#classes=C`` header plus ``path<TAB>label`` lines; images decode lazily."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DatasetError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    classes = None
    names: list[str] = []
    entries: list[tuple[str, int]] = []
    for lineno, line in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            key = key.strip()
            if key == "classes":
                try:
                    classes = int(value)
                except ValueError:
                    raise DatasetError(f"line {lineno}: bad classes header {line!r}") from None
            elif key == "class_names":
                names = [n.strip() for n in value.split(",")]
            continue
        parts = line.split("\t")
        index = len(entries)
        if len(parts) != 2:
            raise DatasetError(f"entry {index} (line {lineno}): expected 'path<TAB>label'")
        rel, raw_label = parts
        try:
            label = int(raw_label)
        except ValueError:
            raise DatasetError(f"entry {index} ({rel}): bad label {raw_label!r}") from None
        entries.append((rel, label))
    if classes is None:
        raise DatasetError(f"{manifest_path}: missing '#classes=C' header")
    if not entries:
        raise DatasetError("empty dataset")
    for index, (rel, label) in enumerate(entries):
        if not 0 <= label < classes:
            raise DatasetError(f"entry {index} ({rel}): label {label} outside [0, {classes})")
        if not (root / rel).is_file():
            raise DatasetError(f"entry {index} ({rel}): image file missing")
    return DatasetManifest(root, entries, classes, names)


def write_manifest(path: str | Path, entries, classes: int, class_names=()) -> None:
    lines = [f"#classes={classes}"]
    if class_names:
        lines.append("#class_names=" + ",".join(class_names))
    lines += [f"{rel}\t{label}" for rel, label in entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- synthetic benchmark -----------------------------------------------------

@dataclass(frozen=True)
class ShapeSpec:
    height: int
    width: int
    label: int
    axis_ratio: float
    semi_minor: float
    center: tuple[float, float]
    background: float
    contrast: float
    texture_seed: int


def axis_ratio_for(label: int) -> float:
    """Class 0 is a circle, class c > 0 an ellipse with axis ratio 1.5^c."""
    return 1.5 ** label


def sample_shape(seed: int, index: int, classes: int = 2, ratio_range=(0.25, 4.0),
                 area: int = SYNTH_AREA) -> ShapeSpec:
    rng = np.random.default_rng([seed, index])
    label = index % classes
    lo, hi = ratio_range
    ratio = math.exp(rng.uniform(math.log(lo), math.log(hi)))  # width / height
    h = max(1, int(round(math.sqrt(area / ratio))))
    w = max(1, int(round(math.sqrt(area * ratio))))
    axis = axis_ratio_for(label)
    short = min(h, w)
    # equal-area radius so that size carries no class information; the major axis is horizontal
    radius = rng.uniform(RADIUS_LO, RADIUS_HI) * short
    semi_minor = radius / math.sqrt(axis)
    ay, ax = semi_minor, semi_minor * axis
    cy = rng.uniform(ay + 1, h - ay - 1)
    cx = rng.uniform(ax + 1, w - ax - 1)
    background = rng.uniform(0.2, 0.5)
    contrast = rng.uniform(CONTRAST_LO, CONTRAST_HI)
    return ShapeSpec(h, w, label, axis, semi_minor, (cy, cx), background, contrast,
                     int(rng.integers(2 ** 31)))


def render_shape(spec: ShapeSpec) -> np.ndarray:
    """Render to uint8 (h, w, 3): smooth textured background with one anti-aliased ellipse."""
    h, w = spec.height, spec.width
    rng = np.random.default_rng(spec.texture_seed)
    yy = np.arange(h) + 0.5
    xx = np.arange(w) + 0.5
    texture = np.zeros((h, w))
    for _ in range(3):
        fy, fx = rng.uniform(0.001, 0.004, 2) * 2 * np.pi
        phase = rng.uniform(0, 2 * np.pi)
        # sin(a + b) expanded so the plane wave is a sum of two outer products
        texture += TEXTURE_AMPLITUDE * (np.outer(np.sin(fy * yy), np.cos(fx * xx + phase))
                           + np.outer(np.cos(fy * yy), np.sin(fx * xx + phase)))
    tint = rng.uniform(-0.05, 0.05, 3)
    img = spec.background + texture[..., None] + tint
    ay, ax = spec.semi_minor, spec.semi_minor * spec.axis_ratio
    cy, cx = spec.center
    r0, r1 = max(0, int(cy - ay) - 2), min(h, int(cy + ay) + 3)
    c0, c1 = max(0, int(cx - ax) - 2), min(w, int(cx + ax) + 3)
    q = np.sqrt(((yy[r0:r1, None] - cy) / ay) ** 2 + ((xx[None, c0:c1] - cx) / ax) ** 2)
    alpha = np.clip((1.0 - q) * min(ax, ay) + 0.5, 0.0, 1.0)
    img[r0:r1, c0:c1] += alpha[..., None] * spec.contrast
    return to_uint8(np.clip(img, 0.0, 1.0))


class SyntheticDataset:
    """In-memory, lazily rendered view of the benchmark; identical to the on-disk files."""

    def __init__(self, n: int, classes: int = 2, ratio_range=(0.25, 4.0), seed: int = 0,
                 indices=None, cache: dict | None = None):
        if n <= 0:
            raise DatasetError("synthetic dataset needs n > 0")
        self.n, self.classes, self.ratio_range, self.seed = n, classes, tuple(ratio_range), seed
        self.indices = list(range(n)) if indices is None else list(indices)
        # uint8 renders keyed by generator index; shared with subsets
        self._cache = {} if cache is None else cache

    def __len__(self) -> int:
        return len(self.indices)

    def spec(self, i: int) -> ShapeSpec:
        return sample_shape(self.seed, self.indices[i], self.classes, self.ratio_range)

    def __getitem__(self, i: int) -> tuple[np.ndarray, int]:
        key = self.indices[i]
        raw = self._cache.get(key)
        if raw is None:
            raw = self._cache[key] = render_shape(self.spec(i))
        return raw.astype(np.float64) / 255.0, key % self.classes

    def dims(self, i: int) -> tuple[int, int]:
        spec = self.spec(i)
        return spec.height, spec.width

    @property
    def labels(self) -> np.ndarray:
        return np.array([self.indices[i] % self.classes for i in range(len(self))], dtype=np.int64)

    def subset(self, indices) -> SyntheticDataset:
        return SyntheticDataset(self.n, self.classes, self.ratio_range, self.seed,
                                [self.indices[i] for i in indices], self._cache)


def generate_synthetic(out_dir: str | Path, n: int, classes: int = 2, ratio_range=(0.25, 4.0),
                       seed: int = 0) -> Path:
    """Write ``n`` PPM images plus ``manifest.tsv`` under ``out_dir``; returns the manifest path."""
    if n <= 0:
        raise DatasetError("synthetic dataset needs n > 0")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        spec = sample_shape(seed, i, classes, ratio_range)
        rel = f"images/{i:06d}.ppm"
        (out / rel).write_bytes(encode_ppm(render_shape(spec)))
        entries.append((rel, spec.label))
    names = [SYNTH_CLASS_NAMES[0]] + [f"ellipse{1.5 ** c:g}" for c in range(1, classes)]
    if classes == 2:
        names = list(SYNTH_CLASS_NAMES)
    manifest = out / "manifest.tsv"
    write_manifest(manifest, entries, classes, names)
    return manifest
