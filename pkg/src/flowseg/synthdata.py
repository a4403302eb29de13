"""Synthetic multi-annotator segmentation data.

Each example is a bright axis-aligned ellipse on a noisy background.  Every
annotator outlines the ellipse with an independently jittered radius, which
puts annotator disagreement on the boundary.  A fraction of examples is
*ambiguous*: the lesion is rendered faint and each annotator independently
leaves the mask empty with probability ``absence_prob``.

Mask geometry uses integer pixel grids and plain arithmetic so a given seed
produces the same bytes on every platform.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
MAX_BLOB_RETRIES = 100


class DatasetFormatError(ValueError):
    """Base class for on-disk dataset problems."""


class ManifestError(DatasetFormatError):
    pass


class TruncatedDataError(DatasetFormatError):
    pass


class ShapeMismatchError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    num_examples: int = 200
    size: int = 16
    num_annotators: int = 4
    boundary_jitter: float = 0.7
    absence_prob: float = 0.5
    ambiguous_fraction: float = 0.5
    noise_level: float = 0.05
    seed: int = 0
    # radius range in pixels and the largest axis ratio of the ellipse
    radius_range: tuple = (2.5, 4.5)
    max_aspect: float = 1.3
    lesion_intensity: float = 0.9
    faint_intensity: float = 0.45

    def __post_init__(self):
        if self.num_examples < 0:
            raise ValueError("num_examples must be >= 0")
        if self.size < 4:
            raise ValueError("image side must be at least 4 pixels")
        if self.num_annotators < 1:
            raise ValueError("num_annotators must be >= 1")
        for name in ("absence_prob", "ambiguous_fraction"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {val}")
        if self.boundary_jitter < 0 or self.noise_level < 0:
            raise ValueError("boundary_jitter and noise_level must be non-negative")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid radius_range {self.radius_range}")
        object.__setattr__(self, "radius_range", (float(lo), float(hi)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["radius_range"] = list(self.radius_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ManifestError(f"unknown dataset spec keys {sorted(unknown)}")
        d = dict(d)
        if "radius_range" in d:
            d["radius_range"] = tuple(d["radius_range"])
        return cls(**d)


PRESETS = {
    "lidc-like": dict(num_annotators=4, boundary_jitter=0.7, absence_prob=0.5,
                      ambiguous_fraction=0.5, noise_level=0.05),
    "kvasir-like": dict(num_annotators=1, boundary_jitter=0.0, absence_prob=0.0,
                        ambiguous_fraction=0.0, noise_level=0.08,
                        radius_range=(2.0, 6.0), max_aspect=2.0),
    "tiny": dict(num_examples=24, size=8, num_annotators=4, boundary_jitter=0.5,
                 absence_prob=0.5, ambiguous_fraction=0.5, radius_range=(1.5, 2.5)),
}


def preset(name: str, **overrides) -> DatasetSpec:
    try:
        base = dict(PRESETS[name])
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    base.update(overrides)
    return DatasetSpec(**base)


@dataclass
class AnnotatedExample:
    image: np.ndarray  # (H, W) float32 in [0, 1]
    masks: np.ndarray  # (A, H, W) uint8 in {0, 1}
    ambiguous: bool = False


@dataclass
class Dataset:
    spec: DatasetSpec
    examples: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.examples)

    def __getitem__(self, i) -> AnnotatedExample:
        return self.examples[i]

    @property
    def images(self) -> np.ndarray:
        return np.stack([e.image for e in self.examples])

    @property
    def masks(self) -> np.ndarray:
        return np.stack([e.masks for e in self.examples])

    @property
    def ambiguous(self) -> np.ndarray:
        return np.array([e.ambiguous for e in self.examples], dtype=bool)

    def subset(self, indices) -> "Dataset":
        return Dataset(self.spec, [self.examples[i] for i in indices])


def _ellipse(size: int, ci: int, cj: int, ri: float, rj: float) -> np.ndarray:
    ii, jj = np.mgrid[0:size, 0:size]
    di = (ii - ci) / ri
    dj = (jj - cj) / rj
    return (di * di + dj * dj <= 1.0).astype(np.uint8)


def _draw_example(spec: DatasetSpec, rng: np.random.Generator) -> AnnotatedExample:
    n = spec.size
    lo, hi = spec.radius_range
    ambiguous = bool(rng.random() < spec.ambiguous_fraction)
    for _ in range(MAX_BLOB_RETRIES):
        r = rng.uniform(lo, hi)
        aspect = rng.uniform(1.0, spec.max_aspect)
        if rng.random() < 0.5:
            ri, rj = r, r / aspect
        else:
            ri, rj = r / aspect, r
        margin = int(np.ceil(max(ri, rj)))
        if 2 * margin + 1 > n:
            margin = (n - 1) // 2
        ci = int(rng.integers(margin, n - margin))
        cj = int(rng.integers(margin, n - margin))
        jitter = rng.normal(0.0, spec.boundary_jitter, size=spec.num_annotators)
        absent = rng.random(spec.num_annotators) < spec.absence_prob
        if min(ri, rj) >= 1.0 and np.all(min(ri, rj) + jitter >= 1.0):
            break
    else:
        raise ValueError("could not draw a non-degenerate blob; radius range too small")

    base = _ellipse(n, ci, cj, ri, rj)
    masks = np.zeros((spec.num_annotators, n, n), dtype=np.uint8)
    for a in range(spec.num_annotators):
        if ambiguous and absent[a]:
            continue
        masks[a] = _ellipse(n, ci, cj, ri + jitter[a], rj + jitter[a])
    intensity = spec.faint_intensity if ambiguous else spec.lesion_intensity
    noise = rng.normal(0.0, spec.noise_level, size=(n, n)) if spec.noise_level > 0 else 0.0
    image = np.clip(intensity * base + noise, 0.0, 1.0).astype(np.float32)
    return AnnotatedExample(image=image, masks=masks, ambiguous=ambiguous)


def generate_dataset(spec: DatasetSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    return Dataset(spec, [_draw_example(spec, rng) for _ in range(spec.num_examples)])


# -- on-disk format -------------------------------------------------------------

IMAGE_FILE = "images.f32"
MASK_FILE = "masks.u8"
MANIFEST = "manifest.json"
_MANIFEST_KEYS = {"format_version", "height", "width", "num_examples", "num_annotators",
                  "image_file", "mask_file", "spec"}


def save_dataset(d: Dataset, path) -> Path:
    """Write manifest.json, images.f32 and masks.u8 into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n = d.spec.size
    manifest = {
        "format_version": FORMAT_VERSION,
        "height": n,
        "width": n,
        "num_examples": len(d),
        "num_annotators": d.spec.num_annotators,
        "image_file": IMAGE_FILE,
        "mask_file": MASK_FILE,
        "spec": d.spec.to_dict(),
        "ambiguous": [int(a) for a in (d.ambiguous if len(d) else [])],
    }
    images = d.images if len(d) else np.zeros((0, n, n), np.float32)
    masks = d.masks if len(d) else np.zeros((0, d.spec.num_annotators, n, n), np.uint8)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (path / IMAGE_FILE).write_bytes(images.astype("<f4").tobytes())
    (path / MASK_FILE).write_bytes(masks.astype(np.uint8).tobytes())
    return path


def _read_manifest(path: Path) -> dict:
    mpath = path / MANIFEST
    if not mpath.is_file():
        raise ManifestError(f"{mpath}: manifest not found")
    text = mpath.read_text()
    if not text.strip():
        raise ManifestError(f"{mpath}: manifest is empty")
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{mpath}: invalid JSON ({exc})") from None
    if not isinstance(manifest, dict):
        raise ManifestError(f"{mpath}: manifest must be a JSON object")
    missing = _MANIFEST_KEYS - set(manifest)
    if missing:
        raise ManifestError(f"{mpath}: missing keys {sorted(missing)}")
    if manifest["format_version"] != FORMAT_VERSION:
        raise ManifestError(f"{mpath}: unsupported format_version {manifest['format_version']}")
    for key in ("height", "width", "num_examples", "num_annotators"):
        if not isinstance(manifest[key], int) or manifest[key] < 0:
            raise ManifestError(f"{mpath}: {key} must be a non-negative integer")
    return manifest


def _read_blob(path: Path, expected: int, what: str) -> bytes:
    if not path.is_file():
        raise TruncatedDataError(f"{what} file {path} missing (expected {expected} bytes)")
    raw = path.read_bytes()
    if len(raw) < expected:
        raise TruncatedDataError(
            f"{what} file {path.name} truncated: expected {expected} bytes, found {len(raw)}")
    if len(raw) > expected:
        raise ShapeMismatchError(
            f"{what} file {path.name} has {len(raw)} bytes, manifest implies {expected}")
    return raw


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest = _read_manifest(path)
    spec = DatasetSpec.from_dict(manifest["spec"])
    h, w = manifest["height"], manifest["width"]
    n, a = manifest["num_examples"], manifest["num_annotators"]
    if n == 0:
        raise ManifestError(f"{path}: dataset has no examples")
    if h != w or h != spec.size or a != spec.num_annotators:
        raise ShapeMismatchError(
            f"{path}: manifest shape {n}x{a}x{h}x{w} disagrees with spec "
            f"(size {spec.size}, annotators {spec.num_annotators})")
    images = np.frombuffer(_read_blob(path / manifest["image_file"], 4 * n * h * w, "image"),
                           dtype="<f4").reshape(n, h, w).astype(np.float32)
    masks = np.frombuffer(_read_blob(path / manifest["mask_file"], n * a * h * w, "mask"),
                          dtype=np.uint8).reshape(n, a, h, w).copy()
    if masks.size and masks.max() > 1:
        raise ShapeMismatchError(f"{path}: mask bytes must be 0 or 1")
    ambiguous = manifest.get("ambiguous") or [0] * n
    if len(ambiguous) != n:
        raise ShapeMismatchError(f"{path}: ambiguity flags cover {len(ambiguous)} of {n} examples")
    examples = [AnnotatedExample(images[i].copy(), masks[i], bool(ambiguous[i])) for i in range(n)]
    return Dataset(spec, examples)


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    if a.spec != b.spec or len(a) != len(b):
        return False
    return all(
        np.array_equal(x.image, y.image) and np.array_equal(x.masks, y.masks)
        and x.ambiguous == y.ambiguous
        for x, y in zip(a.examples, b.examples)
    )


def split_folds(d, k: int, seed: int):
    """Hold out ~10% as a fixed test set and k-fold the rest.

    Returns ``(folds, test)`` where ``folds`` is a list of ``(train, val)``
    index arrays and ``test`` the held-out indices.
    """
    n = d if isinstance(d, int) else len(d)
    if k < 2:
        raise ValueError("need at least 2 folds")
    n_test = max(1, n // 10)
    if n - n_test < k:
        raise ValueError(f"{k} folds need at least {k + n_test} examples, dataset has {n}")
    perm = np.random.default_rng(seed).permutation(n)
    test = np.sort(perm[:n_test])
    parts = [np.sort(p) for p in np.array_split(perm[n_test:], k)]
    folds = []
    for i in range(k):
        train = np.sort(np.concatenate([parts[j] for j in range(k) if j != i]))
        folds.append((train, parts[i]))
    return folds, test


def file_digest(path) -> str:
    """SHA-256 over the dataset files, for reproducibility checks."""
    h = hashlib.sha256()
    for name in (MANIFEST, IMAGE_FILE, MASK_FILE):
        h.update(name.encode())
        h.update(Path(os.fspath(path), name).read_bytes())
    return h.hexdigest()
