"""Ordinal image datasets: folder loading, controllable synthesis, fold splits.

Datasets hold grayscale or RGB images as float arrays in [0, 1] with integer
category labels 1..K. Folder datasets follow the layout ``<root>/<category>/``
with consecutive category directories "1".."K". Synthetic datasets encode the
category in the mean intensity of a foreground shape while shape identity and
position vary independently of the label, so "structural vs categorical"
ground truth is observable in tests.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

# Category intensity bands span [0.1, 0.9]; band width is the inter-category
# spacing that overlap_sigma is expressed in.
BAND_LO = 0.1
BAND_HI = 0.9

SHAPE_KINDS = ("square", "disk", "triangle")

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


class DatasetError(ValueError):
    """Raised for malformed dataset folders or invalid synthesis specs."""


@dataclass(frozen=True)
class OrdinalSample:
    """One labeled image: ``image`` in [0, 1], ``label`` in 1..K."""

    image: np.ndarray
    label: int


class OrdinalDataset:
    """Immutable collection of OrdinalSamples with per-category counts.

    All samples must share one image shape. ``counts[c - 1]`` is the number of
    samples with label c; categories may be empty.
    """

    def __init__(self, samples: list[OrdinalSample], k: int):
        if k < 2:
            raise DatasetError(f"need at least 2 categories, got K={k}")
        shape = None
        for s in samples:
            if not 1 <= s.label <= k:
                raise DatasetError(f"label {s.label} outside 1..{k}")
            if shape is None:
                shape = s.image.shape
            elif s.image.shape != shape:
                raise DatasetError(
                    f"inconsistent image shapes: {shape} vs {s.image.shape}"
                )
            lo, hi = float(s.image.min()), float(s.image.max())
            if lo < 0.0 or hi > 1.0:
                raise DatasetError(f"pixel values outside [0, 1]: [{lo}, {hi}]")
        self.samples = list(samples)
        self.k = k
        self.counts = [0] * k
        for s in samples:
            self.counts[s.label - 1] += 1
        self._by_label: dict[int, np.ndarray] = {}
        for c in range(1, k + 1):
            idx = [i for i, s in enumerate(samples) if s.label == c]
            self._by_label[c] = np.asarray(idx, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def image_shape(self) -> tuple[int, ...]:
        if not self.samples:
            raise DatasetError("empty dataset has no image shape")
        return self.samples[0].image.shape

    def indices_of_label(self, label: int) -> np.ndarray:
        return self._by_label[label]

    def labels_array(self) -> np.ndarray:
        return np.asarray([s.label for s in self.samples], dtype=np.int64)

    def images_array(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples]).astype(np.float32)

    def subset(self, indices) -> "OrdinalDataset":
        return OrdinalDataset([self.samples[int(i)] for i in indices], self.k)


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a controllable imbalanced/overlapping toy ordinal dataset.

    ``proportions`` are normalized to sum to 1 (raw percentage profiles such
    as [74, 7, 15, 3, 2] are accepted). ``overlap_sigma`` is the std of the
    categorical factor's Gaussian noise in units of the inter-category band
    spacing: 0 gives disjoint intensity bands, larger values make adjacent
    categories overlap.
    """

    k: int
    proportions: tuple[float, ...]
    image_size: int = 32
    overlap_sigma: float = 0.25
    structural_variation: tuple[str, ...] = ("shape", "jitter")
    seed: int = 0

    def __post_init__(self):
        if self.k < 2:
            raise DatasetError(f"K must be >= 2, got {self.k}")
        props = tuple(float(p) for p in self.proportions)
        if len(props) != self.k:
            raise DatasetError(
                f"proportions length {len(props)} != K={self.k}"
            )
        if any(p < 0 for p in props):
            raise DatasetError("proportions must be nonnegative")
        total = sum(props)
        if total <= 0:
            raise DatasetError("proportions must not all be zero")
        object.__setattr__(self, "proportions", tuple(p / total for p in props))
        if self.overlap_sigma < 0:
            raise DatasetError("overlap_sigma must be >= 0")
        if self.image_size < 8:
            raise DatasetError("image_size must be >= 8")
        for v in self.structural_variation:
            if v not in ("shape", "jitter"):
                raise DatasetError(f"unknown structural variation {v!r}")

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "proportions": list(self.proportions),
            "image_size": self.image_size,
            "overlap_sigma": self.overlap_sigma,
            "structural_variation": list(self.structural_variation),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f for f in cls.__dataclass_fields__}
        kwargs = {k: v for k, v in d.items() if k in known}
        missing = {"k", "proportions"} - set(kwargs)
        if missing:
            raise DatasetError(f"spec missing fields: {sorted(missing)}")
        if "proportions" in kwargs:
            kwargs["proportions"] = tuple(kwargs["proportions"])
        if "structural_variation" in kwargs:
            kwargs["structural_variation"] = tuple(kwargs["structural_variation"])
        return cls(**kwargs)


def band_center(label: int, k: int) -> float:
    """Center intensity of category ``label``'s band on [BAND_LO, BAND_HI]."""
    spacing = (BAND_HI - BAND_LO) / k
    return BAND_LO + (label - 0.5) * spacing


def category_counts(proportions, n_total: int) -> list[int]:
    """Round proportions to counts; rounding remainder goes to the majority."""
    raw = [p * n_total for p in proportions]
    counts = [int(round(r)) for r in raw]
    majority = int(np.argmax(counts))
    counts[majority] += n_total - sum(counts)
    if counts[majority] < 0:
        raise DatasetError("n_total too small for the requested proportions")
    return counts


def _shape_mask(size: int, kind: str, cx: float, cy: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == "square":
        return (np.abs(xx - cx) <= radius) & (np.abs(yy - cy) <= radius)
    if kind == "disk":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2
    if kind == "triangle":
        # upright triangle: apex at (cx, cy - radius), base at cy + radius
        inside_y = (yy >= cy - radius) & (yy <= cy + radius)
        half_width = (yy - (cy - radius)) / 2.0
        return inside_y & (np.abs(xx - cx) <= half_width)
    raise DatasetError(f"unknown shape kind {kind!r}")


def build_synthetic_dataset(spec: SyntheticSpec, n_total: int) -> OrdinalDataset:
    """Synthesize a toy ordinal dataset per ``spec``.

    The categorical factor of an image is the fill intensity of a single
    foreground shape, drawn from the label's band center plus Gaussian noise
    of std ``overlap_sigma * band spacing``. Shape kind and a +/-15% center
    jitter vary independently of the label. Deterministic under the spec seed.
    """
    if n_total < spec.k:
        raise DatasetError(f"n_total={n_total} < K={spec.k}")
    rng = np.random.default_rng(spec.seed)
    counts = category_counts(spec.proportions, n_total)
    size = spec.image_size
    spacing = (BAND_HI - BAND_LO) / spec.k
    vary_shape = "shape" in spec.structural_variation
    vary_pos = "jitter" in spec.structural_variation

    samples: list[OrdinalSample] = []
    for label in range(1, spec.k + 1):
        center = band_center(label, spec.k)
        for _ in range(counts[label - 1]):
            factor = center + rng.normal(0.0, 1.0) * spec.overlap_sigma * spacing
            factor = float(np.clip(factor, 0.02, 1.0))
            kind = SHAPE_KINDS[rng.integers(len(SHAPE_KINDS))] if vary_shape else "square"
            jitter = rng.uniform(-0.15, 0.15, size=2) if vary_pos else np.zeros(2)
            cx = size / 2.0 + jitter[0] * size
            cy = size / 2.0 + jitter[1] * size
            radius = 0.28 * size
            img = np.zeros((size, size), dtype=np.float32)
            img[_shape_mask(size, kind, cx, cy, radius)] = factor
            samples.append(OrdinalSample(image=img, label=label))
    # interleave categories deterministically so slices of the dataset are mixed
    order = rng.permutation(len(samples))
    return OrdinalDataset([samples[i] for i in order], spec.k)


def _load_image_file(path: Path, image_size: int | None) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if image_size is not None:
                im = im.resize((image_size, image_size), Image.BILINEAR)
            if im.mode in ("L", "I", "I;16", "1"):
                arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
                arr = arr.transpose(2, 0, 1)  # channels-first
    except (OSError, ValueError) as exc:
        raise DatasetError(f"unreadable image file {path}: {exc}") from exc
    return np.clip(arr, 0.0, 1.0)


def load_folder_dataset(root_path, image_size: int | None = None) -> OrdinalDataset:
    """Load ``<root>/<category_int>/<image files>`` with categories "1".."K".

    Category directories must be consecutive starting at 1; a gap raises a
    DatasetError naming the missing category. Empty category directories load
    with a warning (count 0). Images are normalized to [0, 1]; grayscale files
    become (H, W) arrays and color files (3, H, W).
    """
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    numbered = {}
    for child in root.iterdir():
        if child.is_dir() and child.name.isdigit():
            numbered[int(child.name)] = child
    if not numbered:
        raise DatasetError(f"no category directories found under {root}")
    k = max(numbered)
    for c in range(1, k + 1):
        if c not in numbered:
            raise DatasetError(f"category {c} missing (found directories 1..{k})")

    samples: list[OrdinalSample] = []
    for c in range(1, k + 1):
        files = sorted(
            p for p in numbered[c].iterdir()
            if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
        )
        if not files:
            warnings.warn(f"category directory {numbered[c]} is empty", stacklevel=2)
        for f in files:
            samples.append(OrdinalSample(image=_load_image_file(f, image_size), label=c))
    return OrdinalDataset(samples, k)


def save_folder_dataset(ds: OrdinalDataset, root_path) -> Path:
    """Write ``ds`` in folder layout plus a manifest.json of counts."""
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    per_label_index = {c: 0 for c in range(1, ds.k + 1)}
    for c in range(1, ds.k + 1):
        (root / str(c)).mkdir(exist_ok=True)
    for s in ds.samples:
        arr = s.image
        if arr.ndim == 3:
            arr = arr.transpose(1, 2, 0)
        im = Image.fromarray(np.round(np.asarray(arr) * 255.0).astype(np.uint8))
        idx = per_label_index[s.label]
        per_label_index[s.label] += 1
        im.save(root / str(s.label) / f"{idx:05d}.png")
    manifest = {"k": ds.k, "counts": ds.counts, "n_total": len(ds)}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return root


def split_folds(
    ds: OrdinalDataset, n_folds: int, seed: int = 0
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified (train, validation) index partitions.

    Validation folds are disjoint and cover samples of each category whose
    count permits it; per-category validation sizes differ by at most one
    sample across folds. Categories with fewer samples than folds get a
    best-effort assignment: singleton categories stay in every training split
    (with a warning) so no fold ever trains on an empty category.
    """
    if n_folds < 2:
        raise DatasetError(f"n_folds must be >= 2, got {n_folds}")
    rng = np.random.default_rng(seed)
    val_members: list[list[int]] = [[] for _ in range(n_folds)]
    for c in range(1, ds.k + 1):
        idx = ds.indices_of_label(c)
        if len(idx) == 0:
            warnings.warn(f"category {c} has no samples", stacklevel=2)
            continue
        if len(idx) < n_folds:
            warnings.warn(
                f"category {c} has {len(idx)} samples for {n_folds} folds; "
                "best-effort assignment",
                stacklevel=2,
            )
        if len(idx) < 2:
            # keep the lone sample in training everywhere
            continue
        perm = idx[rng.permutation(len(idx))]
        for pos, sample_idx in enumerate(perm):
            val_members[pos % n_folds].append(int(sample_idx))

    all_indices = np.arange(len(ds))
    folds = []
    for f in range(n_folds):
        val = np.asarray(sorted(val_members[f]), dtype=np.int64)
        mask = np.ones(len(ds), dtype=bool)
        mask[val] = False
        folds.append((all_indices[mask], val))
    return folds
