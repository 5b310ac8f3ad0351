"""Dataset handling: manifest parsing, image decoding to normalized
grayscale, crop augmentation, and cross-validation fold assignment.

A dataset is described by a manifest CSV with columns
``id,image_path,label,subject_id``. Images are decoded to 96x96 grayscale
in [0, 1]; training uses eight fixed 84x84 crops per image and evaluation
uses the center crop.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ValidationError

WORKING_SIZE = 96
CROP_SIZE = 84

FOLD_COUNT = 10

SPLIT_MODES = ("random", "subject_independent")

REQUIRED_COLUMNS = ("id", "image_path", "label", "subject_id")

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass(frozen=True)
class Sample:
    id: str
    image_path: str
    label: int
    subject_id: str


@dataclass
class DatasetManifest:
    """Parsed and validated dataset description."""

    samples: list[Sample]
    class_names: list[str]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def by_id(self, sample_id: str) -> Sample:
        return self._index()[sample_id]

    def _index(self) -> dict[str, Sample]:
        if not hasattr(self, "_by_id"):
            object.__setattr__(self, "_by_id", {s.id: s for s in self.samples})
        return self._by_id

    def subjects(self) -> list[str]:
        return sorted({s.subject_id for s in self.samples})

    def class_counts(self) -> list[int]:
        counts = [0] * self.num_classes
        for s in self.samples:
            counts[s.label] += 1
        return counts


def load_manifest(
    path,
    num_classes: Optional[int] = None,
    class_names: Optional[Sequence[str]] = None,
) -> DatasetManifest:
    """Parse a manifest CSV and validate every row.

    Relative image paths resolve against the manifest's directory. The
    class count defaults to max(label) + 1 when neither ``num_classes`` nor
    ``class_names`` is given. All validation problems are collected and
    reported together.
    """
    if class_names is not None:
        if num_classes is not None and num_classes != len(class_names):
            raise ValidationError(
                f"num_classes {num_classes} disagrees with "
                f"{len(class_names)} class names"
            )
        num_classes = len(class_names)
    base = Path(path).parent
    problems: list[str] = []
    samples: list[Sample] = []
    seen_ids: set[str] = set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        missing_cols = [c for c in REQUIRED_COLUMNS if c not in fields]
        if missing_cols:
            raise ValidationError(
                f"manifest is missing columns {missing_cols}; header was {fields}"
            )
        for line_no, row in enumerate(reader, start=2):
            sample_id = (row["id"] or "").strip()
            if not sample_id:
                problems.append(f"line {line_no}: empty id")
                continue
            if sample_id in seen_ids:
                problems.append(f"line {line_no}: duplicate id {sample_id!r}")
                continue
            seen_ids.add(sample_id)
            raw_path = (row["image_path"] or "").strip()
            resolved = Path(raw_path)
            if not resolved.is_absolute():
                resolved = base / resolved
            if not resolved.is_file():
                problems.append(f"line {line_no}: image {raw_path!r} does not exist")
            try:
                label = int(row["label"])
            except (TypeError, ValueError):
                problems.append(
                    f"line {line_no}: label {row['label']!r} is not an integer"
                )
                continue
            if label < 0:
                problems.append(f"line {line_no}: negative label {label}")
                continue
            subject = (row["subject_id"] or "").strip()
            if not subject:
                problems.append(f"line {line_no}: empty subject_id")
                continue
            samples.append(Sample(sample_id, str(resolved), label, subject))
    if not samples and not problems:
        problems.append("manifest has no data rows")
    if num_classes is None:
        num_classes = max((s.label for s in samples), default=0) + 1
    for s in samples:
        if s.label >= num_classes:
            problems.append(
                f"sample {s.id!r}: label {s.label} is outside the declared "
                f"{num_classes} classes"
            )
    if problems:
        shown = "\n  - ".join(problems[:20])
        more = f"\n  ... and {len(problems) - 20} more" if len(problems) > 20 else ""
        raise ValidationError(f"manifest validation failed:\n  - {shown}{more}")
    names = list(class_names) if class_names else [f"class_{i}" for i in range(num_classes)]
    return DatasetManifest(samples=samples, class_names=names)


def bilinear_resize(image, out_h: int, out_w: int) -> np.ndarray:
    """Resize a 2-D array with bilinear interpolation, half-pixel centers,
    and edge clamping."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 2:
        raise ValidationError(f"bilinear_resize expects HxW, got {list(img.shape)}")
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    src_y = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    src_x = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(src_y).astype(np.intp)
    x0 = np.floor(src_x).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (src_y - y0).astype(np.float32)[:, None]
    wx = (src_x - x0).astype(np.float32)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bottom = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bottom * wy


def decode_grayscale(path, target: int = WORKING_SIZE) -> np.ndarray:
    """Decode an image file to (target, target, 1) float32 grayscale in [0, 1].

    Color inputs collapse through the BT.601 luma weights; 8- and 16-bit
    grayscale scale by their full range. Non-square or differently sized
    inputs are resized bilinearly.
    """
    try:
        with Image.open(path) as img:
            if img.mode in ("P", "LA", "PA"):
                img = img.convert("RGB")
            mode = img.mode
            arr = np.asarray(img)
    except (UnidentifiedImageError, OSError) as exc:
        raise OSError(f"cannot decode image {path}: {exc}") from None
    if arr.ndim == 3:
        gray = arr[:, :, :3].astype(np.float32) @ _LUMA
        scale = 255.0
    else:
        gray = arr.astype(np.float32)
        if mode == "I":
            # Pillow widens 16-bit grayscale (e.g. PGM with maxval 65535)
            # to 32-bit storage; the pixel range is still 16-bit.
            scale = 65535.0
        elif arr.dtype.kind in "iu":
            scale = float(np.iinfo(arr.dtype).max)
        else:
            scale = 1.0
    gray = gray / scale
    if gray.shape != (target, target):
        gray = bilinear_resize(gray, target, target)
    return np.ascontiguousarray(gray[:, :, None], dtype=np.float32)


def _crop(image: np.ndarray, row: int, col: int, size: int) -> np.ndarray:
    return np.ascontiguousarray(image[row : row + size, col : col + size])


def eight_crops(image, crop: int = CROP_SIZE) -> list[np.ndarray]:
    """The eight fixed crops used for training augmentation, in order:
    four corners (TL, TR, BL, BR), then top-center, bottom-center,
    left-center, right-center."""
    img = np.asarray(image)
    h, w = img.shape[0], img.shape[1]
    if crop > h or crop > w:
        raise ValidationError(f"crop {crop} exceeds image {h}x{w}")
    center_row = (h - crop) // 2
    center_col = (w - crop) // 2
    anchors = [
        (0, 0),
        (0, w - crop),
        (h - crop, 0),
        (h - crop, w - crop),
        (0, center_col),
        (h - crop, center_col),
        (center_row, 0),
        (center_row, w - crop),
    ]
    return [_crop(img, r, c, crop) for r, c in anchors]


def center_crop(image, crop: int = CROP_SIZE) -> np.ndarray:
    """The single evaluation crop, anchored at the floored center offset."""
    img = np.asarray(image)
    h, w = img.shape[0], img.shape[1]
    if crop > h or crop > w:
        raise ValidationError(f"crop {crop} exceeds image {h}x{w}")
    return _crop(img, (h - crop) // 2, (w - crop) // 2, crop)


@dataclass
class FoldSplit:
    """Assignment of every sample id to one of ``k`` folds."""

    mode: str
    k: int
    seed: int
    assignment: dict[str, int]

    def test_ids(self, fold: int) -> list[str]:
        self._check_fold(fold)
        return [i for i, f in self.assignment.items() if f == fold]

    def train_ids(self, fold: int) -> list[str]:
        self._check_fold(fold)
        return [i for i, f in self.assignment.items() if f != fold]

    def fold_sizes(self) -> list[int]:
        sizes = [0] * self.k
        for f in self.assignment.values():
            sizes[f] += 1
        return sizes

    def _check_fold(self, fold: int) -> None:
        if not 0 <= fold < self.k:
            raise ValidationError(f"fold index {fold} out of range [0, {self.k})")

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "fold"])
            for sample_id, fold in self.assignment.items():
                writer.writerow([sample_id, fold])


def make_folds(manifest: DatasetManifest, mode: str, seed: int, k: int = FOLD_COUNT) -> FoldSplit:
    """Assign samples to ``k`` folds.

    ``random`` shuffles samples and deals them round-robin, so fold sizes
    differ by at most one. ``subject_independent`` deals shuffled subjects
    round-robin instead, keeping every subject's samples in a single fold;
    it needs at least ``k`` distinct subjects.
    """
    if mode not in SPLIT_MODES:
        raise ValidationError(f"mode must be one of {SPLIT_MODES}, got {mode!r}")
    if k < 2:
        raise ValidationError(f"fold count must be at least 2, got {k}")
    rng = np.random.default_rng(seed)
    if mode == "random":
        order = rng.permutation(len(manifest.samples))
        assignment = {
            manifest.samples[int(j)].id: i % k for i, j in enumerate(order)
        }
    else:
        subjects = manifest.subjects()
        if len(subjects) < k:
            raise ValidationError(
                f"subject_independent folds need at least {k} subjects, "
                f"got {len(subjects)}"
            )
        order = rng.permutation(len(subjects))
        fold_of = {subjects[int(j)]: i % k for i, j in enumerate(order)}
        assignment = {s.id: fold_of[s.subject_id] for s in manifest.samples}
    # Re-key in manifest order so downstream iteration is deterministic.
    assignment = {s.id: assignment[s.id] for s in manifest.samples}
    return FoldSplit(mode=mode, k=k, seed=seed, assignment=assignment)


def subject_overlap_fraction(manifest: DatasetManifest, split: FoldSplit) -> float:
    """Mean fraction of each fold's test subjects that also appear in its
    training portion. Zero for subject-independent splits by construction;
    typically large for random splits, which is the point of reporting it."""
    by_id = {s.id: s.subject_id for s in manifest.samples}
    fractions = []
    for fold in range(split.k):
        test_subjects = {by_id[i] for i in split.test_ids(fold)}
        if not test_subjects:
            continue
        train_subjects = {by_id[i] for i in split.train_ids(fold)}
        fractions.append(len(test_subjects & train_subjects) / len(test_subjects))
    return float(np.mean(fractions)) if fractions else 0.0
