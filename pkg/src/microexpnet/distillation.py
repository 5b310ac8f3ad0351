"""Knowledge distillation: softened softmax, the blended soft/hard loss
with its analytic gradient, and teacher logit tables keyed by sample id.

The loss for a batch of N rows is

    L = lambda * mean_i H(p_t_i, p_s_i) + (1 - lambda) * mean_i H(y_i, q_i)

where p_t and p_s are teacher and student softmax at temperature T, q is
the student softmax at temperature 1, and H is cross-entropy. Its gradient
with respect to the student logits follows in closed form:

    dL/dv = lambda / (N * T) * (p_s - p_t) + (1 - lambda) / N * (q - y)

The optional ``t_squared`` gradient scale multiplies the soft term by T*T,
which keeps its magnitude comparable across temperatures; the default
leaves the gradient exactly as differentiation gives it.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Optional, Sequence

import numpy as np

from .errors import (
    CoverageError,
    DimensionError,
    FormatError,
    NumericError,
    ValidationError,
)
from .layers import LOG_CLAMP, softmax
from .tensor import read_tensor, write_tensor

NUM_LOGITS = 8

GRAD_SCALE_MODES = ("none", "t_squared")

LOGITS_MAGIC = b"MXTL"

_CSV_HEADER = ["sample_id"] + [f"z{i}" for i in range(NUM_LOGITS)]


def softened_softmax(logits, temperature: float) -> np.ndarray:
    """Softmax of logits divided by a strictly positive temperature."""
    if temperature <= 0:
        raise ValidationError(f"temperature must be positive, got {temperature}")
    return softmax(np.asarray(logits) / temperature)


class TeacherLogits:
    """Immutable table of per-sample teacher logit vectors.

    Ids are strings; every row has exactly NUM_LOGITS finite values.
    """

    def __init__(self, ids: Sequence, logits, source: str = "memory"):
        id_list = [str(i) for i in ids]
        arr = np.asarray(logits, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[1] != NUM_LOGITS:
            raise FormatError(
                f"teacher logits must be N x {NUM_LOGITS}, got shape {list(arr.shape)}"
            )
        if len(id_list) != arr.shape[0]:
            raise DimensionError(
                f"{len(id_list)} ids for {arr.shape[0]} logit rows"
            )
        if len(set(id_list)) != len(id_list):
            dupes = sorted({i for i in id_list if id_list.count(i) > 1})
            raise ValidationError(f"duplicate teacher logit ids: {dupes[:5]}")
        if not np.all(np.isfinite(arr)):
            raise NumericError("teacher logits contain non-finite values")
        self.ids = id_list
        self.logits = arr
        self.source = source
        self._row = {sample_id: i for i, sample_id in enumerate(id_list)}

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, sample_id) -> bool:
        return str(sample_id) in self._row

    def vector(self, sample_id) -> np.ndarray:
        key = str(sample_id)
        if key not in self._row:
            raise CoverageError(f"no teacher logits for sample {key!r}")
        return self.logits[self._row[key]]

    def matrix(self, sample_ids: Iterable) -> np.ndarray:
        """Rows for the given ids, in order. Missing ids raise CoverageError
        listing what is absent."""
        keys = [str(i) for i in sample_ids]
        missing = [k for k in keys if k not in self._row]
        if missing:
            shown = ", ".join(missing[:10])
            more = f" (and {len(missing) - 10} more)" if len(missing) > 10 else ""
            raise CoverageError(
                f"teacher logits missing {len(missing)} sample ids: {shown}{more}"
            )
        return self.logits[[self._row[k] for k in keys]]

    def validate_coverage(self, manifest) -> None:
        """Check that every manifest sample has a logit row."""
        self.matrix(sample.id for sample in manifest.samples)

    def save(self, path) -> None:
        """Write CSV when the path ends in .csv, else the binary container."""
        if str(path).endswith(".csv"):
            self.save_csv(path)
        else:
            self.save_binary(path)

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(_CSV_HEADER)
            for sample_id, row in zip(self.ids, self.logits):
                writer.writerow([sample_id] + [str(v) for v in row])

    def save_binary(self, path) -> None:
        blob = json.dumps({"ids": self.ids}).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(LOGITS_MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            write_tensor(fh, self.logits)


def _load_logits_csv(path) -> TeacherLogits:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"teacher logit file {path} is empty") from None
        if header != _CSV_HEADER:
            raise FormatError(
                f"teacher logit CSV header must be {','.join(_CSV_HEADER)}, "
                f"got {','.join(header)}"
            )
        ids = []
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 1 + NUM_LOGITS:
                raise FormatError(
                    f"{path}:{line_no}: row has {len(row) - 1} logits, "
                    f"expected {NUM_LOGITS}"
                )
            ids.append(row[0])
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise FormatError(f"{path}:{line_no}: {exc}") from None
    if not ids:
        raise FormatError(f"teacher logit file {path} has no rows")
    return TeacherLogits(ids, np.array(rows, dtype=np.float32), source=str(path))


def _load_logits_binary(path) -> TeacherLogits:
    with open(path, "rb") as fh:
        fh.read(4)  # magic, already sniffed
        raw = fh.read(4)
        if len(raw) != 4:
            raise FormatError(f"truncated teacher logit file {path}")
        (blob_len,) = struct.unpack("<I", raw)
        blob = fh.read(blob_len)
        if len(blob) != blob_len:
            raise FormatError(f"truncated id index in {path}")
        try:
            ids = json.loads(blob.decode("utf-8"))["ids"]
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
            raise FormatError(f"bad id index in {path}: {exc}") from None
        logits = read_tensor(fh)
    return TeacherLogits(ids, logits, source=str(path))


def load_teacher_logits(path, manifest=None) -> TeacherLogits:
    """Load a teacher logit table, sniffing CSV versus binary by content.

    With a manifest, additionally require a row for every manifest sample.
    """
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == LOGITS_MAGIC:
        table = _load_logits_binary(path)
    else:
        table = _load_logits_csv(path)
    if manifest is not None:
        table.validate_coverage(manifest)
    return table


@dataclass
class DistillationConfig:
    """Soft-target training settings plus the bound teacher table."""

    temperature: float
    lam: float = 0.5
    grad_scale_mode: str = "none"
    teacher: Optional[TeacherLogits] = field(default=None, repr=False)

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValidationError(
                f"temperature must be positive, got {self.temperature}"
            )
        if not 0.0 <= self.lam <= 1.0:
            raise ValidationError(f"lambda must be in [0, 1], got {self.lam}")
        if self.grad_scale_mode not in GRAD_SCALE_MODES:
            raise ValidationError(
                f"grad_scale_mode must be one of {GRAD_SCALE_MODES}, "
                f"got {self.grad_scale_mode!r}"
            )

    def to_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "lambda": self.lam,
            "grad_scale_mode": self.grad_scale_mode,
            "teacher_source": self.teacher.source if self.teacher else None,
        }


def kd_loss(student_logits, teacher_logits, labels, config: DistillationConfig):
    """Blended distillation loss over a batch; returns (loss, d_logits).

    ``student_logits`` and ``teacher_logits`` are N x C logit rows,
    ``labels`` N x C one-hot (or soft) target rows summing to 1.
    """
    v = np.atleast_2d(np.asarray(student_logits))
    z = np.atleast_2d(np.asarray(teacher_logits))
    y = np.atleast_2d(np.asarray(labels))
    if not (v.shape == z.shape == y.shape):
        raise DimensionError(
            f"kd loss: student {list(v.shape)}, teacher {list(z.shape)} and "
            f"labels {list(y.shape)} must align"
        )
    if v.shape[0] < 1:
        raise DimensionError("kd loss needs at least one row")
    row_sums = y.sum(axis=-1)
    if float(np.max(np.abs(row_sums - 1.0))) > 1e-4:
        raise ValidationError("label rows must sum to 1")
    n = v.shape[0]
    t = config.temperature
    lam = config.lam
    p_teacher = softened_softmax(z, t)
    p_student_soft = softened_softmax(v, t)
    p_student = softmax(v)
    soft = float(
        -(p_teacher * np.log(np.maximum(p_student_soft, LOG_CLAMP))).sum(axis=-1).mean()
    )
    hard = float(-(y * np.log(np.maximum(p_student, LOG_CLAMP))).sum(axis=-1).mean())
    loss = lam * soft + (1.0 - lam) * hard
    soft_scale = lam * t if config.grad_scale_mode == "t_squared" else lam / t
    d_logits = (
        soft_scale * (p_student_soft - p_teacher) + (1.0 - lam) * (p_student - y)
    ) / n
    return loss, d_logits.astype(v.dtype, copy=False)
