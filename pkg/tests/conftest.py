"""Shared fixtures: synthetic datasets small enough to train on in-process.

Two families are used throughout the suite. The "shapes" dataset holds
96x96 renderings of three high-contrast glyph classes (disk, hollow
square, cross) spread over 20 subjects, learnable by the smallest model in
a handful of epochs. The "constant" dataset holds flat images whose class
is a function of intensity alone, the cheapest possible sanity input.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest


def write_pgm(path, img: np.ndarray) -> None:
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.clip(img, 0, 255).astype(np.uint8).tobytes())


def build_shapes_dataset(
    root: Path, n_subjects: int = 20, per_subject: int = 10, seed: int = 0
) -> Path:
    """Write a 3-class glyph dataset plus manifest; returns the manifest path."""
    rng = np.random.default_rng(seed)
    (root / "img").mkdir(parents=True, exist_ok=True)
    rows = ["id,image_path,label,subject_id"]
    yy, xx = np.mgrid[0:96, 0:96]
    for s in range(n_subjects):
        bias = rng.integers(-6, 7, size=2)
        for j in range(per_subject):
            label = (s * per_subject + j) % 3
            img = np.full((96, 96), 30.0)
            img += rng.normal(0, 8, size=(96, 96))
            cy = 48 + bias[0] + rng.integers(-5, 6)
            cx = 48 + bias[1] + rng.integers(-5, 6)
            if label == 0:
                r = rng.integers(16, 25)
                img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 215.0
            elif label == 1:
                h = rng.integers(18, 26)
                outer = (abs(yy - cy) <= h) & (abs(xx - cx) <= h)
                inner = (abs(yy - cy) <= h - 7) & (abs(xx - cx) <= h - 7)
                img[outer & ~inner] = 215.0
            else:
                w, arm = 6, rng.integers(26, 34)
                horizontal = (abs(yy - cy) <= w) & (abs(xx - cx) <= arm)
                vertical = (abs(xx - cx) <= w) & (abs(yy - cy) <= arm)
                img[horizontal | vertical] = 215.0
            img = np.clip(img + rng.normal(0, 6, size=(96, 96)), 0, 255)
            sample_id = f"s{s:02d}_{j:02d}"
            write_pgm(root / "img" / f"{sample_id}.pgm", img)
            rows.append(f"{sample_id},img/{sample_id}.pgm,{label},subj{s:02d}")
    manifest = root / "manifest.csv"
    manifest.write_text("\n".join(rows) + "\n")
    return manifest


def build_constant_dataset(root: Path, per_class: int = 10) -> Path:
    """Write flat-intensity images: class 0 is dark, 1 mid, 2 bright, with
    ten distinct levels per class. Each image is its own subject."""
    (root / "img").mkdir(parents=True, exist_ok=True)
    rows = ["id,image_path,label,subject_id"]
    for label, base in enumerate((10, 100, 190)):
        for j in range(per_class):
            value = base + 5 * j
            img = np.full((96, 96), float(value))
            sample_id = f"c{label}_{j:02d}"
            write_pgm(root / "img" / f"{sample_id}.pgm", img)
            rows.append(f"{sample_id},img/{sample_id}.pgm,{label},p{label}_{j:02d}")
    manifest = root / "manifest.csv"
    manifest.write_text("\n".join(rows) + "\n")
    return manifest


@pytest.fixture(scope="session")
def shapes_manifest_path(tmp_path_factory) -> Path:
    return build_shapes_dataset(tmp_path_factory.mktemp("shapes"))


@pytest.fixture(scope="session")
def constant_manifest_path(tmp_path_factory) -> Path:
    return build_constant_dataset(tmp_path_factory.mktemp("constant"))


@pytest.fixture(scope="session")
def shapes_manifest(shapes_manifest_path):
    from microexpnet.data import load_manifest

    return load_manifest(shapes_manifest_path)


@pytest.fixture(scope="session")
def constant_manifest(constant_manifest_path):
    from microexpnet.data import load_manifest

    return load_manifest(constant_manifest_path)


@pytest.fixture(scope="session")
def shapes_image_cache(shapes_manifest):
    from microexpnet.data import decode_grayscale

    return {s.id: decode_grayscale(s.image_path) for s in shapes_manifest.samples}


@pytest.fixture(scope="session")
def constant_image_cache(constant_manifest):
    from microexpnet.data import decode_grayscale

    return {s.id: decode_grayscale(s.image_path) for s in constant_manifest.samples}


def assert_grad_close(analytic, numeric, label: str = "gradient") -> None:
    """Elementwise |analytic - numeric| <= max(1e-3 * magnitude, 1e-4)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    assert a.shape == n.shape, f"{label}: shapes {a.shape} vs {n.shape}"
    tol = np.maximum(1e-3 * np.maximum(np.abs(a), np.abs(n)), 1e-4)
    diff = np.abs(a - n)
    worst = float(diff.max()) if diff.size else 0.0
    assert np.all(diff <= tol), f"{label}: worst deviation {worst:.3e}"
