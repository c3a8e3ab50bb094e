"""Synthetic person-like identity data, manifests, and identity-balanced batches.

Identities are vertical band signatures: the image height is divided into
equal color bands and each identity owns a fixed palette, so different image
rows carry identity evidence — the property stripe-based features exploit.
Per-image nuisances (color jitter, vertical offset, pixel noise) and
per-camera tints (channel gains and brightness shifts) make the retrieval
split non-trivial across cameras.

A dataset is a flat array of images with identity, camera, and split tags
(``train`` / ``query`` / ``gallery``). Every query identity is guaranteed to
appear in the gallery under a different camera. Datasets round-trip through
a manifest CSV (``path,id,cam,split``) plus one PPM file per image.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import read_ppm, write_ppm

__all__ = [
    "Dataset",
    "ManifestRow",
    "make_synthetic_dataset",
    "to_model_batch",
    "sample_pk_batch",
    "write_manifest",
    "read_manifest",
    "save_dataset",
    "load_dataset",
    "check_query_coverage",
]

SPLITS = ("train", "query", "gallery")

# per-camera channel gains and brightness offsets
CAMERA_STYLES = (
    ((1.00, 0.92, 0.85), 0.0),
    ((0.85, 1.00, 0.92), 12.0),
    ((0.92, 0.85, 1.00), -12.0),
    ((0.95, 0.95, 1.05), 20.0),
)


@dataclass
class Dataset:
    """Images (N, H, W, 3) uint8 with per-image identity, camera, and split tags."""

    images: np.ndarray
    pids: np.ndarray
    cams: np.ndarray
    split: np.ndarray  # unicode array over SPLITS

    def __post_init__(self):
        n = len(self.images)
        if not (len(self.pids) == len(self.cams) == len(self.split) == n):
            raise ValueError("images, pids, cams, and split must have equal length")
        bad = set(np.unique(self.split)) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split tags {sorted(bad)}; expected {SPLITS}")

    def __len__(self) -> int:
        return len(self.images)

    def indices(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
        return np.flatnonzero(self.split == split)

    def subset(self, split: str) -> "Dataset":
        idx = self.indices(split)
        return Dataset(self.images[idx], self.pids[idx], self.cams[idx], self.split[idx])

    @property
    def num_identities(self) -> int:
        return len(np.unique(self.pids))


def _render_identity_image(
    palette: np.ndarray,
    style: tuple[tuple[float, float, float], float],
    rng: np.random.Generator,
    height: int,
    width: int,
) -> np.ndarray:
    """One observation of an identity: banded palette + nuisances + camera tint."""
    n_bands = palette.shape[0]
    band_h = height // n_bands
    img = np.repeat(palette, band_h, axis=0)[:height].astype(np.float64)
    img = np.repeat(img[:, None, :], width, axis=1)
    # per-image color jitter and vertical misalignment
    img += rng.normal(0.0, 10.0, size=(n_bands, 1, 3)).repeat(band_h, axis=0)[:height]
    img = np.roll(img, rng.integers(-band_h, band_h + 1), axis=0)
    gains, offset = style
    img = img * np.asarray(gains) + offset
    img += rng.normal(0.0, 4.0, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def make_synthetic_dataset(
    n_identities: int = 16,
    n_cameras: int = 2,
    train_per_camera: int = 4,
    eval_per_camera: int = 2,
    height: int = 48,
    width: int = 16,
    n_bands: int = 6,
    seed: int = 0,
) -> Dataset:
    """Generate a banded-identity dataset with a cross-camera retrieval split.

    Evaluation images from camera 0 become queries; evaluation images from
    all other cameras form the gallery, so every query identity has
    cross-camera matches.
    """
    if n_cameras < 2:
        raise ValueError("need at least 2 cameras for a cross-camera split")
    if n_cameras > len(CAMERA_STYLES):
        raise ValueError(f"at most {len(CAMERA_STYLES)} camera styles are defined")
    if height % n_bands != 0:
        raise ValueError(f"height {height} must be divisible by n_bands {n_bands}")
    rng = np.random.default_rng(seed)
    # well-separated palettes: one random color per band per identity
    palettes = rng.integers(0, 256, size=(n_identities, n_bands, 3)).astype(np.float64)
    images, pids, cams, split = [], [], [], []
    for pid in range(n_identities):
        for cam in range(n_cameras):
            style = CAMERA_STYLES[cam]
            for i in range(train_per_camera + eval_per_camera):
                img = _render_identity_image(palettes[pid], style, rng, height, width)
                images.append(img)
                pids.append(pid)
                cams.append(cam)
                if i < train_per_camera:
                    split.append("train")
                else:
                    split.append("query" if cam == 0 else "gallery")
    return Dataset(
        images=np.stack(images),
        pids=np.asarray(pids, dtype=np.int64),
        cams=np.asarray(cams, dtype=np.int64),
        split=np.asarray(split),
    )


def to_model_batch(images: np.ndarray) -> np.ndarray:
    """(N, H, W, 3) uint8 -> (N, 3, H, W) float64 in [0, 1]."""
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[3] != 3:
        raise ValueError(f"expected (n, h, w, 3) images, got {images.shape}")
    return np.transpose(images.astype(np.float64) / 255.0, (0, 3, 1, 2))


def sample_pk_batch(
    pids: np.ndarray, p: int, k: int, rng: np.random.Generator
) -> np.ndarray:
    """Indices of an identity-balanced batch: p identities, k samples each.

    Identities are drawn without replacement; an identity's images are drawn
    without replacement when it has at least k, otherwise with replacement.
    """
    pids = np.asarray(pids)
    unique = np.unique(pids)
    if p < 1 or k < 1:
        raise ValueError(f"p and k must be >= 1, got p={p}, k={k}")
    if len(unique) < p:
        raise ValueError(
            f"cannot sample {p} identities from a pool of {len(unique)}"
        )
    chosen = rng.choice(unique, size=p, replace=False)
    out = []
    for pid in chosen:
        pool = np.flatnonzero(pids == pid)
        out.append(rng.choice(pool, size=k, replace=len(pool) < k))
    return np.concatenate(out)


@dataclass(frozen=True)
class ManifestRow:
    path: str
    pid: int
    cam: int
    split: str


def write_manifest(rows: list[ManifestRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "id", "cam", "split"])
        for row in rows:
            writer.writerow([row.path, row.pid, row.cam, row.split])


def read_manifest(path: str | Path) -> list[ManifestRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["path", "id", "cam", "split"]:
            raise ValueError(f"bad manifest header {header!r}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 4:
                raise ValueError(f"manifest line {lineno}: expected 4 fields, got {len(rec)}")
            path_, pid, cam, split = rec
            if split not in SPLITS:
                raise ValueError(f"manifest line {lineno}: unknown split {split!r}")
            rows.append(ManifestRow(path_, int(pid), int(cam), split))
    return rows


def save_dataset(dataset: Dataset, out_dir: str | Path) -> Path:
    """Write one PPM per image plus manifest.csv; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(exist_ok=True)
    rows = []
    for i in range(len(dataset)):
        rel = f"images/{i:05d}_id{dataset.pids[i]:03d}_c{dataset.cams[i]}.ppm"
        write_ppm(out / rel, dataset.images[i])
        rows.append(ManifestRow(rel, int(dataset.pids[i]), int(dataset.cams[i]),
                                str(dataset.split[i])))
    manifest = out / "manifest.csv"
    write_manifest(rows, manifest)
    return manifest


def check_query_coverage(dataset: Dataset) -> None:
    """Every query identity must appear in the gallery under another camera."""
    query = dataset.subset("query")
    gallery = dataset.subset("gallery")
    uncovered = []
    for pid in np.unique(query.pids):
        q_cams = set(query.cams[query.pids == pid])
        g_cams = set(gallery.cams[gallery.pids == pid])
        if not any(g_cams - {c} for c in q_cams):
            uncovered.append(int(pid))
    if uncovered:
        raise ValueError(
            f"query identities {uncovered} have no cross-camera gallery images"
        )


def load_dataset(manifest_path: str | Path) -> Dataset:
    """Rebuild a dataset from a manifest; image paths resolve next to it."""
    manifest_path = Path(manifest_path)
    rows = read_manifest(manifest_path)
    if not rows:
        raise ValueError(f"manifest {manifest_path} lists no images")
    negative = [r.pid for r in rows if r.pid < 0] + [r.cam for r in rows if r.cam < 0]
    if negative:
        raise ValueError(f"manifest {manifest_path}: negative identity or camera ids")
    base = manifest_path.parent
    dataset = Dataset(
        images=np.stack([read_ppm(base / r.path) for r in rows]),
        pids=np.asarray([r.pid for r in rows], dtype=np.int64),
        cams=np.asarray([r.cam for r in rows], dtype=np.int64),
        split=np.asarray([r.split for r in rows]),
    )
    check_query_coverage(dataset)
    return dataset
