"""Retrieval evaluation: embedding extraction, cross-camera ranking, CMC, mAP.

The test-time descriptor of an image is the mean of the model feature for
the image and for its horizontal mirror. Ranking is ascending Euclidean
distance with ties broken by gallery index (stable sort). Under the
cross-camera protocol, gallery entries sharing both identity and camera with
the query are ignored, and queries left without any cross-camera positive
are excluded from the averages and reported by index.

CMC@r is the fraction of queries whose first correct match appears within
the top r. mAP averages per-query average precision, where AP is the mean of
precision-at-k over the positions k holding correct matches.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, to_model_batch
from .model import RMGLModel, forward_features
from .tensor import Tensor, no_grad

__all__ = [
    "extract_embeddings",
    "rank_gallery",
    "average_precision",
    "RetrievalResult",
    "evaluate_retrieval",
    "evaluate_model",
    "write_report",
]


def extract_embeddings(
    model: RMGLModel,
    images: np.ndarray,
    batch_size: int = 32,
    flip_mean: bool = True,
) -> np.ndarray:
    """Eval-mode descriptors for (N, H, W, 3) uint8 images, flip-averaged."""
    model.eval()
    feats = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            chunk = to_model_batch(images[start : start + batch_size])
            f = forward_features(model, Tensor(chunk)).f.data
            if flip_mean:
                flipped = chunk[:, :, :, ::-1].copy()
                f = 0.5 * (f + forward_features(model, Tensor(flipped)).f.data)
            feats.append(f)
    return np.concatenate(feats, axis=0)


def rank_gallery(
    query_feat: np.ndarray,
    query_pid: int,
    query_cam: int,
    gallery_feats: np.ndarray,
    gallery_pids: np.ndarray,
    gallery_cams: np.ndarray,
    cross_camera: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Rank one query against the gallery.

    Returns (order, matches): gallery indices sorted by ascending distance
    (same-identity same-camera entries dropped when ``cross_camera``) and a
    boolean array marking correct identities along that order.
    """
    keep = np.ones(len(gallery_pids), dtype=bool)
    if cross_camera:
        keep &= ~((gallery_pids == query_pid) & (gallery_cams == query_cam))
    candidates = np.flatnonzero(keep)
    d = np.sqrt(((gallery_feats[candidates] - query_feat) ** 2).sum(axis=1))
    order = candidates[np.argsort(d, kind="stable")]
    return order, gallery_pids[order] == query_pid


def average_precision(matches: np.ndarray) -> float:
    """Mean of precision-at-k over the positions of correct matches."""
    hits = np.flatnonzero(matches)
    if len(hits) == 0:
        raise ValueError("average_precision needs at least one correct match")
    precisions = (np.arange(len(hits)) + 1.0) / (hits + 1.0)
    return float(precisions.mean())


@dataclass
class RetrievalResult:
    cmc: dict[int, float]
    mean_ap: float
    n_queries: int
    n_gallery: int
    excluded_queries: list[int] = field(default_factory=list)

    def to_report(self) -> dict:
        return {
            "cmc": {str(r): v for r, v in sorted(self.cmc.items())},
            "map": self.mean_ap,
            "n_queries": self.n_queries,
            "n_gallery": self.n_gallery,
            "excluded_queries": self.excluded_queries,
        }


def evaluate_retrieval(
    query_feats: np.ndarray,
    query_pids: np.ndarray,
    query_cams: np.ndarray,
    gallery_feats: np.ndarray,
    gallery_pids: np.ndarray,
    gallery_cams: np.ndarray,
    ranks: tuple[int, ...] = (1, 5, 10),
    cross_camera: bool = True,
) -> RetrievalResult:
    """CMC at the requested ranks and mAP over all scoreable queries."""
    if len(query_feats) == 0 or len(gallery_feats) == 0:
        raise ValueError("need at least one query and one gallery image")
    hits_at = {r: 0 for r in ranks}
    aps = []
    excluded = []
    for i in range(len(query_feats)):
        order, matches = rank_gallery(
            query_feats[i], query_pids[i], query_cams[i],
            gallery_feats, gallery_pids, gallery_cams, cross_camera,
        )
        if not matches.any():
            excluded.append(i)
            continue
        first = int(np.flatnonzero(matches)[0])
        for r in ranks:
            hits_at[r] += first < r
        aps.append(average_precision(matches))
    scored = len(query_feats) - len(excluded)
    if scored == 0:
        raise ValueError("every query was excluded: no cross-camera positives exist")
    return RetrievalResult(
        cmc={r: hits_at[r] / scored for r in ranks},
        mean_ap=float(np.mean(aps)),
        n_queries=scored,
        n_gallery=len(gallery_feats),
        excluded_queries=excluded,
    )


def evaluate_model(
    model: RMGLModel,
    dataset: Dataset,
    ranks: tuple[int, ...] = (1, 5, 10),
    batch_size: int = 32,
    flip_mean: bool = True,
) -> RetrievalResult:
    """Extract query/gallery embeddings from a dataset's splits and score them."""
    query = dataset.subset("query")
    gallery = dataset.subset("gallery")
    qf = extract_embeddings(model, query.images, batch_size, flip_mean)
    gf = extract_embeddings(model, gallery.images, batch_size, flip_mean)
    return evaluate_retrieval(
        qf, query.pids, query.cams, gf, gallery.pids, gallery.cams, ranks
    )


def write_report(path: str | Path, result: RetrievalResult, extra: dict | None = None) -> None:
    report = result.to_report()
    if extra:
        report.update(extra)
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
