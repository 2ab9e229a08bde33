"""Segmentation metrics, spectral redundancy and embedding export."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, List, Mapping, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import ParameterError, ShapeError


def _binary_pair(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return pred.astype(bool), gt.astype(bool)


def dsc(pred, gt) -> float:
    """2|A∩B| / (|A| + |B|); 1 when both masks are empty."""
    a, b = _binary_pair(pred, gt)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def iou(pred, gt) -> float:
    a, b = _binary_pair(pred, gt)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def _directed(src: np.ndarray, dst: np.ndarray) -> float:
    # exact Euclidean distance from every pixel to the nearest dst pixel
    dist = ndimage.distance_transform_edt(~dst)
    return float(dist[src].max())


def hausdorff(pred, gt) -> float:
    """Symmetric Hausdorff distance between foreground pixel sets, in pixels.

    Both empty -> 0; only one empty -> the image diagonal.
    """
    a, b = _binary_pair(pred, gt)
    has_a, has_b = a.any(), b.any()
    if not has_a and not has_b:
        return 0.0
    if not (has_a and has_b):
        h, w = a.shape[-2:]
        return math.hypot(h, w)
    return max(_directed(a, b), _directed(b, a))


@dataclass
class MetricReport:
    dsc: float
    iou: float
    hd: float
    n_scenes: int
    loss: float = float("nan")

    @classmethod
    def from_rows(cls, rows: Sequence[Mapping[str, float]], loss: float = float("nan")) -> "MetricReport":
        if not rows:
            return cls(float("nan"), float("nan"), float("nan"), 0, loss)
        return cls(
            float(np.mean([r["dsc"] for r in rows])),
            float(np.mean([r["iou"] for r in rows])),
            float(np.mean([r["hd"] for r in rows])),
            len(rows),
            loss,
        )

    def as_dict(self) -> dict:
        return {"dsc": self.dsc, "iou": self.iou, "hd": self.hd, "n_scenes": self.n_scenes, "loss": self.loss}

    def log_row(self, epoch: int, split: str) -> dict:
        return {"epoch": epoch, "split": split, "dsc": self.dsc, "iou": self.iou, "hd": self.hd, "loss": self.loss}


def spectral_redundancy(tokens) -> float:
    """Mean |Pearson r| between adjacent band tokens (rows of an [S, L] array).

    A pair containing a constant token contributes 0.
    """
    t = np.asarray(tokens, dtype=np.float64)
    if t.ndim != 2 or t.shape[0] < 2:
        raise ParameterError(f"need an [S >= 2, L] token array, got shape {t.shape}")
    if t.shape[1] < 2:
        raise ParameterError("token dimension L must be >= 2 for a correlation")
    centred = t - t.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centred, axis=1)
    vals = []
    for i in range(t.shape[0] - 1):
        denom = norms[i] * norms[i + 1]
        if denom == 0.0:
            vals.append(0.0)
        else:
            vals.append(min(abs(float(centred[i] @ centred[i + 1]) / denom), 1.0))
    return float(np.mean(vals))


EMBEDDING_STAGES = ("raw", "CFE", "SQS", "SSD")


def export_embeddings(groups: Iterable[Tuple[str, np.ndarray, np.ndarray]], path) -> int:
    """Write ``(stage, tokens [N, d], labels [N])`` groups as CSV; returns the data row count.

    Columns: stage, token_index, label, dim_0 .. dim_{d-1}, where d is the widest
    stage; narrower stages leave their trailing cells empty.
    """
    groups = [(s, np.asarray(t, dtype=np.float64), np.asarray(l)) for s, t, l in groups]
    dim = max((t.shape[1] for _, t, _ in groups if t.size), default=0)
    n = 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "token_index", "label"] + [f"dim_{k}" for k in range(dim)])
        for stage, tokens, labels in groups:
            if stage not in EMBEDDING_STAGES:
                raise ParameterError(f"unknown embedding stage {stage!r}")
            if tokens.ndim != 2 or len(tokens) != len(labels):
                raise ShapeError(f"stage {stage}: tokens must be [N, d] with N labels")
            pad = [""] * (dim - tokens.shape[1])
            for i, (row, label) in enumerate(zip(tokens, labels)):
                writer.writerow([stage, i, int(label)] + [repr(float(v)) for v in row] + pad)
                n += 1
    return n


def read_embeddings(path) -> List[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        dims = [c for c in reader.fieldnames if c.startswith("dim_")]
        return [
            {
                "stage": r["stage"],
                "token_index": int(r["token_index"]),
                "label": int(r["label"]),
                "values": np.array([float(r[c]) for c in dims if r[c] != ""]),
            }
            for r in reader
        ]


SCENE_METRIC_COLUMNS = ("scene_id", "dsc", "iou", "hd")


def write_scene_metrics(rows: Sequence[Mapping], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SCENE_METRIC_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r[k] for k in SCENE_METRIC_COLUMNS})
