"""k-NN retrieval evaluation and the accuracy / forgetting metrics."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .models import ModelState, encode


@dataclass
class GalleryIndex:
    embeddings: np.ndarray  # (M, D)
    instance_ids: np.ndarray  # (M,)
    task_ids: np.ndarray  # (M,)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.instance_ids = np.asarray(self.instance_ids, dtype=np.int64)
        self.task_ids = np.asarray(self.task_ids, dtype=np.int64)
        m = len(self.embeddings)
        if self.embeddings.ndim != 2 or len(self.instance_ids) != m or len(self.task_ids) != m:
            raise ValueError(f"GalleryIndex rows misaligned: embeddings {self.embeddings.shape}, "
                             f"instance_ids {self.instance_ids.shape}, task_ids {self.task_ids.shape}")

    def __len__(self) -> int:
        return len(self.embeddings)


def embed_images(model: ModelState, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    if len(images) == 0:
        return np.zeros((0, model.embed_dim))
    chunks = [encode(model, images[i:i + batch_size]).values
              for i in range(0, len(images), batch_size)]
    return np.concatenate(chunks, axis=0)


def embed_gallery(model: ModelState, gallery, task_ids=None) -> GalleryIndex:
    """Embed a list of gallery Samples (task ids default to 0)."""
    if len(gallery) == 0:
        raise ValueError("embed_gallery: gallery is empty")
    images = np.stack([s.image for s in gallery])
    ids = np.array([s.instance_id for s in gallery])
    tids = np.zeros(len(gallery), dtype=np.int64) if task_ids is None else np.asarray(task_ids)
    return GalleryIndex(embed_images(model, images), ids, tids)


def _distances(index: GalleryIndex, rows: np.ndarray) -> np.ndarray:
    diff = index.embeddings[rows, None, :] - index.embeddings[None, :, :]
    return np.sqrt(np.einsum("qmd,qmd->qm", diff, diff))


def _vote(ids: np.ndarray, dists: np.ndarray) -> int:
    counts = Counter(ids.tolist())
    best = max(counts.values())
    tied = [i for i, c in counts.items() if c == best]
    if len(tied) == 1:
        return tied[0]
    summed = {i: float(dists[ids == i].sum()) for i in tied}
    return min(tied, key=lambda i: (summed[i], i))


def _neighbors(dist_row: np.ndarray, query_row: int, k: int) -> np.ndarray:
    d = dist_row.copy()
    d[query_row] = np.inf
    order = np.argsort(d, kind="stable")
    return order[:k]


def knn_predict(index: GalleryIndex, query_row: int, k: int = 100) -> int:
    """Majority instance id among the k nearest other gallery rows.

    Ties go to the smaller summed distance, then to the smaller id.
    """
    m = len(index)
    if m < 2:
        raise ValueError("knn_predict: index needs at least 2 rows")
    k = max(1, min(k, m - 1))
    dist = _distances(index, np.array([query_row]))[0]
    nb = _neighbors(dist, query_row, k)
    return _vote(index.instance_ids[nb], dist[nb])


def knn_predict_all(index: GalleryIndex, k: int = 100, chunk: int = 128) -> np.ndarray:
    """Leave-one-out predictions for every gallery row, in row order."""
    m = len(index)
    if m < 2:
        raise ValueError("knn_predict: index needs at least 2 rows")
    k = max(1, min(k, m - 1))
    preds = np.empty(m, dtype=np.int64)
    for start in range(0, m, chunk):
        rows = np.arange(start, min(m, start + chunk))
        dist = _distances(index, rows)
        for q, row in enumerate(rows):
            nb = _neighbors(dist[q], row, k)
            preds[row] = _vote(index.instance_ids[nb], dist[q][nb])
    return preds


def nearest_neighbors(index: GalleryIndex, query_row: int, n: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Row indices and distances of the ``n`` closest other rows, nearest first."""
    dist = _distances(index, np.array([query_row]))[0]
    nb = _neighbors(dist, query_row, min(n, len(index) - 1))
    return nb, dist[nb]


@dataclass
class SessionColumn:
    per_task: np.ndarray
    overall: float


def session_eval(index: GalleryIndex, n_tasks: int | None = None, k: int = 100) -> SessionColumn:
    """Leave-one-out retrieval accuracy of each task's gallery slice."""
    preds = knn_predict_all(index, k)
    hit = preds == index.instance_ids
    n_tasks = int(index.task_ids.max()) + 1 if n_tasks is None else n_tasks
    per_task = np.full(n_tasks, np.nan)
    for t in range(n_tasks):
        mask = index.task_ids == t
        if mask.any():
            per_task[t] = hit[mask].mean()
    return SessionColumn(per_task, float(hit.mean()))


@dataclass
class SessionMatrix:
    """Accuracy of task t's gallery slice after session s, stored as a[t][s].

    Entries with t > s (tasks not yet introduced) are recorded for the
    heatmap but ignored by both metrics.
    """

    n_tasks: int
    columns: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def from_array(cls, a) -> "SessionMatrix":
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError(f"session matrix must be 2-D, got shape {a.shape}")
        return cls(a.shape[0], [a[:, s].copy() for s in range(a.shape[1])])

    def append(self, column) -> None:
        column = np.asarray(column, dtype=np.float64)
        if column.shape != (self.n_tasks,):
            raise ValueError(f"column shape {column.shape} != ({self.n_tasks},)")
        finite = column[np.isfinite(column)]
        if np.any((finite < 0) | (finite > 1)):
            raise ValueError("accuracies must lie in [0, 1]")
        self.columns.append(column)

    @property
    def n_sessions(self) -> int:
        return len(self.columns)

    def to_array(self) -> np.ndarray:
        if not self.columns:
            return np.zeros((self.n_tasks, 0))
        return np.stack(self.columns, axis=1)


def _as_array(matrix) -> np.ndarray:
    return matrix.to_array() if isinstance(matrix, SessionMatrix) else np.asarray(matrix, dtype=np.float64)


def accuracy_metric(matrix) -> float:
    """Mean over sessions of the mean accuracy over tasks seen so far."""
    a = _as_array(matrix)
    if a.ndim != 2 or a.size == 0:
        raise ValueError("accuracy_metric: empty session matrix")
    per_session = [a[: min(s + 1, a.shape[0]), s].mean() for s in range(a.shape[1])]
    return float(np.mean(per_session))


def forgetting_metric(matrix) -> float:
    """Mean over tasks measured at least twice of (best - final) accuracy."""
    a = _as_array(matrix)
    if a.ndim != 2 or a.shape[1] < 2:
        raise ValueError("forgetting_metric: need at least 2 sessions")
    last = a.shape[1] - 1
    drops = [a[t, t:].max() - a[t, last] for t in range(min(a.shape[0], last))]
    return float(np.mean(drops))


def relative_drop(same_acc: float, cross_acc: float) -> float:
    """Relative accuracy drop in percent."""
    if same_acc == 0:
        raise ValueError("relative_drop: same-domain accuracy is 0")
    return 100.0 * (same_acc - cross_acc) / same_acc


@dataclass
class CrossResult:
    acc: float
    drop_pct: float


def cross_dataset_eval(model: ModelState, foreign_gallery, same_acc: float, k: int = 100) -> CrossResult:
    """Retrieval accuracy on another dataset's gallery plus its relative drop."""
    if same_acc == 0:
        raise ValueError("cross_dataset_eval: same-domain accuracy is 0")
    index = embed_gallery(model, foreign_gallery)
    acc = session_eval(index, n_tasks=1, k=k).overall
    return CrossResult(acc, relative_drop(same_acc, acc))
