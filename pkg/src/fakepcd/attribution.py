"""Threshold-based assignment of embeddings to known sources or Unknown.

Labels are plain integers here: ``0..K-1`` for known sources and
:data:`UNKNOWN_ID` (-1) for the unknown class.
"""

from __future__ import annotations

import math
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .nnet import CHECKPOINT_MAGIC, CHECKPOINT_VERSION, STAGE_TAGS, CheckpointError, _read_header
from .pointcloud import SourceLabel, make_rng

UNKNOWN_ID = -1


class AttributionError(ValueError):
    pass


@dataclass(frozen=True)
class AnchorSet:
    """Per-source anchor embeddings ``(K, N, d)`` with centroids and intra-cluster distances."""

    embeddings: np.ndarray
    names: Tuple[str, ...]
    centroids: np.ndarray
    intra_distances: np.ndarray

    @property
    def num_sources(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[2]

    @classmethod
    def from_embeddings(cls, embeddings: np.ndarray, names: Optional[Sequence[str]] = None) -> "AnchorSet":
        emb = np.asarray(embeddings, dtype=np.float64)
        if emb.ndim != 3:
            raise AttributionError(f"anchor embeddings must be (K, N, d), got {emb.shape}")
        centroids = emb.mean(axis=1)
        intra = np.linalg.norm(emb - centroids[:, None, :], axis=2)
        names = tuple(names) if names is not None else tuple(f"source{k}" for k in range(emb.shape[0]))
        emb.setflags(write=False)
        return cls(emb, names, centroids, intra)


def build_anchor_set(
    embeddings: np.ndarray,
    labels: Sequence[int],
    n_per_source: int = 100,
    seed: int = 0,
    names: Optional[Sequence[str]] = None,
) -> AnchorSet:
    """Pick ``n_per_source`` embeddings per known source uniformly at random."""
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    K = int(labels.max()) + 1
    rng = make_rng(seed)
    picked = []
    for k in range(K):
        pool = np.flatnonzero(labels == k)
        if len(pool) < n_per_source:
            name = names[k] if names else f"source{k}"
            raise AttributionError(f"source {name!r} has {len(pool)} samples, need {n_per_source}")
        picked.append(emb[np.sort(rng.choice(pool, size=n_per_source, replace=False))])
    return AnchorSet.from_embeddings(np.stack(picked), names)


def mean_source_distance(query: np.ndarray, anchors: AnchorSet) -> np.ndarray:
    """Mean Euclidean distance from ``query`` (``(d,)`` or ``(Q, d)``) to each source's anchors."""
    q = np.asarray(query, dtype=np.float64)
    if q.shape[-1] != anchors.dim:
        raise AttributionError(f"query dimension {q.shape[-1]} does not match anchors ({anchors.dim})")
    single = q.ndim == 1
    q = np.atleast_2d(q)
    diff = q[:, None, None, :] - anchors.embeddings[None]
    out = np.linalg.norm(diff, axis=3).mean(axis=2)
    return out[0] if single else out


def percentile(seq: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest element."""
    values = np.sort(np.asarray(seq, dtype=np.float64).ravel())
    if values.size == 0:
        raise AttributionError("percentile of an empty sequence")
    if not 0 < p <= 100:
        raise AttributionError(f"percentile must be in (0, 100], got {p}")
    rank = max(1, math.ceil(p / 100.0 * values.size))
    return float(values[rank - 1])


@dataclass(frozen=True)
class ThresholdPolicy:
    percentile: float
    threshold: float
    method: str = "unified"


def select_threshold(anchors: AnchorSet, p: float) -> ThresholdPolicy:
    """Smallest per-source P-percentile of the intra-cluster distances."""
    t = min(percentile(seq, p) for seq in anchors.intra_distances)
    return ThresholdPolicy(float(p), t)


@dataclass(frozen=True)
class AttributionResult:
    distances: np.ndarray
    threshold: float
    verdict: SourceLabel
    margin: float


def assign_ids(distances: np.ndarray, threshold: float) -> np.ndarray:
    """Vectorised verdicts for a ``(Q, K)`` distance matrix."""
    d = np.atleast_2d(distances)
    best = np.argmin(d, axis=1)
    unknown = d[np.arange(len(d)), best] > threshold
    return np.where(unknown, UNKNOWN_ID, best)


def assign(query: np.ndarray, anchors: AnchorSet, policy: ThresholdPolicy) -> AttributionResult:
    d = mean_source_distance(query, anchors)
    k = int(np.argmin(d))
    if d[k] > policy.threshold:
        verdict = SourceLabel.unknown()
    else:
        verdict = SourceLabel.known(k, anchors.names[k])
    return AttributionResult(d, policy.threshold, verdict, float(d[k] - policy.threshold))


# --- evaluation -------------------------------------------------------------


@dataclass
class Evaluation:
    known_accuracy: Optional[float]
    unknown_accuracy: Optional[float]
    accuracy: float
    macro_f1: float
    known_f1: Optional[float]
    unknown_f1: Optional[float]
    classes: List[int]
    confusion: np.ndarray

    def as_dict(self) -> Dict[str, Optional[float]]:
        return {
            "known_accuracy": self.known_accuracy,
            "unknown_accuracy": self.unknown_accuracy,
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "known_f1": self.known_f1,
            "unknown_f1": self.unknown_f1,
        }


def _f1_scores(conf: np.ndarray) -> np.ndarray:
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    return np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


def evaluate(predicted: Sequence[int], truth: Sequence[int]) -> Evaluation:
    """Accuracy split by known / unknown ground truth plus macro F1 with Unknown as a class.

    A split with no ground-truth samples is reported as ``None``.
    """
    pred = np.asarray(predicted, dtype=np.int64)
    true = np.asarray(truth, dtype=np.int64)
    if pred.shape != true.shape:
        raise AttributionError("predictions and ground truth must align")
    if pred.size == 0:
        raise AttributionError("nothing to evaluate")
    classes = sorted(set(true.tolist()) | set(pred.tolist()))
    index = {c: i for i, c in enumerate(classes)}
    conf = np.zeros((len(classes), len(classes)), dtype=np.int64)
    np.add.at(conf, ([index[t] for t in true], [index[p] for p in pred]), 1)
    f1 = _f1_scores(conf)
    known_mask = true != UNKNOWN_ID
    known_acc = float(np.mean(pred[known_mask] == true[known_mask])) if known_mask.any() else None
    unknown_acc = float(np.mean(pred[~known_mask] == UNKNOWN_ID)) if (~known_mask).any() else None
    known_cls = [index[c] for c in classes if c != UNKNOWN_ID and c in set(true.tolist())]
    known_f1 = float(np.mean(f1[known_cls])) if known_cls else None
    unknown_f1 = float(f1[index[UNKNOWN_ID]]) if UNKNOWN_ID in index and (~known_mask).any() else None
    return Evaluation(
        known_accuracy=known_acc,
        unknown_accuracy=unknown_acc,
        accuracy=float(np.mean(pred == true)),
        macro_f1=float(np.mean(f1)),
        known_f1=known_f1,
        unknown_f1=unknown_f1,
        classes=classes,
        confusion=conf,
    )


def threshold_sweep(distances: np.ndarray, truth: Sequence[int], thresholds: Sequence[float]) -> List[Evaluation]:
    return [evaluate(assign_ids(distances, t), truth) for t in thresholds]


def tune_percentile(
    anchors: AnchorSet,
    val_embeddings: np.ndarray,
    val_truth: Sequence[int],
    grid: Sequence[float] = (70, 75, 80, 85, 90, 95),
) -> Tuple[float, List[Tuple[float, Evaluation]]]:
    """Grid P maximising the mean of known and unknown accuracy; ties go to the smaller P."""
    truth = np.asarray(val_truth)
    if not (truth == UNKNOWN_ID).any() or not (truth != UNKNOWN_ID).any():
        raise AttributionError("validation set needs both known and unknown samples")
    d = mean_source_distance(val_embeddings, anchors)
    best_p, best_score = None, -np.inf
    curve = []
    for p in sorted(grid):
        ev = evaluate(assign_ids(d, select_threshold(anchors, p).threshold), truth)
        curve.append((p, ev))
        score = 0.5 * (ev.known_accuracy + ev.unknown_accuracy)
        if score > best_score:
            best_p, best_score = p, score
    return float(best_p), curve


# --- fully supervised baseline ----------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class LogitThreshold:
    """Reject when the top softmax probability falls below the lowest true-class
    probability seen on the training data."""

    threshold: float

    @classmethod
    def fit(cls, train_logits: np.ndarray, train_labels: Sequence[int]) -> "LogitThreshold":
        probs = softmax(np.asarray(train_logits, dtype=np.float64))
        labels = np.asarray(train_labels)
        return cls(float(np.min(probs[np.arange(len(labels)), labels])))

    @classmethod
    def from_probabilities(cls, true_class_probs: Sequence[float]) -> "LogitThreshold":
        return cls(float(np.min(true_class_probs)))

    def predict(self, logits: np.ndarray) -> np.ndarray:
        probs = softmax(np.atleast_2d(np.asarray(logits, dtype=np.float64)))
        top = np.argmax(probs, axis=1)
        ok = probs[np.arange(len(probs)), top] >= self.threshold
        return np.where(ok, top, UNKNOWN_ID)


def logit_threshold_baseline(train_logits: np.ndarray, train_labels: Sequence[int]) -> LogitThreshold:
    return LogitThreshold.fit(train_logits, train_labels)


# --- two-component Gaussian mixture for splitting unknowns --------------------


@dataclass
class GMMResult:
    labels: np.ndarray
    responsibilities: np.ndarray
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihoods: List[float] = field(default_factory=list)
    converged: bool = False


def _kmeanspp_centers(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None, :] - np.array(centers)[None]) ** 2).sum(axis=2), axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(x[rng.integers(len(x))])
        else:
            centers.append(x[rng.choice(len(x), p=d2 / total)])
    return np.array(centers)


def _log_gauss(x: np.ndarray, means: np.ndarray, variances: np.ndarray, covariance: str) -> np.ndarray:
    """``(n, k)`` log densities."""
    n, d = x.shape
    out = np.empty((n, len(means)))
    for j, (mu, var) in enumerate(zip(means, variances)):
        diff = x - mu
        if covariance == "diag":
            out[:, j] = -0.5 * (np.sum(diff**2 / var, axis=1) + np.sum(np.log(var)) + d * np.log(2 * np.pi))
        else:
            chol = np.linalg.cholesky(var)
            sol = np.linalg.solve(chol, diff.T)
            logdet = 2 * np.sum(np.log(np.diag(chol)))
            out[:, j] = -0.5 * (np.sum(sol**2, axis=0) + logdet + d * np.log(2 * np.pi))
    return out


def split_unknowns(
    embeddings: np.ndarray,
    components: int = 2,
    seed: int = 0,
    covariance: str = "diag",
    max_iter: int = 200,
    tol: float = 1e-8,
    ridge: float = 1e-6,
) -> GMMResult:
    """EM for a Gaussian mixture, seeded with k-means++ picks.

    Every covariance gets ``ridge`` added to its diagonal, with a warning when
    a component's spread is below the ridge. A component that collapses (no
    responsibility mass) keeps its previous parameters, also with a warning.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    n, d = x.shape
    if covariance not in ("diag", "full"):
        raise AttributionError(f"covariance must be 'diag' or 'full', got {covariance!r}")
    if n < components:
        raise AttributionError(f"need at least {components} embeddings, got {n}")
    rng = make_rng(seed)
    means = _kmeanspp_centers(x, components, rng)
    base_var = x.var(axis=0) + ridge
    if covariance == "diag":
        variances = np.tile(base_var, (components, 1))
    else:
        variances = np.tile(np.diag(base_var), (components, 1, 1))
    weights = np.full(components, 1.0 / components)
    lls: List[float] = []
    warned = False
    warned_ridge = False
    converged = False
    for _ in range(max_iter):
        logp = _log_gauss(x, means, variances, covariance) + np.log(weights)
        m = logp.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(logp - m).sum(axis=1))
        lls.append(float(lse.sum()))
        resp = np.exp(logp - lse[:, None])
        if len(lls) > 1 and abs(lls[-1] - lls[-2]) <= tol * max(1.0, abs(lls[-2])):
            converged = True
            break
        nk = resp.sum(axis=0)
        for j in range(components):
            if nk[j] < 1e-10:
                if not warned:
                    warnings.warn("mixture component collapsed; keeping previous parameters", RuntimeWarning)
                    warned = True
                continue
            r = resp[:, j]
            means[j] = r @ x / nk[j]
            diff = x - means[j]
            if covariance == "diag":
                raw = r @ diff**2 / nk[j]
                variances[j] = raw + ridge
                spread = raw.min()
            else:
                raw = (diff * r[:, None]).T @ diff / nk[j]
                variances[j] = raw + ridge * np.eye(d)
                spread = np.diag(raw).min()
            if spread < ridge and not warned_ridge:
                warnings.warn("degenerate mixture covariance; ridge-regularized", RuntimeWarning)
                warned_ridge = True
        weights = np.maximum(nk, 1e-300) / n
        weights /= weights.sum()
    logp = _log_gauss(x, means, variances, covariance) + np.log(weights)
    resp = np.exp(logp - logp.max(axis=1, keepdims=True))
    resp /= resp.sum(axis=1, keepdims=True)
    return GMMResult(np.argmax(resp, axis=1), resp, weights, means, variances, lls, converged)


def best_permutation_accuracy(predicted: Sequence[int], truth: Sequence[int]) -> float:
    """Clustering accuracy under the best one-to-one relabelling of clusters."""
    from itertools import permutations

    pred = np.asarray(predicted)
    true = np.asarray(truth)
    pc, tc = np.unique(pred), np.unique(true)
    k = max(len(pc), len(tc))
    best = 0.0
    for perm in permutations(range(k), len(pc)):
        mapping = {p: (tc[j] if j < len(tc) else None) for p, j in zip(pc, perm)}
        acc = float(np.mean([mapping[p] == t for p, t in zip(pred, true)]))
        best = max(best, acc)
    return best


# --- persistence ------------------------------------------------------------


def save_anchor_set(anchors: AnchorSet, path) -> None:
    """Checkpoint container with the ``anchors`` stage tag; names follow the parameters."""
    K, N, d = anchors.embeddings.shape
    body = bytearray(CHECKPOINT_MAGIC)
    body += struct.pack("<H", CHECKPOINT_VERSION)
    body += struct.pack("<I", 3) + struct.pack("<3I", K, N, d)
    body += struct.pack("<B", STAGE_TAGS["anchors"])
    body += np.ascontiguousarray(anchors.embeddings, dtype="<f8").tobytes()
    for name in anchors.names:
        raw = name.encode("utf-8")
        body += struct.pack("<I", len(raw)) + raw
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(body))


def load_anchor_set(path) -> AnchorSet:
    data = Path(path).read_bytes()
    off, dims, stage = _read_header(data, path)
    if stage != STAGE_TAGS["anchors"] or len(dims) != 3:
        raise CheckpointError(f"{path}: not an anchor set")
    K, N, d = dims
    size = K * N * d * 8
    if off + size > len(data) - 4:
        raise CheckpointError(f"{path}: truncated anchors")
    emb = np.frombuffer(data, dtype="<f8", count=K * N * d, offset=off).reshape(K, N, d).astype(np.float64)
    off += size
    names = []
    for _ in range(K):
        (ln,) = struct.unpack_from("<I", data, off)
        off += 4
        names.append(data[off : off + ln].decode("utf-8"))
        off += ln
    return AnchorSet.from_embeddings(emb, names)
