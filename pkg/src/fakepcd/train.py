"""Close-world cross-entropy training and open-world supervised contrastive training."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .nnet import Model, NumericError, attach_projection, backward, encode_batch
from .pointcloud import AugmentPolicy, augment_points, make_rng

log = logging.getLogger(__name__)


class TrainConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    temperature: float = 0.07
    seed: int = 0
    early_stop_patience: Optional[int] = None
    early_stop_min_delta: float = 1e-4
    embed_dim: int = 32
    projection_hidden: Tuple[int, ...] = (512,)
    grad_clip: Optional[float] = 5.0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainConfigError("epochs and batch_size must be positive")
        if not self.learning_rate > 0:
            raise TrainConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not self.temperature > 0:
            raise TrainConfigError(f"temperature must be > 0, got {self.temperature}")
        if not 0 <= self.momentum < 1:
            raise TrainConfigError(f"momentum must be in [0, 1), got {self.momentum}")


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    accuracy: float


@dataclass
class TrainResult:
    model: Model
    metrics: List[EpochMetrics] = field(default_factory=list)
    stopped_early: bool = False


# --- losses -----------------------------------------------------------------


def _logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def cross_entropy_loss(logits: np.ndarray, label: int) -> Tuple[float, np.ndarray]:
    """-log softmax(logits)[label] and its gradient ``softmax - onehot``."""
    logits = np.asarray(logits, dtype=np.float64)
    K = logits.shape[-1]
    if not 0 <= label < K:
        raise ValueError(f"label {label} out of range for {K} classes")
    shifted = logits - np.max(logits)
    log_norm = np.log(np.sum(np.exp(shifted)))
    loss = float(log_norm - shifted[label])
    grad = np.exp(shifted - log_norm)
    grad[label] -= 1.0
    return loss, grad


def batch_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    B, K = logits.shape
    if np.any(labels < 0) or np.any(labels >= K):
        raise ValueError("label out of range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_norm - shifted[np.arange(B), labels]))
    grad = np.exp(shifted - log_norm[:, None])
    grad[np.arange(B), labels] -= 1.0
    return loss, grad / B


def supcon_loss(embeddings: np.ndarray, labels: Sequence[int], temperature: float) -> Tuple[float, np.ndarray]:
    """Supervised contrastive loss summed over anchors, with its gradient.

    For every anchor ``i`` the positives are the other samples sharing its
    label and the denominator runs over every sample except ``i``.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    n = z.shape[0]
    if y.shape != (n,):
        raise ValueError("one label per embedding required")
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    not_self = ~np.eye(n, dtype=bool)
    pos = (y[:, None] == y[None, :]) & not_self
    n_pos = pos.sum(axis=1)
    if np.any(n_pos == 0):
        raise TrainConfigError(f"sample {int(np.argmin(n_pos))} has no positive in the batch")
    sim = z @ z.T / temperature
    masked = np.where(not_self, sim, -np.inf)
    lse = _logsumexp(masked, axis=1)
    mean_pos = np.where(pos, sim, 0.0).sum(axis=1) / n_pos
    loss = float(np.sum(lse - mean_pos))
    softmax = np.where(not_self, np.exp(masked - lse[:, None]), 0.0)
    G = softmax - pos / n_pos[:, None]
    grad = (G + G.T) @ z / temperature
    return loss, grad


# --- optimisation -----------------------------------------------------------


class SGD:
    """SGD with heavy-ball momentum: ``v = mu*v + g; w -= lr*v``."""

    def __init__(self, model: Model, lr: float, momentum: float = 0.0, clip: Optional[float] = None):
        self.model = model
        self.lr = lr
        self.momentum = momentum
        self.clip = clip
        self.velocity = {name: np.zeros_like(p) for name, p in model.parameters()}

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        scale = 1.0
        if self.clip is not None:
            total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if total > self.clip:
                scale = self.clip / total
        for name, p in self.model.parameters():
            v = self.velocity[name]
            v *= self.momentum
            v += scale * grads[name]
            p -= self.lr * v


def _check_finite(loss: float, epoch: int) -> None:
    if not np.isfinite(loss):
        raise NumericError(f"training diverged at epoch {epoch}")


class _EarlyStop:
    def __init__(self, patience: Optional[int], min_delta: float):
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.stale = 0

    def update(self, loss: float) -> bool:
        if self.patience is None:
            return False
        if loss < self.best - self.min_delta:
            self.best = loss
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def train_closed_world(
    points: np.ndarray,
    labels: np.ndarray,
    model: Model,
    config: TrainConfig,
    on_epoch: Optional[Callable[[EpochMetrics], None]] = None,
) -> TrainResult:
    """Minimise mean cross-entropy of encoder + classifier with SGD and momentum.

    ``points`` is ``(N, n, 3)``; ``model`` is updated in place and returned.
    """
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(points) == 0:
        raise ValueError("empty training set")
    if not model.classifier:
        raise ValueError("model has no classifier head")
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise ValueError("labels must be dense known-source indices")
    rng = make_rng(config.seed)
    opt = SGD(model, config.learning_rate, config.momentum, config.grad_clip)
    stopper = _EarlyStop(config.early_stop_patience, config.early_stop_min_delta)
    result = TrainResult(model)
    N = len(points)
    epoch = 0
    try:
        for epoch in range(config.epochs):
            order = rng.permutation(N)
            total_loss = 0.0
            correct = 0
            for start in range(0, N, config.batch_size):
                idx = order[start : start + config.batch_size]
                trace = encode_batch(model, points[idx], heads=("classifier",))
                loss, dlogits = batch_cross_entropy(trace.logits, labels[idx])
                _check_finite(loss, epoch)
                grads = backward(model, trace, grad_logits=dlogits)
                opt.step(grads)
                total_loss += loss * len(idx)
                correct += int(np.sum(np.argmax(trace.logits, axis=1) == labels[idx]))
            m = EpochMetrics(epoch, total_loss / N, correct / N)
            result.metrics.append(m)
            log.debug("closed epoch %d loss %.5f acc %.4f", epoch, m.loss, m.accuracy)
            if on_epoch:
                on_epoch(m)
            if stopper.update(m.loss):
                result.stopped_early = True
                break
    except NumericError as exc:
        if "epoch" in str(exc):
            raise
        raise NumericError(f"{exc} at epoch {epoch}") from exc
    model.stage = "closed"
    return result


def stratified_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Shuffle each class and deal samples round-robin so every batch holds every class.

    Batches are cut to ``batch_size`` rounded down to a multiple of the class
    count; leftovers from larger classes are dropped for this epoch.
    """
    classes = np.unique(labels)
    per_class = max(1, batch_size // len(classes))
    pools = [rng.permutation(np.flatnonzero(labels == c)) for c in classes]
    n_batches = min(len(p) for p in pools) // per_class
    batches = []
    for b in range(n_batches):
        parts = [p[b * per_class : (b + 1) * per_class] for p in pools]
        batches.append(rng.permutation(np.concatenate(parts)))
    return batches


def _retrieval_accuracy(z: np.ndarray, labels: np.ndarray) -> float:
    sim = z @ z.T
    np.fill_diagonal(sim, -np.inf)
    return float(np.mean(labels[np.argmax(sim, axis=1)] == labels))


def prepare_open_model(model: Model, config: TrainConfig) -> Model:
    if model.projection and model.embed_dim == config.embed_dim and not model.classifier:
        return model
    return attach_projection(model, config.embed_dim, seed=config.seed + 1, hidden=config.projection_hidden)


def train_open_world(
    points: np.ndarray,
    labels: np.ndarray,
    model: Model,
    config: TrainConfig,
    augment_policy: AugmentPolicy,
    on_epoch: Optional[Callable[[EpochMetrics], None]] = None,
) -> TrainResult:
    """Supervised contrastive training of encoder + projection head.

    Each step pairs every original cloud with one augmented twin. Original
    embeddings come from a snapshot of the weights at the start of the step
    and are treated as constants, so only the augmented-view branch receives
    gradients. The optimised objective is the summed contrastive loss divided
    by the 2B anchors in the step. ``accuracy`` in the metrics is the
    fraction of embeddings whose nearest other embedding shares their label.

    A model without a matching projection head (fresh or close-world
    checkpoint) gets one attached; the classifier is dropped.
    """
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(points) == 0:
        raise ValueError("empty training set")
    if config.batch_size < 2:
        raise TrainConfigError("contrastive training needs batch_size >= 2")
    model = prepare_open_model(model, config)
    rng = make_rng(config.seed)
    opt = SGD(model, config.learning_rate, config.momentum, config.grad_clip)
    stopper = _EarlyStop(config.early_stop_patience, config.early_stop_min_delta)
    result = TrainResult(model)
    epoch = 0
    try:
        for epoch in range(config.epochs):
            batches = stratified_batches(labels, config.batch_size, rng)
            if not batches:
                raise TrainConfigError("not enough samples per class to form a batch")
            losses, accs = [], []
            for idx in batches:
                twins = np.stack([augment_points(points[i], augment_policy.draw(rng)) for i in idx])
                # frozen pair: weights at step start, no gradient path
                snapshot = model.copy()
                orig_z = encode_batch(snapshot, points[idx], heads=("projection",)).embedding
                trace = encode_batch(model, twins, heads=("projection",))
                z = np.concatenate([orig_z, trace.embedding])
                y = np.concatenate([labels[idx], labels[idx]])
                loss, dz = supcon_loss(z, y, config.temperature)
                _check_finite(loss, epoch)
                scale = 1.0 / len(z)
                grads = backward(model, trace, grad_embedding=dz[len(idx):] * scale)
                opt.step(grads)
                losses.append(loss * scale)
                accs.append(_retrieval_accuracy(z, y))
            m = EpochMetrics(epoch, float(np.mean(losses)), float(np.mean(accs)))
            result.metrics.append(m)
            log.debug("open epoch %d loss %.5f acc %.4f", epoch, m.loss, m.accuracy)
            if on_epoch:
                on_epoch(m)
            if stopper.update(m.loss):
                result.stopped_early = True
                break
    except NumericError as exc:
        if "epoch" in str(exc):
            raise
        raise NumericError(f"{exc} at epoch {epoch}") from exc
    model.stage = "open"
    return result
