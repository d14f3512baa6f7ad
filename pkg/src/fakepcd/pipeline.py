"""End-to-end stages shared by the command line and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np

from .attribution import (
    UNKNOWN_ID,
    AnchorSet,
    Evaluation,
    GMMResult,
    LogitThreshold,
    assign_ids,
    best_permutation_accuracy,
    build_anchor_set,
    evaluate,
    mean_source_distance,
    select_threshold,
    split_unknowns,
    tune_percentile,
)
from .config import Settings
from .nnet import Model, embed, init_model, predict_logits
from .pointcloud import AugmentSpec, augment_points, make_rng
from .simsource import Dataset, Scenario, build_scenario
from .store import read_dataset_dir
from .train import EpochMetrics, TrainResult, prepare_open_model, train_closed_world, train_open_world


def scenario_from(settings: Settings) -> Scenario:
    return build_scenario(settings.scenario_config())


def scenario_from_dir(root, settings: Settings) -> Scenario:
    """Scenario read back from a dataset directory written by ``simulate``."""
    stored = read_dataset_dir(Path(root))
    config = replace(settings.scenario_config(), known=tuple(stored.known))
    return Scenario(config, stored.split("train"), stored.split("validation"), stored.split("test"))


def fresh_model(settings: Settings, num_classes: Optional[int]) -> Model:
    m = settings.model
    return init_model(
        tuple(m.encoder_widths),
        num_classes=num_classes,
        seed=settings.seed,
        classifier_hidden=tuple(m.classifier_hidden),
    )


def closed_stage(
    data: Dataset,
    settings: Settings,
    model: Optional[Model] = None,
    on_epoch: Optional[Callable[[EpochMetrics], None]] = None,
) -> TrainResult:
    known = data.labels[data.labels != UNKNOWN_ID]
    model = model if model is not None else fresh_model(settings, int(known.max()) + 1)
    mask = data.labels != UNKNOWN_ID
    return train_closed_world(data.points[mask], data.labels[mask], model, settings.train_config("closed"), on_epoch)


def open_model(settings: Settings, init: Optional[Model] = None) -> Model:
    """Encoder plus a fresh projection head, starting from ``init`` when given."""
    return prepare_open_model(init if init is not None else fresh_model(settings, None), settings.train_config("open"))


def open_stage(
    data: Dataset,
    settings: Settings,
    model: Optional[Model] = None,
    on_epoch: Optional[Callable[[EpochMetrics], None]] = None,
) -> TrainResult:
    """Contrastive stage; ``model=None`` trains from scratch."""
    mask = data.labels != UNKNOWN_ID
    model = open_model(settings, model)
    return train_open_world(
        data.points[mask], data.labels[mask], model, settings.train_config("open"), settings.augment_policy(), on_epoch
    )


def closed_accuracy(model: Model, data: Dataset) -> Evaluation:
    mask = data.labels != UNKNOWN_ID
    pred = np.argmax(predict_logits(model, data.points[mask]), axis=1)
    return evaluate(pred, data.labels[mask])


def fit_anchors(model: Model, data: Dataset, settings: Settings, names: Optional[List[str]] = None) -> AnchorSet:
    mask = data.labels != UNKNOWN_ID
    return build_anchor_set(
        embed(model, data.points[mask]),
        data.labels[mask],
        settings.attribution.anchors_per_source,
        seed=settings.seed,
        names=names,
    )


@dataclass
class OpenWorldReport:
    percentile: float
    threshold: float
    evaluation: Evaluation
    distances: np.ndarray
    predictions: np.ndarray
    curve: list


def open_world_eval(
    model: Model,
    scenario: Scenario,
    settings: Settings,
    anchors: Optional[AnchorSet] = None,
    percentile: Optional[float] = None,
    test: Optional[Dataset] = None,
) -> OpenWorldReport:
    """Anchor the trained model, pick P (fixed or tuned on validation), score the test split."""
    anchors = anchors if anchors is not None else fit_anchors(model, scenario.train, settings, scenario.known_names)
    curve = []
    if percentile is None:
        percentile = settings.attribution.percentile
    if percentile is None:
        percentile, curve = tune_percentile(
            anchors, embed(model, scenario.validation.points), scenario.validation.labels, settings.attribution.percentile_grid
        )
    test = test if test is not None else scenario.test
    policy = select_threshold(anchors, percentile)
    d = mean_source_distance(embed(model, test.points), anchors)
    pred = assign_ids(d, policy.threshold)
    return OpenWorldReport(percentile, policy.threshold, evaluate(pred, test.labels), d, pred, curve)


def baseline_eval(closed_model: Model, scenario: Scenario) -> Tuple[LogitThreshold, Evaluation]:
    """Fully supervised baseline: reject when the top softmax probability is below the
    smallest true-class probability seen on the training set."""
    train = scenario.train
    mask = train.labels != UNKNOWN_ID
    rule = LogitThreshold.fit(predict_logits(closed_model, train.points[mask]), train.labels[mask])
    pred = rule.predict(predict_logits(closed_model, scenario.test.points))
    return rule, evaluate(pred, scenario.test.labels)


def unknown_split(model: Model, scenario: Scenario, settings: Settings) -> Tuple[float, GMMResult]:
    """Two-component mixture over the held-out sources' test embeddings."""
    test = scenario.test
    mask = test.labels == UNKNOWN_ID
    names = sorted({s for s, m in zip(test.sources, mask) if m})
    truth = np.array([names.index(s) for s, m in zip(test.sources, mask) if m])
    gmm = split_unknowns(
        embed(model, test.points[mask]), components=max(2, len(names)), seed=settings.seed,
        covariance=settings.attribution.gmm_covariance,
    )
    return best_permutation_accuracy(gmm.labels, truth), gmm


# --- perturbations ------------------------------------------------------------

PERTURBATIONS = ("none", "translate", "jitter", "rotate", "combined", "translate-far")


def perturb_points(points: np.ndarray, kind: str, settings: Settings, seed: int) -> np.ndarray:
    """Perturb a ``(B, n, 3)`` batch cloud by cloud.

    Magnitudes follow the augmentation policy the model was trained with;
    ``translate-far`` shifts each cloud by ``far_translation_factor`` times its
    radius in a random direction.
    """
    if kind not in PERTURBATIONS:
        raise ValueError(f"unknown perturbation {kind!r}; choose from {', '.join(PERTURBATIONS)}")
    a = settings.augment
    rng = make_rng(seed)
    out = np.empty_like(points)
    for i, pts in enumerate(points):
        offset = (0.0, 0.0, 0.0)
        jitter, axes, angle = 0.0, (False, False, False), (0.0, 0.0)
        if kind in ("translate", "combined"):
            offset = tuple(rng.uniform(-a.max_translation, a.max_translation, size=3))
        if kind in ("jitter", "combined"):
            jitter = a.jitter_sigma
        if kind in ("rotate", "combined"):
            axes, angle = tuple(ax in a.rotate_axes for ax in "xyz"), (0.0, a.max_angle)
        if kind == "translate-far":
            radius = float(np.max(np.linalg.norm(pts - pts.mean(axis=0), axis=1)))
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            offset = tuple(settings.ablation.far_translation_factor * radius * direction)
        spec = AugmentSpec(offset, jitter, axes, angle, int(rng.integers(0, 2**63 - 1)))
        out[i] = augment_points(pts, spec)
    return out


def perturbation_table(model: Model, scenario: Scenario, settings: Settings, kinds=PERTURBATIONS) -> List[tuple]:
    """Rows of (kind, known accuracy, unknown accuracy, delta known, delta unknown).

    P is tuned once on the clean validation split and kept fixed.
    """
    anchors = fit_anchors(model, scenario.train, settings, scenario.known_names)
    clean = open_world_eval(model, scenario, settings, anchors=anchors)
    rows = []
    for kind in kinds:
        if kind == "none":
            ev = clean.evaluation
        else:
            pts = perturb_points(scenario.test.points, kind, settings, settings.seed + 7)
            moved = Dataset(pts, scenario.test.labels, scenario.test.sources, scenario.test.shapes, scenario.test.seeds)
            ev = open_world_eval(model, scenario, settings, anchors=anchors, percentile=clean.percentile, test=moved).evaluation
        rows.append((
            kind,
            ev.known_accuracy,
            ev.unknown_accuracy,
            ev.known_accuracy - clean.evaluation.known_accuracy,
            ev.unknown_accuracy - clean.evaluation.unknown_accuracy,
        ))
    return rows


def threshold_curve(model: Model, scenario: Scenario, settings: Settings, grid=None) -> List[tuple]:
    """Rows of (P, threshold, known accuracy, unknown accuracy, macro F1) on the test split."""
    anchors = fit_anchors(model, scenario.train, settings, scenario.known_names)
    d = mean_source_distance(embed(model, scenario.test.points), anchors)
    rows = []
    for p in grid if grid is not None else settings.ablation.sweep_grid:
        t = select_threshold(anchors, p).threshold
        ev = evaluate(assign_ids(d, t), scenario.test.labels)
        rows.append((float(p), t, ev.known_accuracy, ev.unknown_accuracy, ev.macro_f1))
    return rows
