import itertools

import numpy as np
import pytest

from fakepcd.pointcloud import PointCloud
from fakepcd.simsource import (
    SHAPES,
    SIGNATURES,
    ScenarioConfig,
    SimSourceSpec,
    SimulationError,
    build_scenario,
    default_sources,
    sample_cloud,
    separability,
)


def test_grid_quantization_multiples():
    spec = SimSourceSpec("g", "grid-quantization", (("step", 0.05),))
    pts = sample_cloud(spec, "chair", 200, seed=3).points
    k = pts / 0.05
    assert np.max(np.abs(k - np.round(k)) * 0.05) <= 1e-12


@pytest.mark.parametrize("spec", default_sources(), ids=lambda s: s.name)
@pytest.mark.parametrize("shape", SHAPES)
def test_every_source_is_deterministic_and_valid(spec, shape):
    a = sample_cloud(spec, shape, 64, seed=9)
    b = sample_cloud(spec, shape, 64, seed=9)
    assert isinstance(a, PointCloud) and a.points.shape == (64, 3)
    assert np.all(np.isfinite(a.points))
    assert a.points.tobytes() == b.points.tobytes()
    assert a.meta["source"] == spec.name and a.shape_tag == shape


def test_signatures_cover_defaults():
    assert {s.signature for s in default_sources()} <= set(SIGNATURES)


def test_argument_errors():
    with pytest.raises(SimulationError):
        sample_cloud(default_sources()[0], "sofa", 64, seed=0)
    with pytest.raises(SimulationError):
        sample_cloud(default_sources()[0], "car", 4, seed=0)
    with pytest.raises(SimulationError):
        SimSourceSpec("x", "wobble")
    with pytest.raises(SimulationError):
        SimSourceSpec("x", "grid-quantization", (("step", 9.0),))


def test_default_sources_are_pairwise_separable():
    # mean cross-source Chamfer distance exceeds 10x the within-source resample spread
    for a, b in itertools.combinations(default_sources(), 2):
        assert separability(a, b) > 10, (a.name, b.name)


def test_split_arithmetic_and_roles():
    cfg = ScenarioConfig(known=("real", "lattice"), unknown=("blurry",), clouds_per_cell=100, validation_size=0)
    sc = build_scenario(cfg)
    for name in ("real", "lattice"):
        assert sc.train.sources.count(name) == 60
        assert sc.test.sources.count(name) == 40
    assert "blurry" not in sc.train.sources
    assert sc.test.sources.count("blurry") == 40
    assert len(sc.train) == 120 and len(sc.test) == 120
    assert set(sc.test.labels[np.array(sc.test.sources) == "blurry"]) == {-1}


def test_validation_carve_out_is_disjoint_and_exhaustive():
    cfg = ScenarioConfig(known=("real", "lattice", "fuzzy"), unknown=("skewed",), clouds_per_cell=50, validation_size=40)
    sc = build_scenario(cfg)
    assert len(sc.validation) == 40
    seen = {}
    for part in (sc.train, sc.validation, sc.test):
        for src, seed in zip(part.sources, part.seeds):
            key = (src, seed)
            assert key not in seen
            seen[key] = True
    # unknown cells contribute only their held-out 40%
    assert len(seen) == 3 * 50 + 20
    assert "skewed" in sc.validation.sources


def test_unseen_shape_only_in_test():
    cfg = ScenarioConfig(
        known=("real", "lattice"), unknown=(), seen_shapes=("airplane", "car"), unseen_shapes=("bench",),
        clouds_per_cell=20, points=32, validation_size=4,
    )
    sc = build_scenario(cfg)
    assert "bench" not in sc.train.shapes and "bench" not in sc.validation.shapes
    assert sc.test.shapes.count("bench") == 2 * 8


def test_scenario_deterministic():
    cfg = ScenarioConfig(clouds_per_cell=20, points=16, validation_size=10)
    a, b = build_scenario(cfg), build_scenario(cfg)
    assert a.test.points.tobytes() == b.test.points.tobytes()
    assert a.train.seeds == b.train.seeds


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(known=("real",), unknown=("real",)),
        dict(known=("nope",)),
        dict(clouds_per_cell=2),
        dict(train_ratio=1.0),
        dict(points=4),
        dict(known=()),
    ],
)
def test_bad_configs(kwargs):
    with pytest.raises(SimulationError):
        build_scenario(ScenarioConfig(**kwargs))
