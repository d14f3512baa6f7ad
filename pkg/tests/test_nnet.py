import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fakepcd.nnet import (
    CheckpointError,
    Dense,
    Model,
    ModelError,
    attach_projection,
    backward,
    encode,
    encode_batch,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from fakepcd.pointcloud import make_rng
from fakepcd.train import TrainConfig, batch_cross_entropy, prepare_open_model, supcon_loss


def toy_model(seed=0, classes=3, embed=4):
    """3-layer encoder with both heads; random biases keep every ReLU path alive."""
    model = init_model((3, 6, 5, 4), num_classes=classes, embed_dim=embed, seed=seed, classifier_hidden=(5,), projection_hidden=(5,))
    rng = make_rng(seed + 100)
    for _, stack in model.stacks():
        for layer in stack:
            layer.b[:] = rng.normal(0.0, 0.3, size=layer.b.shape)
    return model


def fd_check(model, loss_fn, grads, step=1e-5):
    worst = 0.0
    for name, p in model.parameters():
        num = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + step
            up = loss_fn()
            p[i] = old - step
            down = loss_fn()
            p[i] = old
            num[i] = (up - down) / (2 * step)
        denom = max(np.max(np.abs(num)), np.max(np.abs(grads[name])), 1e-8)
        worst = max(worst, float(np.max(np.abs(num - grads[name])) / denom))
    return worst


def test_init_deterministic_and_bounded():
    a, b = toy_model(5), toy_model(5)
    for (na, pa), (nb, pb) in zip(a.parameters(), b.parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa, pb)
    for _, stack in a.stacks():
        for layer in stack:
            bound = np.sqrt(6.0 / (layer.in_dim + layer.out_dim))
            assert np.all(np.abs(layer.W) <= bound)
    fresh = init_model((3, 6, 5, 4), num_classes=3, embed_dim=4, seed=5)
    assert all(np.all(layer.b == 0) for _, stack in fresh.stacks() for layer in stack)


def test_init_rejects_bad_widths():
    with pytest.raises(ModelError):
        init_model((2, 4), seed=0)
    with pytest.raises(ModelError):
        init_model((3,), seed=0)


def test_cross_entropy_path_gradients_match_fd():
    model = toy_model(1)
    pts = make_rng(2).normal(size=(2, 8, 3))
    labels = np.array([0, 2])

    def loss():
        return batch_cross_entropy(encode_batch(model, pts, ("classifier",)).logits, labels)[0]

    trace = encode_batch(model, pts, ("classifier",))
    _, dl = batch_cross_entropy(trace.logits, labels)
    grads = backward(model, trace, grad_logits=dl)
    assert fd_check(model, loss, grads) < 1e-4


def test_projection_path_gradients_match_fd():
    model = toy_model(3)
    pts = make_rng(4).normal(size=(4, 8, 3))
    labels = np.array([0, 1, 0, 1])

    def loss():
        return supcon_loss(encode_batch(model, pts, ("projection",)).embedding, labels, 0.5)[0]

    trace = encode_batch(model, pts, ("projection",))
    _, dz = supcon_loss(trace.embedding, labels, 0.5)
    grads = backward(model, trace, grad_embedding=dz)
    assert fd_check(model, loss, grads) < 1e-4


def test_zero_upstream_gives_zero_gradients():
    model = toy_model(0)
    trace = encode_batch(model, make_rng(0).normal(size=(2, 8, 3)))
    grads = backward(model, trace, grad_logits=np.zeros_like(trace.logits))
    assert all(np.all(g == 0) for g in grads.values())


def test_non_argmax_points_get_no_gradient():
    model = toy_model(0)
    pts = make_rng(1).normal(size=(1, 10, 3))
    trace = encode_batch(model, pts, ("classifier",))
    winners = np.unique(trace.argmax[0])
    assert len(winners) < 10, "toy needs at least one non-critical point"
    _, dl = batch_cross_entropy(trace.logits, np.array([1]))
    full = backward(model, trace, grad_logits=dl)
    sub_trace = encode_batch(model, pts[:, winners], ("classifier",))
    np.testing.assert_array_equal(sub_trace.logits, trace.logits)
    sub = backward(model, sub_trace, grad_logits=dl)
    for name in full:
        np.testing.assert_allclose(full[name], sub[name], rtol=0, atol=1e-14)


def test_single_point_global_feature():
    model = toy_model(2)
    p = make_rng(3).normal(size=(1, 3))
    tr = encode(model, p, heads=())
    np.testing.assert_array_equal(tr.global_feature[0], tr.feature_map[0, 0])


def test_pooling_matches_explicit_channel_max():
    model = toy_model(4)
    pts = make_rng(5).normal(size=(64, 3))
    tr = encode(model, pts, heads=())
    fmap = tr.feature_map[0]
    explicit = np.array([max(fmap[:, c]) for c in range(fmap.shape[1])])
    np.testing.assert_array_equal(tr.global_feature[0], explicit)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 40))
def test_permutation_invariance_exact(seed, n):
    rng = make_rng(seed)
    model = init_model((3, 8, 8), num_classes=3, embed_dim=4, seed=seed % 1000, classifier_hidden=(6,), projection_hidden=(6,))
    pts = rng.normal(size=(n, 3))
    perm = rng.permutation(n)
    a, b = encode(model, pts, ("classifier",)), encode(model, pts[perm], ("classifier",))
    np.testing.assert_array_equal(a.global_feature, b.global_feature)
    np.testing.assert_array_equal(a.logits, b.logits)


def test_embedding_unit_norm():
    model = toy_model(6)
    z = encode_batch(model, make_rng(7).normal(size=(5, 8, 3)), ("projection",)).embedding
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-12)


def test_checkpoint_round_trip_bitwise(tmp_path):
    model = toy_model(8)
    model.stage = "closed"
    p = tmp_path / "m.fpcd"
    save_checkpoint(model, p)
    back = load_checkpoint(p)
    assert back.stage == "closed"
    for (na, pa), (nb, pb) in zip(model.parameters(), back.parameters()):
        assert na == nb
        assert pa.tobytes() == pb.tobytes()
    for (_, sa), (_, sb) in zip(model.stacks(), back.stacks()):
        assert [l.relu for l in sa] == [l.relu for l in sb]


def test_checkpoint_truncated_and_corrupt(tmp_path):
    p = tmp_path / "m.fpcd"
    save_checkpoint(toy_model(0), p)
    data = p.read_bytes()
    (tmp_path / "short.fpcd").write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.fpcd")
    flipped = bytearray(data)
    flipped[40] ^= 0xFF
    (tmp_path / "flip.fpcd").write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError, match="CRC"):
        load_checkpoint(tmp_path / "flip.fpcd")
    (tmp_path / "magic.fpcd").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "magic.fpcd")


def test_closed_checkpoint_feeds_open_stage(tmp_path):
    closed = init_model((3, 8, 16), num_classes=4, seed=0, classifier_hidden=(8,))
    closed.stage = "closed"
    p = tmp_path / "closed.fpcd"
    save_checkpoint(closed, p)
    opened = prepare_open_model(load_checkpoint(p), TrainConfig(embed_dim=6, projection_hidden=(10,)))
    assert opened.classifier == []
    assert opened.widths("projection") == (16, 10, 6)
    for a, b in zip(closed.encoder, opened.encoder):
        np.testing.assert_array_equal(a.W, b.W)
    assert np.all(opened.projection[0].b == 0)


def test_attach_projection_leaves_source_untouched():
    m = toy_model(0)
    before = [p.copy() for _, p in m.parameters()]
    out = attach_projection(m, 7, seed=1)
    assert out.embed_dim == 7 and m.embed_dim == 4
    for b, (_, p) in zip(before, m.parameters()):
        np.testing.assert_array_equal(b, p)
