import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from matssl import tensor as T
from matssl.encoder import EncoderConfig, StageFeatureSet, init_params
from matssl.ssl import (ContrastiveConfig, anchor_losses, EmbeddingBatch, HeadConfig, gate_tensors, gated_fuse, head_shapes,
                        init_head, ntxent_loss, project, ssl_forward)
from matssl.tensor import ShapeError, Tensor

ENC = EncoderConfig(stage_count=3, base_channels=4, blocks_per_stage=1)


def brute_ntxent(z, tau=0.07):
    """Direct evaluation, one anchor at a time, with rows k and k+N paired."""
    z = np.asarray(z, np.float64)
    rows = len(z)

    def sim(a, b):
        return float(a @ b) / (math.sqrt(float(a @ a)) * math.sqrt(float(b @ b)))

    total = 0.0
    for i in range(rows):
        j = (i + rows // 2) % rows
        denom = sum(math.exp(sim(z[i], z[k]) / tau) for k in range(rows) if k != i)
        total += -math.log(math.exp(sim(z[i], z[j]) / tau) / denom)
    return total / rows


def test_identical_embeddings_give_log3():
    z = np.tile(np.array([[0.3, -1.2, 2.0]]), (4, 1))
    assert ntxent_loss(Tensor(z)).item() == pytest.approx(math.log(3), abs=1e-6)


def test_orthogonal_negatives_anchor_loss():
    e = np.eye(3)
    z = np.stack([e[0], e[1], e[0], e[2]])
    anchor = math.log(1 + 2 * math.exp(-1 / 0.07))
    assert anchor == pytest.approx(1.25e-6, rel=0.05)
    assert abs(anchor_losses(Tensor(z))[0] - anchor) < 1e-7
    # rows 1 and 3 are orthogonal positives, so only anchors 0 and 2 are near zero
    other = math.log(math.exp(0) + 2 * math.exp(0)) - 0.0
    expected = (2 * anchor + 2 * other) / 4
    assert ntxent_loss(Tensor(z)).item() == pytest.approx(expected, abs=1e-6)
    assert brute_ntxent(z) == pytest.approx(expected, abs=1e-9)


@given(st.sampled_from([2, 4, 8]), st.sampled_from([2, 16]), st.integers(0, 2**31), st.sampled_from([0.07, 0.5]))
def test_matches_brute_force(n, dim, seed, tau):
    # 64-bit storage: a float32 scalar of size ~10 cannot hold 1e-6 absolute accuracy
    with T.storage_dtype(np.float64):
        z = Tensor(np.random.default_rng(seed).normal(size=(2 * n, dim)))
        got = ntxent_loss(z, ContrastiveConfig(temperature=tau)).item()
    assert abs(got - brute_ntxent(z.data, tau)) < 1e-6


def test_all_anchor_loss_of_same_embeddings_is_log_2n_minus_1():
    for n in (2, 3, 5):
        assert ntxent_loss(Tensor(np.ones((2 * n, 4)))).item() == pytest.approx(math.log(2 * n - 1), abs=1e-6)


@given(st.integers(0, 2**31))
def test_orthogonal_invariance(seed):
    rng = np.random.default_rng(seed)
    with T.storage_dtype(np.float64):
        z = rng.normal(size=(8, 6))
        q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        assert ntxent_loss(Tensor(z @ q)).item() == pytest.approx(ntxent_loss(Tensor(z)).item(), abs=1e-5)


def test_loss_decreases_as_positive_similarity_rises():
    e = np.eye(8)
    fixed = [e[1], (e[1] + e[2]) / math.sqrt(2)]
    losses = []
    for theta in np.linspace(1.5, 0.0, 12):
        z2 = math.cos(theta) * e[0] + math.sin(theta) * e[7]
        z = np.stack([e[0], fixed[0], z2, fixed[1]])
        losses.append(ntxent_loss(Tensor(z)).item())
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_too_few_rows_and_bad_pairing():
    with pytest.raises(ShapeError):
        ntxent_loss(Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        EmbeddingBatch(Tensor(np.ones((5, 3))))
    with pytest.raises(ValueError):
        EmbeddingBatch(Tensor(np.ones((4, 3))), np.array([0, 3, 2, 1]))
    with pytest.raises(ValueError):
        EmbeddingBatch(Tensor(np.ones((4, 3))), np.array([1, 2, 3, 0]))
    with pytest.raises(ValueError):
        ContrastiveConfig(temperature=0.0)


def test_custom_pairing_matches_reordered_rows():
    z = np.random.default_rng(1).normal(size=(6, 5))
    pairing = np.array([1, 0, 3, 2, 5, 4])
    reordered = z[[0, 2, 4, 1, 3, 5]]
    a = ntxent_loss(EmbeddingBatch(Tensor(z), pairing)).item()
    assert a == pytest.approx(ntxent_loss(Tensor(reordered)).item(), abs=1e-6)


def test_ntxent_gradient(f64):
    rng = np.random.default_rng(4)
    z = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
    assert T.gradient_check(lambda: ntxent_loss(z), [z], h=1e-5) < 1e-6


# --- fusion -------------------------------------------------------------------------

def feats(values, widths, n=2):
    return StageFeatureSet([], [Tensor(np.full((n, c), v)) for v, c in zip(values, widths)])


def test_fuse_zero_features():
    out = gated_fuse(feats([0.0], [5]), [Tensor(np.array([0.7]))])
    np.testing.assert_allclose(out.data, 0.35, atol=1e-7)


def test_fuse_zero_gates_annihilate():
    rng = np.random.default_rng(0)
    fs = StageFeatureSet([], [Tensor(rng.normal(size=(3, c))) for c in (4, 8)])
    out = gated_fuse(fs, [Tensor(np.zeros(1)), Tensor(np.zeros(1))])
    assert out.shape == (3, 12) and not out.data.any()


def test_fuse_saturated():
    out = gated_fuse(feats([20.0, 20.0], [2, 3]), [Tensor(np.array([0.4])), Tensor(np.array([-1.3]))])
    np.testing.assert_allclose(out.data[:, :2], 0.4, atol=1e-6)
    np.testing.assert_allclose(out.data[:, 2:], -1.3, atol=1e-6)


def test_fuse_vector_gates_and_count_mismatch():
    g = Tensor(np.array([1.0, 2.0, 0.0]))
    out = gated_fuse(feats([0.0], [3]), [g])
    np.testing.assert_allclose(out.data[0], [0.5, 1.0, 0.0])
    with pytest.raises(ValueError):
        gated_fuse(feats([0.0, 0.0], [3, 3]), [g])


@given(st.lists(st.integers(1, 9), min_size=1, max_size=4), st.integers(1, 4))
def test_fuse_width_is_channel_sum(widths, n):
    out = gated_fuse(feats([0.1] * len(widths), widths, n), [Tensor(np.ones(1)) for _ in widths])
    assert out.shape == (n, sum(widths))


def test_fuse_gradient_reaches_features_and_gates(f64):
    rng = np.random.default_rng(2)
    fs = [Tensor(rng.normal(size=(3, c)), requires_grad=True) for c in (2, 4)]
    gates = [Tensor(rng.normal(size=1), requires_grad=True), Tensor(rng.normal(size=4), requires_grad=True)]
    w = rng.normal(size=(3, 6))
    assert T.gradient_check(lambda: T.sum(gated_fuse(fs, gates), w), fs + gates, h=1e-5) < 1e-6


# --- projection ------------------------------------------------------------------------

def test_project_shapes_and_zero_weights():
    enc = EncoderConfig(stage_count=2, base_channels=4)
    head = init_head(enc, HeadConfig(hidden=256, embed_dim=128))
    head["head.fc1.weight"] = Tensor(np.zeros((12, 256)))
    fused = Tensor(np.random.default_rng(0).normal(size=(8, 12)))
    out = project(fused, head)
    assert out.shape == (8, 128)
    head["head.fc2.weight"] = Tensor(np.zeros((256, 128)))
    assert not project(fused, head).data.any()


def test_project_identity_layers_is_relu():
    x = Tensor(np.random.default_rng(1).normal(size=(4, 6)))
    head = {"head.fc1.weight": Tensor(np.eye(6)), "head.fc1.bias": Tensor(np.zeros(6)),
            "head.fc2.weight": Tensor(np.eye(6)), "head.fc2.bias": Tensor(np.zeros(6))}
    np.testing.assert_allclose(project(x, head).data, np.maximum(x.data, 0), atol=1e-7)


def test_project_width_mismatch():
    head = init_head(ENC, HeadConfig(hidden=8, embed_dim=4))
    with pytest.raises(ShapeError):
        project(Tensor(np.ones((2, 5))), head)


def test_head_init_and_shapes():
    head = init_head(ENC, HeadConfig(gate_init=1.0))
    assert [g.data.tolist() for g in gate_tensors(head)] == [[1.0], [1.0], [1.0]]
    assert head["head.fc1.weight"].shape == (4 + 8 + 16, 256)
    vec = head_shapes(ENC, HeadConfig(gate_variant="vector"))
    assert [vec[f"head.gate{i}"] for i in range(3)] == [(4,), (8,), (16,)]
    assert "head.norm.gamma" in init_head(ENC, HeadConfig(hidden_norm="batch"))
    with pytest.raises(ValueError):
        HeadConfig(gate_variant="matrix")


# --- end to end --------------------------------------------------------------------

def views(n, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=(n, 3, 16, 16)))


def test_identical_views_give_log3():
    enc = init_params(ENC, 0)
    head = init_head(ENC, HeadConfig(hidden=16, embed_dim=8))
    v = Tensor(np.repeat(views(1).data, 2, axis=0))
    assert ssl_forward(v, v, enc, head, ENC).item() == pytest.approx(math.log(3), abs=1e-5)


def test_pair_order_does_not_matter():
    enc = init_params(ENC, 0)
    head = init_head(ENC, HeadConfig(hidden=16, embed_dim=8))
    a, b = views(3, 1), views(3, 2)
    perm = [2, 0, 1]
    base = ssl_forward(a, b, enc, head, ENC).item()
    swapped = ssl_forward(Tensor(a.data[perm]), Tensor(b.data[perm]), enc, head, ENC).item()
    assert swapped == pytest.approx(base, abs=1e-6)


@pytest.mark.parametrize("head_cfg", [HeadConfig(hidden=8, embed_dim=4),
                                      HeadConfig(hidden=8, embed_dim=4, gate_variant="vector", gate_init=0.5),
                                      HeadConfig(hidden=8, embed_dim=4, hidden_norm="batch")])
def test_ssl_forward_gradient_on_head(f64, head_cfg):
    enc = init_params(ENC, 0)
    head = init_head(ENC, head_cfg, seed=1)
    a, b = views(2, 3), views(2, 4)
    worst = T.gradient_check(lambda: ssl_forward(a, b, enc, head, ENC), list(head.values()), h=1e-5)
    assert worst < 1e-3


def test_backward_reaches_encoder_gates_and_projection():
    enc = init_params(ENC, 0)
    head = init_head(ENC, HeadConfig(hidden=16, embed_dim=8))
    ssl_forward(views(2, 5), views(2, 6), enc, head, ENC).backward()
    for p in list(enc.values()) + list(head.values()):
        assert p.grad is not None and np.any(p.grad != 0), p.name


def test_gate_gradient_is_local():
    enc = init_params(ENC, 0)
    head = init_head(ENC, HeadConfig(hidden=16, embed_dim=8))
    w = head["head.fc1.weight"].data.copy()
    w[4:12] = 0.0  # columns fed by stage 1
    head["head.fc1.weight"] = Tensor(w, requires_grad=True)
    ssl_forward(views(2, 7), views(2, 8), enc, head, ENC).backward()
    gates = gate_tensors(head)
    assert np.all(gates[1].grad == 0)
    assert np.any(gates[0].grad != 0) and np.any(gates[2].grad != 0)


def test_shape_mismatch_between_views():
    enc = init_params(ENC, 0)
    head = init_head(ENC, HeadConfig(hidden=8, embed_dim=4))
    with pytest.raises(ShapeError):
        ssl_forward(views(2), views(3), enc, head, ENC)
