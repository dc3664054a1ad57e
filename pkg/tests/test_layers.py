import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from conftest import DT, ball
from oracles import brute_knn, brute_knn_euclidean, dense_attention
from hypermesh import manifold as mf
from hypermesh.layers import (
    Affine,
    Architecture,
    Euclidean,
    HeadParams,
    ImageFeatures,
    MobiusLinearParams,
    PoseHeadParams,
    affine,
    branch_forward,
    dhgc_layer,
    dhgc_stack,
    flatten,
    ihgc_forward,
    init_affine,
    init_branch,
    init_mobius,
    init_model,
    mobius_linear,
    refinement_head,
    scaled_log_attention,
    unflatten,
    unify_image_features,
)


def t(*xs):
    return torch.tensor(xs, dtype=DT)


def small_arch(**kw):
    base = dict(dhgc_dims=(3, 8, 8), out_dim=6, shallow_dim=5, deep_dim=7, global_dim=4, head_hidden=10)
    base.update(kw)
    return Architecture(**base)


def raw_features(rng, arch, n_shallow=12, n_deep=9, scale=0.5):
    return ImageFeatures(
        torch.as_tensor(rng.normal(size=(n_shallow, arch.shallow_dim)) * scale, dtype=DT),
        torch.as_tensor(rng.normal(size=(n_deep, arch.deep_dim)) * scale, dtype=DT),
        torch.as_tensor(rng.normal(size=(n_deep, arch.deep_dim)) * scale, dtype=DT),
    )


# -- Möbius linear -------------------------------------------------------------

def test_mobius_linear_worked_value():
    out = mobius_linear(MobiusLinearParams(t(2.0).reshape(1, 1), t(0.1)), t(0.3))
    # 1-D closed forms: 2 (x) x = tanh(2 artanh x), and a (+) b = (a + b) / (1 + a b)
    m = math.tanh(2 * math.atanh(0.3))
    assert abs(float(out) - (m + 0.1) / (1 + m * 0.1)) < 1e-12
    # the quoted 7-digit value 0.6504587 / 1.0550459, rounded in its last digit
    assert abs(float(out) - 0.6165216) < 1e-6
    # the intermediate matrix image
    assert abs(float(mf.mobius_matvec(t(2.0).reshape(1, 1), t(0.3))) - 0.5504587) < 1e-7


def test_mobius_linear_identity_and_zero_matrix(rng):
    x = ball(rng, 10, 4, 0.9)
    eye = MobiusLinearParams(torch.eye(4, dtype=DT), torch.zeros(4, dtype=DT))
    assert float((mobius_linear(eye, x) - x).abs().max()) < 1e-12
    b = t(0.2, -0.1, 0.0)
    out = mobius_linear(MobiusLinearParams(torch.zeros(3, 4, dtype=DT), b), x)
    assert torch.allclose(out, b.expand(10, 3), rtol=0, atol=1e-15)


def test_mobius_linear_shape_error():
    with pytest.raises(ValueError, match="dimension"):
        mobius_linear(MobiusLinearParams(torch.eye(3, dtype=DT), torch.zeros(3, dtype=DT)), torch.zeros(4, 2, dtype=DT))


# -- DHGC ----------------------------------------------------------------------

def dhgc_oracle(x_in, W, b, k):
    """exp_0, Möbius layer, k-NN on the projected inputs, midpoint, activation; row by row."""
    x = mf.expmap0(x_in)
    h = mf.mobius_add(mf.mobius_matvec(W, x), b)
    idx, _ = brute_knn(x, x, k, exclude_self=True)
    out = torch.stack([mf.hyperbolic_activation(mf.einstein_midpoint(h[list(row)])) for row in idx])
    return mf.logmap0(out), out


def test_dhgc_layer_matches_compositional_oracle():
    rng = np.random.default_rng(21)
    x = torch.as_tensor(rng.normal(size=(16, 3)) * 0.5, dtype=DT)
    W = torch.as_tensor(rng.normal(size=(4, 3)), dtype=DT)
    b = mf.expmap0(torch.as_tensor(rng.normal(size=4) * 0.2, dtype=DT))
    euc, hyp = dhgc_layer(x, MobiusLinearParams(W, b), 4)
    ref_euc, ref_hyp = dhgc_oracle(x, W, b, 4)
    assert hyp.shape == (16, 4) and euc.shape == (16, 4)
    assert float((hyp - ref_hyp).abs().max()) < 1e-12
    assert float((euc - ref_euc).abs().max()) < 1e-12


def test_dhgc_identical_rows_and_zero_weights():
    rng = np.random.default_rng(22)
    p = init_mobius(rng, 3, 5)
    same = torch.tensor([[0.3, -0.2, 0.1]] * 5, dtype=DT)
    euc, _ = dhgc_layer(same, p, 4)
    assert float((euc - euc[0]).abs().max()) < 1e-15
    x = torch.as_tensor(rng.normal(size=(9, 3)), dtype=DT)
    euc, hyp = dhgc_layer(x, MobiusLinearParams(torch.zeros(5, 3, dtype=DT), torch.zeros(5, dtype=DT)), 3)
    assert float(euc.abs().max()) == 0.0 and float(hyp.abs().max()) == 0.0


def test_dhgc_stack_shape_on_the_toy_hand():
    from hypermesh.synthetic import hand_template

    rng = np.random.default_rng(23)
    arch = Architecture()
    params = init_branch(rng, arch, with_pose=False).dhgc
    out = dhgc_stack(torch.as_tensor(hand_template().vertices * 10, dtype=DT), params, 8)
    assert out.shape == (162, 64)
    assert bool(((out * out).sum(-1) < 1).all())


def test_dhgc_stack_permutation_equivariant_bitwise():
    rng = np.random.default_rng(24)
    params = init_branch(rng, small_arch(dhgc_dims=(3, 16, 16)), with_pose=False).dhgc
    x = torch.as_tensor(rng.normal(size=(40, 3)) * 0.4, dtype=DT)
    perm = torch.as_tensor(rng.permutation(40))
    out = dhgc_stack(x, params, 6)
    assert torch.equal(dhgc_stack(x[perm], params, 6), out[perm])


def test_dhgc_stack_not_translation_invariant():
    rng = np.random.default_rng(25)
    params = init_branch(rng, small_arch(), with_pose=False).dhgc
    x = torch.as_tensor(rng.normal(size=(20, 3)) * 0.4, dtype=DT)
    shifted = dhgc_stack(x + t(0.3, 0.0, 0.0), params, 4)
    assert float((shifted - dhgc_stack(x, params, 4)).abs().max()) > 1e-3


@given(st.integers(9, 70), st.integers(0, 10_000))
def test_dhgc_stack_permutation_property(n, seed):
    rng = np.random.default_rng(seed)
    params = init_branch(rng, small_arch(dhgc_dims=(3, 12, 12)), with_pose=False).dhgc
    x = torch.as_tensor(rng.normal(size=(n, 3)) * 0.4, dtype=DT)
    perm = torch.as_tensor(rng.permutation(n))
    assert torch.equal(dhgc_stack(x[perm], params, 8), dhgc_stack(x, params, 8)[perm])


@given(st.integers(0, 10_000))
def test_dhgc_layer_permutation_property(seed):
    rng = np.random.default_rng(seed)
    p = init_mobius(rng, 3, 4)
    x = torch.as_tensor(rng.normal(size=(12, 3)), dtype=DT)
    perm = torch.as_tensor(rng.permutation(12))
    assert torch.equal(dhgc_layer(x[perm], p, 3)[1], dhgc_layer(x, p, 3)[1][perm])


def test_euclidean_dhgc_matches_plain_graph_conv():
    rng = np.random.default_rng(26)
    x = torch.as_tensor(rng.normal(size=(14, 3)), dtype=DT)
    W = torch.as_tensor(rng.normal(size=(5, 3)), dtype=DT)
    b = torch.as_tensor(rng.normal(size=5), dtype=DT)
    euc, _ = dhgc_layer(x, MobiusLinearParams(W, b), 3, Euclidean())
    idx = brute_knn_euclidean(x, x, 3, exclude_self=True)
    h = (x @ W.T + b).numpy()
    ref = np.maximum(np.stack([h[row].mean(axis=0) for row in idx]), 0)
    np.testing.assert_allclose(euc.numpy(), ref, rtol=1e-13, atol=1e-14)


# -- image features and attention ----------------------------------------------

def test_unify_matches_affine_then_exp0(rng):
    arch = small_arch()
    p = init_branch(rng, arch, with_pose=False).ihgc
    raw = raw_features(rng, arch)
    out = unify_image_features(raw, p)
    for x, a, y in zip(raw, (p.shallow, p.deep_hand, p.deep_obj), out):
        ref = mf.expmap0(x @ a.W.T + a.b)
        assert torch.equal(y, ref) or float((y - ref).abs().max()) < 1e-15
        assert bool(((y * y).sum(-1) < 1).all())


def test_unify_reductions(rng):
    arch = small_arch(shallow_dim=8, deep_dim=8)
    p = init_branch(rng, arch, with_pose=False).ihgc
    eye = Affine(torch.eye(8, dtype=DT), torch.zeros(8, dtype=DT))
    p.shallow = p.deep_hand = p.deep_obj = eye
    raw = raw_features(rng, arch)
    for x, y in zip(raw, unify_image_features(raw, p)):
        assert torch.equal(y, mf.expmap0(x))
    zero = Affine(torch.zeros(8, 8, dtype=DT), torch.zeros(8, dtype=DT))
    p.shallow = p.deep_hand = p.deep_obj = zero
    assert all(float(y.abs().max()) == 0.0 for y in unify_image_features(raw, p))
    with pytest.raises(ValueError, match="width"):
        unify_image_features(ImageFeatures(raw.shallow[:, :3], raw.deep_hand, raw.deep_obj), p)


def test_attention_matches_dense_oracle():
    rng = np.random.default_rng(27)
    Q, K, V = (ball(rng, 4, 8, 0.8) for _ in range(3))
    out = scaled_log_attention(Q, K, V, 8)
    np.testing.assert_allclose(out.numpy(), dense_attention(Q, K, V, 8), rtol=1e-12, atol=1e-14)


def test_attention_softmax_rows_sum_to_one():
    rng = np.random.default_rng(28)
    Q, K = ball(rng, 6, 5, 0.8), ball(rng, 6, 5, 0.8)
    # with V rows equal to e_1 images, each output row's first log coordinate is the row sum
    V = mf.expmap0(torch.zeros(6, 5, dtype=DT).index_fill_(1, torch.tensor([0]), 1.0))
    out = scaled_log_attention(Q, K, V, 5)
    assert float((out[:, 0] - 1).abs().max()) < 1e-12


def test_attention_uniform_and_singleton():
    # orthogonal equal-norm log rows: Q = K gives scores c on the diagonal and 0 elsewhere,
    # so use Q whose rows are orthogonal to all of K's to get equal scores
    Q = mf.expmap0(torch.tensor([[0, 0, 0.5, 0], [0, 0, 0, 0.5]], dtype=DT))
    K = mf.expmap0(torch.tensor([[0.5, 0, 0, 0], [0, 0.5, 0, 0]], dtype=DT))
    V = mf.expmap0(torch.tensor([[1.0, 0, 0, 0], [0, 1.0, 0, 0]], dtype=DT))
    out = scaled_log_attention(Q, K, V, 4)
    assert float((out - 0.5 * mf.logmap0(V).sum(0)).abs().max()) < 1e-12
    v1 = mf.expmap0(t(0.2, -0.4, 0.1, 0.3)).reshape(1, 4)
    q1 = mf.expmap0(t(0.1, 0.1, 0.1, 0.1)).reshape(1, 4)
    assert torch.equal(scaled_log_attention(q1, q1, v1, 4), mf.logmap0(v1))
    with pytest.raises(ValueError):
        scaled_log_attention(q1[:0], q1[:0], q1[:0], 4)


# -- IHGC ----------------------------------------------------------------------

def ihgc_oracle(mesh, raw, p, k, swap=False):
    shallow, dh, do = (mf.expmap0(x @ a.W.T + a.b) for x, a in zip(raw, (p.shallow, p.deep_hand, p.deep_obj)))
    q_set, k_set = (do, dh) if swap else (dh, do)
    f1, _ = brute_knn(mesh, mesh, k, exclude_self=True)
    f2, _ = brute_knn(mesh, shallow, k)
    qi, _ = brute_knn(mesh, q_set, k)
    ki, _ = brute_knn(mesh, k_set, k)
    rows = []
    for i in range(mesh.shape[0]):
        cat = mf.expmap0(torch.cat([mf.logmap0(mesh[f1[i]]), mf.logmap0(shallow[f2[i]])], dim=-1))
        V = mf.mobius_add(mf.mobius_matvec(p.V.W, cat), p.V.b)
        att = dense_attention(q_set[qi[i]], k_set[ki[i]], V, p.dim)
        rows.append(att.mean(axis=0))
    return np.stack(rows) @ p.out.W.numpy().T + p.out.b.numpy()


def _ihgc_fixture(seed, n=8):
    rng = np.random.default_rng(seed)
    arch = small_arch()
    p = init_branch(rng, arch, with_pose=False).ihgc
    p.V.b = mf.expmap0(torch.as_tensor(rng.normal(size=p.dim) * 0.2, dtype=DT))
    mesh = ball(rng, n, arch.feat_dim, 0.8)
    return mesh, raw_features(rng, arch), p


@pytest.mark.parametrize("swap", [False, True])
def test_ihgc_matches_compositional_oracle(swap):
    mesh, raw, p = _ihgc_fixture(29)
    out = ihgc_forward(mesh, raw, p, 2, swap_roles=swap)
    assert out.shape == (8, 6) and bool(torch.isfinite(out).all())
    np.testing.assert_allclose(out.numpy(), ihgc_oracle(mesh, raw, p, 2, swap), rtol=1e-11, atol=1e-13)


def test_ihgc_larger_fixture_matches_oracle():
    mesh, raw, p = _ihgc_fixture(30, n=40)
    out = ihgc_forward(mesh, raw, p, 5)
    np.testing.assert_allclose(out.numpy(), ihgc_oracle(mesh, raw, p, 5), rtol=1e-11, atol=1e-13)


def test_ihgc_batched_equals_per_item():
    mesh, raw, p = _ihgc_fixture(31, n=12)
    mesh2, raw2, _ = _ihgc_fixture(32, n=12)
    stacked = ImageFeatures(*(torch.stack([a, b]) for a, b in zip(raw, raw2)))
    out = ihgc_forward(torch.stack([mesh, mesh2]), stacked, p, 3)
    assert float((out[0] - ihgc_forward(mesh, raw, p, 3)).abs().max()) < 1e-13
    assert float((out[1] - ihgc_forward(mesh2, raw2, p, 3)).abs().max()) < 1e-13


def test_ihgc_query_key_roles_are_asymmetric():
    mesh, raw, p = _ihgc_fixture(33)
    plain = ihgc_forward(mesh, raw, p, 2)
    swapped = ihgc_forward(mesh, raw, p, 2, swap_roles=True)
    assert float((plain - swapped).abs().max()) > 1e-6


def test_euclidean_ihgc_matches_oracle():
    rng = np.random.default_rng(34)
    arch = small_arch()
    p = init_branch(rng, arch, with_pose=False).ihgc
    mesh = torch.as_tensor(rng.normal(size=(10, arch.feat_dim)), dtype=DT)
    raw = raw_features(rng, arch)
    out = ihgc_forward(mesh, raw, p, 3, Euclidean())
    shallow, dh, do = (x @ a.W.T + a.b for x, a in zip(raw, (p.shallow, p.deep_hand, p.deep_obj)))
    f1 = brute_knn_euclidean(mesh, mesh, 3, exclude_self=True)
    f2, qi, ki = (brute_knn_euclidean(mesh, s, 3) for s in (shallow, dh, do))
    rows = []
    for i in range(10):
        V = (torch.cat([mesh[f1[i]], shallow[f2[i]]], dim=-1) @ p.V.W.T + p.V.b).numpy()
        s = dh[qi[i]].numpy() @ do[ki[i]].numpy().T / math.sqrt(p.dim)
        w = np.exp(s - s.max(axis=1, keepdims=True))
        rows.append(((w / w.sum(axis=1, keepdims=True)) @ V).mean(axis=0))
    ref = np.stack(rows) @ p.out.W.numpy().T + p.out.b.numpy()
    np.testing.assert_allclose(out.numpy(), ref, rtol=1e-11, atol=1e-13)


# -- refinement head -----------------------------------------------------------

def test_head_zero_offsets_keep_the_initial_mesh():
    rng = np.random.default_rng(35)
    arch = small_arch()
    branch = init_branch(rng, arch, with_pose=True)
    verts = torch.as_tensor(rng.normal(size=(20, 3)) * 0.05, dtype=DT)
    raw = raw_features(rng, arch)
    g = torch.as_tensor(rng.normal(size=arch.global_dim), dtype=DT)
    out = branch_forward(branch, verts, raw, g, 4, coord_scale=10.0)
    assert torch.equal(out.vertices, verts)
    assert out.T.shape == (3,) and out.S.shape == () and bool(torch.isfinite(out.T).all())


def test_head_matches_affine_oracle():
    rng = np.random.default_rng(36)
    arch = small_arch()
    head = init_branch(rng, arch, with_pose=True).head
    head.offset = init_affine(rng, arch.head_hidden, 3)
    f = torch.as_tensor(rng.normal(size=(7, arch.out_dim)), dtype=DT)
    g = torch.as_tensor(rng.normal(size=arch.global_dim), dtype=DT)
    v = torch.as_tensor(rng.normal(size=(7, 3)), dtype=DT)
    out = refinement_head(f, g, head, v)
    F, G, Vn = f.numpy(), g.numpy(), v.numpy()
    relu = lambda z: np.maximum(z, 0)  # noqa: E731
    aff = lambda a, z: z @ a.W.numpy().T + a.b.numpy()  # noqa: E731
    pooled = F.mean(axis=0)
    inp = np.concatenate([F, np.tile(pooled, (7, 1)), np.tile(G, (7, 1)), Vn], axis=1)
    np.testing.assert_allclose(out.offsets.numpy(), aff(head.offset, relu(aff(head.hidden, inp))), rtol=1e-13, atol=1e-15)
    hidden = relu(aff(head.pose.hidden, np.concatenate([pooled, G])))
    np.testing.assert_allclose(out.T.numpy(), aff(head.pose.T, hidden), rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(float(out.S), aff(head.pose.S, hidden)[0], rtol=1e-13)


def test_head_scale_with_zero_weights_is_the_bias():
    rng = np.random.default_rng(37)
    arch = small_arch()
    head = init_branch(rng, arch, with_pose=True).head
    head.pose.S = Affine(torch.zeros(1, arch.head_hidden, dtype=DT), t(0.04))
    out = refinement_head(torch.ones(5, arch.out_dim, dtype=DT), torch.ones(arch.global_dim, dtype=DT), head, torch.zeros(5, 3, dtype=DT))
    assert float(out.S) == 0.04


def test_head_shape_errors():
    rng = np.random.default_rng(38)
    arch = small_arch()
    head = init_branch(rng, arch, with_pose=False).head
    assert head.pose is None
    with pytest.raises(ValueError, match="vertex count"):
        refinement_head(torch.zeros(5, arch.out_dim, dtype=DT), torch.zeros(arch.global_dim, dtype=DT), head, torch.zeros(4, 3, dtype=DT))
    with pytest.raises(ValueError, match="inputs per vertex"):
        refinement_head(torch.zeros(5, 2, dtype=DT), torch.zeros(arch.global_dim, dtype=DT), head, torch.zeros(5, 3, dtype=DT))


# -- parameter trees -----------------------------------------------------------

def test_flatten_unflatten_round_trip():
    params = init_model(np.random.default_rng(39), small_arch())
    flat = flatten(params)
    assert "obj.head.pose.T.W" in flat and "hand.head.pose.T.W" not in flat
    rebuilt = unflatten(params, {k: v.clone() for k, v in flat.items()})
    assert all(torch.equal(a, b) for a, b in zip(flatten(rebuilt).values(), flat.values()))
    bad = dict(flat)
    bad["hand.ihgc.out.b"] = torch.zeros(99, dtype=DT)
    with pytest.raises(ValueError, match="shape"):
        unflatten(params, bad)
    del bad["hand.ihgc.out.b"]
    with pytest.raises(KeyError):
        unflatten(params, bad)


def test_initialisation_is_seeded():
    a = flatten(init_model(np.random.default_rng(40), small_arch()))
    b = flatten(init_model(np.random.default_rng(40), small_arch()))
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert isinstance(init_branch(np.random.default_rng(0), small_arch(), True).head, HeadParams)
    assert isinstance(init_branch(np.random.default_rng(0), small_arch(), True).head.pose, PoseHeadParams)
    assert float(affine(Affine(torch.eye(2, dtype=DT), t(1.0, 2.0)), t(0.5, 0.5))[1]) == 2.5
