import numpy as np
import pytest

from tracklift.association import (
    EncoderWeights,
    FeatureVector,
    GNNConfig,
    KIND_APPEARANCE,
    KIND_THREE_D,
    ShapeMismatch,
    SimilarityConfig,
    ZeroVector,
    appearance_similarity,
    brute_force_assignment,
    encode_3d,
    fuse,
    gnn_aggregate,
    similarity_matrix,
    sinkhorn_soft_assignment,
    solve_assignment,
)

D = 8


def fv(values, kind=KIND_APPEARANCE):
    return FeatureVector(np.asarray(values, dtype=float), kind)


def unit(i, dim=D):
    v = np.zeros(dim)
    v[i] = 1.0
    return v


def test_encode_identity_padding():
    w = EncoderWeights.identity(D)
    out = encode_3d(np.array([1.0, 2.0, 3.0]), w)
    assert np.allclose(out.values, [1, 2, 3, 0, 0, 0, 0, 0])
    assert out.kind == KIND_THREE_D


def test_encode_bias_only():
    b = np.arange(D, dtype=float)
    w = EncoderWeights(np.zeros((D, 3)), b)
    for o in (np.zeros(3), np.array([5.0, -2.0, 9.0])):
        assert np.allclose(encode_3d(o, w).values, b)


def test_encode_linearity():
    rng = np.random.default_rng(0)
    w = EncoderWeights(rng.normal(size=(D, 3)), rng.normal(size=D))
    for _ in range(20):
        o1, o2 = rng.normal(size=3), rng.normal(size=3)
        lhs = encode_3d(o1 + o2, w).values
        rhs = encode_3d(o1, w).values + encode_3d(o2, w).values - w.bias
        assert np.allclose(lhs, rhs, atol=1e-12)


def test_encode_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        encode_3d(np.zeros(4), EncoderWeights.identity(D))


def test_fuse_unit_output():
    f = fuse(fv(unit(0)), fv(unit(1), KIND_THREE_D))
    assert abs(np.linalg.norm(f.values) - 1.0) < 1e-9
    assert f.kind == "fused"


def test_fuse_scale_invariant_same_direction():
    f = fuse(fv(5.0 * unit(0)), fv(0.1 * unit(0), KIND_THREE_D))
    expect = np.zeros(2 * D)
    expect[0] = expect[D] = 1 / np.sqrt(2)
    assert np.allclose(f.values, expect)


def test_fuse_rescaling_invariance():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=D), rng.normal(size=D)
    base = fuse(fv(a), fv(b, KIND_THREE_D)).values
    scaled = fuse(fv(3.7 * a), fv(0.02 * b, KIND_THREE_D)).values
    assert np.allclose(base, scaled, atol=1e-12)


def test_fuse_cosine_block_identity():
    rng = np.random.default_rng(2)
    three_d = fv(rng.normal(size=D), KIND_THREE_D)
    a1, a2 = rng.normal(size=D), rng.normal(size=D)
    f1 = fuse(fv(a1), three_d).values
    f2 = fuse(fv(a2), three_d).values
    cos_app = a1 @ a2 / (np.linalg.norm(a1) * np.linalg.norm(a2))
    assert abs(f1 @ f2 - (1 + cos_app) / 2) < 1e-12


def test_fuse_zero_vector():
    with pytest.raises(ZeroVector):
        fuse(fv(np.zeros(D)), fv(unit(0), KIND_THREE_D))


def test_fuse_dim_mismatch():
    with pytest.raises(ShapeMismatch):
        fuse(fv(unit(0)), fv(np.ones(D + 1), KIND_THREE_D))


def fused(app_vec, td_vec):
    return fuse(fv(app_vec), fv(td_vec, KIND_THREE_D))


def test_gnn_zero_layers_identity():
    f = fused(unit(0), unit(1))
    out = gnn_aggregate([f], [fused(unit(2), unit(3))], GNNConfig(num_layers=0))
    assert np.array_equal(out[0].values, f.values)


def test_gnn_identical_previous_doubles():
    f = fused(unit(0), unit(1))
    out = gnn_aggregate([f], [f], GNNConfig(num_layers=1))
    assert np.allclose(out[0].values, 2 * f.values, atol=1e-12)


def test_gnn_orthogonal_previous_is_noop():
    f = fused(unit(0), unit(1))
    prev = fused(unit(2), unit(3))  # orthogonal halves -> cosine 0
    out = gnn_aggregate([f], [prev], GNNConfig(num_layers=1))
    assert np.allclose(out[0].values, f.values, atol=1e-12)


def test_gnn_empty_previous_frame():
    f = fused(unit(0), unit(1))
    out = gnn_aggregate([f], [], GNNConfig(num_layers=2))
    assert np.allclose(out[0].values, f.values)


def test_gnn_message_norm_equals_receiver_norm():
    rng = np.random.default_rng(3)
    f = fused(rng.normal(size=D), rng.normal(size=D))
    prev = [fused(rng.normal(size=D), rng.normal(size=D)) for _ in range(4)]
    out = gnn_aggregate([f], prev, GNNConfig(num_layers=1))[0]
    moved = out.values - f.values  # = |f| m/|m|
    assert abs(np.linalg.norm(moved) - np.linalg.norm(f.values)) < 1e-12
    assert np.linalg.norm(out.values) <= 2 * np.linalg.norm(f.values) + 1e-12


def test_gnn_affine_mlp_layer():
    rng = np.random.default_rng(4)
    W = rng.normal(size=(2 * D, 2 * D))
    b = rng.normal(size=2 * D)
    f = fused(unit(0), unit(1))
    out = gnn_aggregate([f], [], GNNConfig(num_layers=1, mlps=((W, b),)))
    assert np.allclose(out[0].values, W @ f.values + b)


GEO = SimilarityConfig(three_d_mode="geometric-kernel", kernel_tau=5.0)


def test_similarity_alpha_zero_is_appearance():
    rng = np.random.default_rng(5)
    dets = [fused(rng.normal(size=D), rng.normal(size=D)) for _ in range(3)]
    trks = [fused(rng.normal(size=D), rng.normal(size=D)) for _ in range(2)]
    pos = [np.zeros(3)] * 3
    tpos = [np.ones(3)] * 2
    cfg0 = SimilarityConfig(alpha=0.0)
    S = similarity_matrix(dets, pos, trks, tpos, cfg0)
    assert np.allclose(S, appearance_similarity(dets, trks))


def test_similarity_alpha_one_is_3d():
    dets = [fused(unit(0), unit(1))]
    trks = [fused(unit(0), unit(1))]
    cfg1 = SimilarityConfig(alpha=1.0, three_d_mode="geometric-kernel", kernel_tau=5.0)
    S = similarity_matrix(dets, [np.zeros(3)], trks, [np.array([5.0, 0, 0])], cfg1)
    assert abs(S[0, 0] - np.exp(-1.0)) < 1e-12


def test_similarity_blend_arithmetic():
    # identical appearance (cos 1), kernel 0.5 at distance tau*ln2
    dets = [fused(unit(0), unit(1))]
    trks = [fused(unit(0), unit(1))]
    d = 5.0 * np.log(2.0)
    cfg = SimilarityConfig(alpha=0.4, three_d_mode="geometric-kernel", kernel_tau=5.0)
    S = similarity_matrix(dets, [np.zeros(3)], trks, [np.array([d, 0, 0])], cfg)
    assert abs(S[0, 0] - 0.8) < 1e-12


def test_similarity_affine_in_alpha():
    rng = np.random.default_rng(6)
    dets = [fused(rng.normal(size=D), rng.normal(size=D)) for _ in range(3)]
    trks = [fused(rng.normal(size=D), rng.normal(size=D)) for _ in range(3)]
    pos = [rng.normal(size=3) for _ in range(3)]
    tpos = [rng.normal(size=3) for _ in range(3)]

    def S(alpha):
        return similarity_matrix(
            dets, pos, trks, tpos,
            SimilarityConfig(alpha=alpha, three_d_mode="geometric-kernel"),
        )

    s0, s1 = S(0.0), S(1.0)
    for alpha in (0.25, 0.4, 0.7):
        assert np.allclose(S(alpha), s0 + alpha * (s1 - s0), atol=1e-12)


def test_assignment_diagonal_dominant():
    S = np.full((3, 3), 0.1)
    np.fill_diagonal(S, 0.9)
    result = solve_assignment(S)
    assert result.matches == ((0, 0), (1, 1), (2, 2))


def test_assignment_gate_unmatches():
    result = solve_assignment(np.array([[0.3]]), gate=0.6)
    assert result.matches == ()
    assert result.unmatched_rows == (0,) and result.unmatched_cols == (0,)


def test_assignment_matches_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(200):
        n = int(rng.integers(1, 6))
        m = int(rng.integers(1, 6))
        S = rng.normal(size=(n, m))
        result = solve_assignment(S)
        total = sum(S[i, j] for i, j in result.matches)
        assert abs(total - brute_force_assignment(S)) < 1e-9


def test_assignment_invariant_under_constant_shift():
    rng = np.random.default_rng(8)
    S = rng.normal(size=(4, 4))
    assert solve_assignment(S).matches == solve_assignment(S + 3.7).matches


def test_assignment_permutation_covariant():
    rng = np.random.default_rng(9)
    S = rng.normal(size=(5, 5))
    base = dict(solve_assignment(S).matches)
    prow = rng.permutation(5)
    pcol = rng.permutation(5)
    S2 = S[prow][:, pcol]
    permuted = dict(solve_assignment(S2).matches)
    inv_col = np.argsort(pcol)
    for i2, j2 in permuted.items():
        assert base[prow[i2]] == pcol[j2]
    assert len(permuted) == 5 and inv_col is not None


def test_assignment_empty():
    result = solve_assignment(np.zeros((0, 3)))
    assert result.matches == () and result.unmatched_cols == (0, 1, 2)


def test_assignment_uniform_ties_lexicographic():
    result = solve_assignment(np.full((3, 3), 0.5))
    assert result.matches == ((0, 0), (1, 1), (2, 2))


def test_sinkhorn_marginals():
    rng = np.random.default_rng(10)
    S = rng.uniform(-1, 1, size=(4, 6))
    P = sinkhorn_soft_assignment(S, temperature=0.5, iterations=50)
    assert P.shape == (5, 7)
    assert np.allclose(P[:4].sum(axis=1), 1.0, atol=1e-6)
    assert np.allclose(P[:, :6].sum(axis=0), 1.0, atol=1e-6)


def test_sinkhorn_concentrates_on_optimum():
    rng = np.random.default_rng(11)
    for _ in range(20):
        n = int(rng.integers(2, 5))
        S = rng.uniform(0, 0.2, size=(n, n))
        perm = rng.permutation(n)
        S[np.arange(n), perm] = 1.0  # unique dominant assignment
        P = sinkhorn_soft_assignment(S, temperature=0.01, iterations=100)
        matches = solve_assignment(S).matches
        mass = sum(P[i, j] for i, j in matches)
        assert mass / n >= 0.99


def test_sinkhorn_uniform_symmetric():
    P = sinkhorn_soft_assignment(np.zeros((3, 3)), temperature=1.0, iterations=80)
    block = P[:3, :3]
    assert np.allclose(block, block[0, 0], atol=1e-9)


def test_sinkhorn_zero_iterations_is_row_normalized():
    S = np.array([[1.0, 0.0], [0.5, 0.25]])
    P = sinkhorn_soft_assignment(S, temperature=1.0, iterations=0)
    aug = np.full((3, 3), 0.0)
    aug[:2, :2] = S
    aug -= aug.max()
    K = np.exp(aug / 1.0)
    K[2, 2] = 0.0
    K[:2] /= K[:2].sum(axis=1, keepdims=True)
    assert np.allclose(P, K, atol=1e-12)


def test_sinkhorn_validation():
    with pytest.raises(ValueError):
        sinkhorn_soft_assignment(np.zeros((2, 2)), temperature=0.0, iterations=5)


def test_similarity_config_validation():
    with pytest.raises(ValueError):
        SimilarityConfig(alpha=1.5)
    with pytest.raises(ValueError):
        SimilarityConfig(kernel_tau=0.0)
    with pytest.raises(ValueError):
        SimilarityConfig(three_d_mode="nope")
