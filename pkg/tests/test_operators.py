import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

import oracles
from unrolled_vba.errors import SingularPriorError
from unrolled_vba.operators import (
    BlurOperator,
    KernelModel,
    D_trace,
    D_weighted_diag,
    apply_all_Kp,
    apply_all_Kp_adjoint,
    apply_blur,
    apply_blur_adjoint,
    apply_D,
    apply_D_adjoint,
    apply_Kp,
    build_sar_prior,
    build_symmetric_constraint,
    circular_convolve,
    kernel_from_z,
    kernel_offsets,
    lag_kernel,
    lag_kernel_adjoint,
    sar_difference_matrix,
    z_from_kernel,
)

sides = st.sampled_from([1, 3, 5, 7, 9])


def _delta(side):
    k = np.zeros((side, side))
    k[side // 2, side // 2] = 1.0
    return k.ravel()


def _random_op(rng, side=3):
    model = build_symmetric_constraint(side)
    return model, BlurOperator(model, rng.standard_normal(model.P) * 0.1)


# ---------------------------------------------------------------------------
# kernel model


@pytest.mark.parametrize("side,P", [(1, 0), (3, 5), (5, 14), (9, 44)])
def test_constraint_dimension(side, P):
    model = build_symmetric_constraint(side)
    assert model.P == P == (side + 1) * side // 2 - 1
    assert model.T.shape == (side * side, P)


def test_side_one_kernel_is_fixed():
    model = build_symmetric_constraint(1)
    assert model.P == 0
    np.testing.assert_array_equal(model.t, [1.0])
    np.testing.assert_array_equal(kernel_from_z(model, np.zeros(0)), [1.0])


@pytest.mark.parametrize("side", [0, 2, 4, -3])
def test_bad_side_rejected(side):
    with pytest.raises(ValueError):
        build_symmetric_constraint(side)


def test_side_nine_constraints_on_random_z(rng):
    model = build_symmetric_constraint(9)
    for _ in range(100):
        h = kernel_from_z(model, rng.standard_normal(model.P)).reshape(9, 9)
        assert abs(h.sum() - 1.0) < 1e-12
        np.testing.assert_array_equal(h, h.T)


def test_T_full_column_rank():
    for side in (3, 5, 9):
        model = build_symmetric_constraint(side)
        assert np.linalg.matrix_rank(model.T) == model.P


def test_rank_deficient_T_rejected():
    T = np.ones((9, 2))
    with pytest.raises(ValueError):
        KernelModel(3, T, np.zeros(9))


def test_kernel_from_z_zero_is_offset():
    model = build_symmetric_constraint(5)
    np.testing.assert_array_equal(kernel_from_z(model, np.zeros(model.P)), model.t)


def test_kernel_from_z_dimension_mismatch():
    model = build_symmetric_constraint(5)
    with pytest.raises(ValueError):
        kernel_from_z(model, np.zeros(model.P + 1))
    with pytest.raises(ValueError):
        z_from_kernel(model, np.zeros(model.M - 1))


def test_round_trip_z(rng):
    model = build_symmetric_constraint(5)
    z = rng.standard_normal(model.P)
    h = kernel_from_z(model, z)
    assert abs(h.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(z_from_kernel(model, h), z, atol=1e-10)


def test_z_from_offset_is_zero():
    model = build_symmetric_constraint(5)
    np.testing.assert_allclose(z_from_kernel(model, model.t), 0.0, atol=1e-15)


def test_uniform_kernel_projects_exactly():
    model = build_symmetric_constraint(5)
    h = np.full(25, 1.0 / 25)
    np.testing.assert_allclose(kernel_from_z(model, z_from_kernel(model, h)), h, atol=1e-12)


def test_asymmetric_projection_matches_pseudo_inverse(rng):
    model = build_symmetric_constraint(5)
    h = rng.uniform(0, 1, 25)
    h /= h.sum()
    proj = kernel_from_z(model, z_from_kernel(model, h))
    z_ls = np.linalg.pinv(model.T) @ (h - model.t)
    ref = model.T @ z_ls + model.t
    assert abs(np.linalg.norm(h - proj) - np.linalg.norm(h - ref)) < 1e-10
    np.testing.assert_allclose(proj, ref, atol=1e-10)


def test_offsets_row_major():
    off = kernel_offsets(3)
    assert off.tolist() == [[-1, -1], [-1, 0], [-1, 1], [0, -1], [0, 0], [0, 1],
                            [1, -1], [1, 0], [1, 1]]


# ---------------------------------------------------------------------------
# blur operator


def test_delta_kernel_is_identity(rng):
    model = build_symmetric_constraint(3)
    op = BlurOperator(model, z_from_kernel(model, _delta(3)))
    x = rng.standard_normal((8, 8))
    np.testing.assert_allclose(apply_blur(op, x), x, atol=1e-15)
    np.testing.assert_allclose(apply_blur_adjoint(op, x), x, atol=1e-15)


def test_blur_matches_dense_matrix(rng):
    model, op = _random_op(rng)
    x = rng.standard_normal((8, 8))
    H = oracles.conv_matrix(op.kernel, x.shape)
    assert oracles.rel_err(apply_blur(op, x).ravel(), H @ x.ravel()) < 1e-12
    r = rng.standard_normal((8, 8))
    assert oracles.rel_err(apply_blur_adjoint(op, r).ravel(), H.T @ r.ravel()) < 1e-12


def test_blur_matches_scipy_wrap_convolution(rng):
    x = rng.standard_normal((16, 12))
    k = rng.uniform(0, 1, (5, 5))
    ref = ndimage.convolve(x, k, mode="wrap")
    np.testing.assert_allclose(circular_convolve(x, k, method="direct"), ref, atol=1e-12)
    np.testing.assert_allclose(circular_convolve(x, k, method="fft"), ref, atol=1e-12)


def test_constant_image_preserved(rng):
    _, op = _random_op(rng, 5)
    x = np.full((8, 8), 0.37)
    np.testing.assert_allclose(apply_blur(op, x), x, atol=1e-14)


def test_blur_rejects_small_image(rng):
    _, op = _random_op(rng, 5)
    with pytest.raises(ValueError):
        apply_blur(op, np.zeros((4, 8)))


def test_adjoint_identity(rng):
    for _ in range(10):
        _, op = _random_op(rng)
        x, r = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
        lhs = np.vdot(apply_blur(op, x), r)
        rhs = np.vdot(x, apply_blur_adjoint(op, r))
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


def test_adjoint_is_flipped_kernel_convolution(rng):
    model, op = _random_op(rng)
    r = rng.standard_normal((8, 8))
    flipped = op.kernel.reshape(3, 3)[::-1, ::-1]
    H_flip = oracles.conv_matrix(flipped, r.shape)
    assert oracles.rel_err(apply_blur_adjoint(op, r).ravel(), H_flip @ r.ravel()) < 1e-12


def test_Kp_matches_dense(rng):
    model = build_symmetric_constraint(3)
    x = rng.standard_normal((6, 6))
    K = oracles.Kp_matrices(model, x.shape)
    for p in range(model.P + 1):
        assert oracles.rel_err(apply_Kp(model, p, x).ravel(), K[p] @ x.ravel()) < 1e-12
    stack = apply_all_Kp(model, x)
    for p in range(model.P + 1):
        np.testing.assert_allclose(stack[p], apply_Kp(model, p, x), atol=1e-14)


def test_Kp_index_range():
    model = build_symmetric_constraint(3)
    with pytest.raises(IndexError):
        apply_Kp(model, model.P + 1, np.zeros((6, 6)))


def test_single_entry_column_is_shift(rng):
    # A model whose only column is one tap gives K_1 = S_m exactly.
    T = np.zeros((9, 1))
    T[2, 0] = 1.0
    model = KernelModel(3, T, np.zeros(9))
    x = rng.standard_normal((6, 6))
    np.testing.assert_array_equal(apply_Kp(model, 1, x), np.roll(x, (-1, 1), axis=(0, 1)))


def test_Kp_decomposition(rng):
    model, op = _random_op(rng, 5)
    x = rng.standard_normal((10, 10))
    total = apply_Kp(model, 0, x) + sum(op.z[p - 1] * apply_Kp(model, p, x)
                                        for p in range(1, model.P + 1))
    np.testing.assert_allclose(total, apply_blur(op, x), atol=1e-12)


def test_Kp_stack_adjoint(rng):
    model = build_symmetric_constraint(3)
    x = rng.standard_normal((6, 6))
    g = rng.standard_normal((model.P + 1, 6, 6))
    lhs = np.vdot(apply_all_Kp(model, x), g)
    rhs = np.vdot(x, apply_all_Kp_adjoint(model, g))
    assert abs(lhs - rhs) < 1e-11


@pytest.mark.parametrize("shape", [(6, 6), (5, 7)])
def test_shift_trace_identity(rng, shape):
    model = build_symmetric_constraint(3)
    K = oracles.Kp_matrices(model, shape)
    G = np.column_stack([model.t, model.T])
    G = G.T @ G
    for _ in range(20):
        delta = rng.uniform(0, 1, shape).ravel()
        p, q = rng.integers(0, model.P + 1, 2)
        tr = np.trace(K[p] @ np.diag(delta) @ K[q].T)
        assert abs(tr - G[p, q] * delta.sum()) < 1e-10


def test_lag_kernel_collapses_shift_products(rng):
    side = 3
    W = rng.standard_normal((9, 9))
    shape = (7, 7)
    S = oracles.shift_matrices(side, shape)
    dense = sum(W[m, n] * S[m].T @ S[n] for m in range(9) for n in range(9))
    g = lag_kernel(W, side)
    v = rng.standard_normal(shape)
    np.testing.assert_allclose(circular_convolve(v, g).ravel(), dense @ v.ravel(), atol=1e-12)
    gbar = rng.standard_normal(g.shape)
    assert abs(np.vdot(lag_kernel(W, side), gbar)
               - np.vdot(W, lag_kernel_adjoint(gbar, side))) < 1e-12


# ---------------------------------------------------------------------------
# differences


def test_D_constant_is_zero():
    np.testing.assert_array_equal(apply_D(np.full((5, 6), 2.5)), 0.0)


def test_D_horizontal_ramp_has_no_vertical_difference():
    W = 8
    x = np.tile(np.arange(W) / W, (6, 1))
    np.testing.assert_array_equal(apply_D(x)[1], 0.0)


def test_D_matches_dense(rng):
    x = rng.standard_normal((6, 5))
    Dh, Dv = oracles.diff_matrices(x.shape)
    d = apply_D(x)
    np.testing.assert_allclose(d[0].ravel(), Dh @ x.ravel(), atol=1e-13)
    np.testing.assert_allclose(d[1].ravel(), Dv @ x.ravel(), atol=1e-13)
    total = np.sum(d ** 2)
    assert abs(total - (np.sum((Dh @ x.ravel()) ** 2) + np.sum((Dv @ x.ravel()) ** 2))) < 1e-12
    g = rng.standard_normal((2, 6, 5))
    ref = Dh.T @ g[0].ravel() + Dv.T @ g[1].ravel()
    np.testing.assert_allclose(apply_D_adjoint(g).ravel(), ref, atol=1e-13)


def test_D_diagonal_helpers(rng):
    shape = (6, 5)
    Dh, Dv = oracles.diff_matrices(shape)
    w = rng.uniform(0.1, 2.0, shape)
    dense = Dh.T @ np.diag(w.ravel()) @ Dh + Dv.T @ np.diag(w.ravel()) @ Dv
    np.testing.assert_allclose(D_weighted_diag(w).ravel(), np.diag(dense), atol=1e-13)
    delta = rng.uniform(0.1, 2.0, shape)
    ref = [np.trace(np.outer(Dh[j], Dh[j]) @ np.diag(delta.ravel()))
           + np.trace(np.outer(Dv[j], Dv[j]) @ np.diag(delta.ravel())) for j in range(30)]
    np.testing.assert_allclose(D_trace(delta).ravel(), ref, atol=1e-13)


def test_D_rejects_empty():
    with pytest.raises(ValueError):
        apply_D(np.zeros((0, 3)))


# ---------------------------------------------------------------------------
# SAR prior


def test_sar_matrix_layout():
    A = sar_difference_matrix(3)
    assert A.shape == (19, 9)
    np.testing.assert_array_equal(A[0], np.full(9, 1.0 / 9))
    # replicate boundary: the last column/row of each difference block is empty
    assert np.all(A[1 + 2] == 0) and np.all(A[1 + 9 + 6] == 0)
    np.testing.assert_array_equal(A.sum(axis=1)[1:], 0.0)
    assert np.linalg.matrix_rank(A) == 9


def test_sar_L_orthonormal_T_reduces(rng):
    # With a square orthonormal T, L equals T^T A^T A T.
    Q, _ = np.linalg.qr(rng.standard_normal((9, 9)))
    model = KernelModel(3, Q, np.zeros(9))
    A = sar_difference_matrix(3)
    prior = build_sar_prior(model, A=A)
    assert oracles.rel_err(prior.L, Q.T @ A.T @ A @ Q) < 1e-10


def test_sar_L_matches_dense_formula():
    model = build_symmetric_constraint(5)
    prior = build_sar_prior(model)
    assert oracles.rel_err(prior.L, oracles.sar_L(model, prior.A)) < 1e-10


def test_sar_mu_exact_representability(rng):
    model = build_symmetric_constraint(5)
    z0 = rng.standard_normal(model.P)
    prior = build_sar_prior(model, m=model.T @ z0 + model.t)
    np.testing.assert_allclose(prior.mu, z0, atol=1e-10)


def test_sar_L_positive_definite():
    model = build_symmetric_constraint(5)
    L = build_sar_prior(model).L
    np.testing.assert_allclose(L, L.T, atol=0)
    assert np.linalg.eigvalsh(L).min() > 0


def test_sar_rank_deficient_rejected():
    model = build_symmetric_constraint(3)
    with pytest.raises(SingularPriorError):
        build_sar_prior(model, A=np.ones((19, 9)))


# ---------------------------------------------------------------------------
# properties


@settings(deadline=None, max_examples=40)
@given(side=sides, seed=st.integers(0, 2 ** 32 - 1), scale=st.floats(1e-3, 1e3))
def test_property_constraints_hold(side, seed, scale):
    model = build_symmetric_constraint(side)
    z = scale * np.random.default_rng(seed).standard_normal(model.P)
    h = kernel_from_z(model, z).reshape(side, side)
    assert abs(h.sum() - 1.0) < 1e-12 * max(1.0, scale * side * side)
    np.testing.assert_array_equal(h, h.T)


@settings(deadline=None, max_examples=30)
@given(side=st.sampled_from([3, 5, 7, 9]), H=st.integers(9, 20), W=st.integers(9, 20),
       seed=st.integers(0, 2 ** 32 - 1))
def test_property_operator_consistency(side, H, W, seed):
    rng = np.random.default_rng(seed)
    model = build_symmetric_constraint(side)
    op = BlurOperator(model, 0.1 * rng.standard_normal(model.P))
    x, r = rng.standard_normal((H, W)), rng.standard_normal((H, W))
    Hx = apply_blur(op, x)
    total = np.tensordot(np.concatenate([[1.0], op.z]), apply_all_Kp(model, x), axes=1)
    np.testing.assert_allclose(total, Hx, atol=1e-11)
    lhs, rhs = np.vdot(Hx, r), np.vdot(x, apply_blur_adjoint(op, r))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


@settings(deadline=None, max_examples=30)
@given(seed=st.integers(0, 2 ** 32 - 1), H=st.integers(3, 8), W=st.integers(3, 8))
def test_property_dense_equivalence(seed, H, W):
    rng = np.random.default_rng(seed)
    model = build_symmetric_constraint(3)
    op = BlurOperator(model, 0.2 * rng.standard_normal(model.P))
    x = rng.standard_normal((H, W))
    Hd = oracles.conv_matrix(op.kernel, (H, W))
    np.testing.assert_allclose(apply_blur(op, x).ravel(), Hd @ x.ravel(), atol=1e-12)
    np.testing.assert_allclose(apply_blur_adjoint(op, x).ravel(), Hd.T @ x.ravel(), atol=1e-12)
    Dh, Dv = oracles.diff_matrices((H, W))
    np.testing.assert_allclose(apply_D(x)[0].ravel(), Dh @ x.ravel(), atol=1e-12)
    np.testing.assert_allclose(apply_D(x)[1].ravel(), Dv @ x.ravel(), atol=1e-12)
