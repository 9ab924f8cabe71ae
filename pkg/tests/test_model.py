import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from splatcam.model import (
    SH_C0,
    DegenerateRotation,
    Gaussian3D,
    ImageBuffer,
    Scene,
    build_covariance,
    build_covariance_backward,
    eval_sh,
    logit,
    sigmoid,
)
from splatcam.oracle import fd_jacobian, FDConfig

quats = st.lists(st.floats(-2, 2), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 0.1)
log_scales = st.lists(st.floats(-3, 1), min_size=3, max_size=3)


def test_identity_covariance():
    np.testing.assert_array_equal(build_covariance([1, 0, 0, 0], [0, 0, 0]), np.eye(3))


def test_scaled_covariance():
    np.testing.assert_allclose(build_covariance([1, 0, 0, 0], [math.log(2), 0, 0]),
                               np.diag([4.0, 1.0, 1.0]), atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(quats, log_scales)
def test_covariance_matches_matrix_products(q, s):
    R = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
    S = np.diag(np.exp(s))
    expected = R @ S @ S.T @ R.T
    got = build_covariance(q, s)
    assert np.abs(got - expected).max() < 1e-12 * max(1.0, np.abs(expected).max())
    np.testing.assert_array_equal(got, got.T)
    assert np.linalg.eigvalsh(got).min() > 0


def test_quaternion_scale_invariance():
    q = np.array([0.3, -0.2, 0.9, 0.1])
    np.testing.assert_allclose(build_covariance(q, [0.1, -0.4, 0.2]),
                               build_covariance(5.0 * q, [0.1, -0.4, 0.2]), atol=1e-14)


def test_degenerate_rotation():
    with pytest.raises(DegenerateRotation, match="degenerate rotation"):
        build_covariance([0, 0, 0, 0], [0, 0, 0])


def test_backward_zero_cotangent():
    dq, ds = build_covariance_backward([0.5, 0.1, -0.3, 0.8], [0.1, 0.2, -0.5], np.zeros((3, 3)))
    assert not dq.any() and not ds.any()


def test_backward_trace_gradient():
    _, ds = build_covariance_backward([1, 0, 0, 0], [0, 0, 0], np.eye(3))
    np.testing.assert_allclose(ds, [2.0, 2.0, 2.0], rtol=1e-14)


@pytest.mark.parametrize("seed", range(20))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=4)
    s = rng.uniform(-1, 0.5, size=3)
    G = rng.normal(size=(3, 3))
    G = G + G.T
    dq, ds = build_covariance_backward(q, s, G)
    cfg = FDConfig(step=1e-5)
    fq = fd_jacobian(lambda x: np.sum(G * build_covariance(x, s)), q, cfg)
    fs = fd_jacobian(lambda x: np.sum(G * build_covariance(q, x)), s, cfg)
    assert np.linalg.norm(dq - fq) < 1e-6 * np.linalg.norm(fq)
    assert np.linalg.norm(ds - fs) < 1e-6 * np.linalg.norm(fs)


def test_backward_is_tangent_to_quaternion_norm():
    # the covariance ignores |q|, so the gradient has no radial part
    q = np.array([0.4, 0.7, -0.2, 0.5])
    dq, _ = build_covariance_backward(q, [0.0, 0.3, -0.2], np.diag([1.0, -2.0, 0.5]))
    assert abs(np.dot(dq, q)) < 1e-12


@given(st.floats(-3, 3), st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(lambda d: np.linalg.norm(d) > 1e-3))
def test_sh_degree0_is_constant(c, d):
    d = np.array(d) / np.linalg.norm(d)
    color = eval_sh(np.full((1, 3), c), d, degree=0)
    np.testing.assert_allclose(color, max(0.28209479 * c + 0.5, 0.0), atol=1e-8)


def test_sh_zero_dc_is_mid_gray():
    np.testing.assert_array_equal(eval_sh(np.zeros((16, 3)), [0, 0, 1]), [0.5, 0.5, 0.5])


def test_sh_degree3_on_axis_matches_basis_table():
    # real SH along +z: only the m = 0 functions survive
    # Y00 = 1/(2 sqrt(pi)), Y10 = sqrt(3/(4 pi)), Y20 = sqrt(5/(16 pi)) * 2, Y30 = sqrt(7/(16 pi)) * 2
    table = {0: 0.5 / math.sqrt(math.pi), 2: math.sqrt(3 / (4 * math.pi)),
             6: 2 * math.sqrt(5 / (16 * math.pi)), 12: 2 * math.sqrt(7 / (16 * math.pi))}
    rng = np.random.default_rng(3)
    sh = rng.uniform(-0.2, 0.2, size=(16, 3))
    expected = 0.5 + sum(v * sh[k] for k, v in table.items())
    np.testing.assert_allclose(eval_sh(sh, [0, 0, 1], degree=3), expected, atol=1e-12)


def test_sh_basis_is_orthonormal():
    # quadrature on a Fibonacci sphere; each basis function via a one-hot coefficient
    n = 40000
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    phi = math.pi * (1 + 5 ** 0.5) * i
    r = np.sqrt(1 - z * z)
    dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    from splatcam.model import eval_sh_batch

    basis = []
    for k in range(16):
        sh = np.zeros((n, 16, 3))
        sh[:, k, 0] = 0.1
        color, passed = eval_sh_batch(sh, dirs, 3)
        assert passed.all()
        basis.append((color[:, 0] - 0.5) / 0.1)
    B = np.array(basis)
    gram = B @ B.T * (4 * math.pi / n)
    np.testing.assert_allclose(gram, np.eye(16), atol=2e-3)


def test_sh_clamps_negative():
    sh = np.zeros((16, 3))
    sh[0] = -10.0
    np.testing.assert_array_equal(eval_sh(sh, [1, 0, 0]), [0, 0, 0])


def test_sigmoid_logit_inverse():
    p = np.linspace(0.01, 0.99, 50)
    np.testing.assert_allclose(sigmoid(logit(p)), p, rtol=1e-13)


def test_scene_round_trip_through_gaussians():
    rng = np.random.default_rng(0)
    gs = [Gaussian3D(rng.normal(size=3), rng.normal(size=4), rng.normal(size=3), rng.normal(),
                     rng.normal(size=(16, 3))) for _ in range(5)]
    scene = Scene.from_gaussians(gs)
    assert len(scene) == 5
    for g, h in zip(gs, scene):
        np.testing.assert_array_equal(g.mean, h.mean)
        np.testing.assert_array_equal(g.sh_coeffs, h.sh_coeffs)
    assert scene.sh_degree() == 3
    assert len(Scene.empty()) == 0


def test_gaussian_pads_dc_only_coefficients():
    g = Gaussian3D([0, 0, 0], [1, 0, 0, 0], [0, 0, 0], 0.0, sh_coeffs=np.ones((1, 3)))
    assert g.sh_coeffs.shape == (16, 3)
    assert g.sh_coeffs[1:].sum() == 0
    assert g.opacity == 0.5


def test_image_buffer_rejects_bad_shapes():
    with pytest.raises(ValueError):
        ImageBuffer(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        ImageBuffer(np.full((4, 4, 3), np.nan))
    assert ImageBuffer.filled(5, 4, (0.1, 0.2, 0.3)).pixels.shape == (4, 5, 3)


def test_sh_constant_matches_y00():
    assert SH_C0 == pytest.approx(0.5 / math.sqrt(math.pi), rel=1e-15)
