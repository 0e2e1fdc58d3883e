import numpy as np
import pytest

from ocmains.geometry import from_rot, quat_log, rot_exp
from ocmains.magfield import (
    ArrayGeometry,
    DipoleEnvironment,
    ExclusionRadiusError,
    PolynomialFieldModel,
    PoseChange,
    RankDeficiencyError,
    array_matrix,
    b_matrix,
    coeff_transition,
    dipole_field,
    field_jacobian,
    field_spatial_jacobian,
    h_theta,
    h_theta_stack,
    random_environment,
    rotation_field_jacobian,
)

MODEL1 = PolynomialFieldModel(order=1)
MODEL2 = PolynomialFieldModel(order=2)
GRID = ArrayGeometry.default_grid()


def _numeric_jacobian(f, r, h=1e-5):
    J = np.zeros((3, 3))
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        J[:, j] = (f(r + e) - f(r - e)) / (2.0 * h)
    return J


def test_kappa_counts():
    assert PolynomialFieldModel(order=0).kappa == 3
    assert MODEL1.kappa == 8
    assert MODEL2.kappa == 15
    with pytest.raises(ValueError):
        PolynomialFieldModel(order=3)


def test_h_theta_origin_order1():
    H = h_theta(MODEL1, np.zeros(3))
    assert H.shape == (3, 8)
    assert np.allclose(H[:, :3], np.eye(3))
    assert np.allclose(H[:, 3:], 0.0)


def test_h_theta_gradient_block_at_unit_x():
    D = h_theta(MODEL1, np.array([1.0, 0.0, 0.0]))[:, 3:]
    assert np.allclose(D[0], [1, 0, 0, 0, 0])
    assert np.allclose(D[1], [0, 1, 0, 0, 0])
    assert np.allclose(D[2], [0, 0, 1, 0, 0])


def test_h_theta_matches_traceless_symmetric_m():
    rng = np.random.default_rng(0)
    for _ in range(10):
        theta = rng.standard_normal(8)
        r = rng.uniform(-1, 1, 3)
        m11, m12, m13, m22, m23 = theta[3:]
        M = np.array([[m11, m12, m13], [m12, m22, m23], [m13, m23, -m11 - m22]])
        assert np.allclose(h_theta(MODEL1, r) @ theta, theta[:3] + M @ r, atol=1e-12)


@pytest.mark.parametrize("model", [MODEL1, MODEL2], ids=["order1", "order2"])
def test_field_is_divergence_and_curl_free(model):
    rng = np.random.default_rng(42)
    for _ in range(10):
        theta = rng.standard_normal(model.kappa) * 10.0
        r = rng.uniform(-2, 2, 3)

        def f(p):
            return h_theta(model, p) @ theta

        J = _numeric_jacobian(f, r)
        assert abs(np.trace(J)) < 1e-6
        assert np.max(np.abs(J - J.T)) < 1e-6


@pytest.mark.parametrize("model", [MODEL1, MODEL2], ids=["order1", "order2"])
def test_spatial_jacobian_matches_finite_differences(model):
    rng = np.random.default_rng(43)
    for _ in range(10):
        theta = rng.standard_normal(model.kappa)
        r = rng.uniform(-1, 1, 3)
        J = field_spatial_jacobian(model, r.reshape(1, 3), theta)[0]
        J_fd = _numeric_jacobian(lambda p: h_theta(model, p) @ theta, r)
        assert np.max(np.abs(J - J_fd)) < 1e-8


def test_array_matrix_default_grid():
    A, A_pinv = array_matrix(MODEL1, GRID)
    assert A.shape == (90, 8)
    sv = np.linalg.svd(A, compute_uv=False)
    assert np.sum(sv > 1e-10 * sv[0]) == 8
    assert np.max(np.abs(A_pinv @ A - np.eye(8))) < 1e-12


def test_array_matrix_rank_deficiency():
    tiny = ArrayGeometry(np.array([[0.0, 0.0, 0.0]]))
    with pytest.raises(RankDeficiencyError):
        array_matrix(MODEL1, tiny)


def test_h_theta_stack_orders_sensors():
    pts = GRID.positions
    stacked = h_theta_stack(MODEL1, pts)
    for i in (0, 7, 29):
        assert np.allclose(stacked[3 * i : 3 * i + 3], h_theta(MODEL1, pts[i]))


def test_b_matrix_identity_pose():
    A, _ = array_matrix(MODEL1, GRID)
    B = b_matrix(MODEL1, GRID, PoseChange.identity())
    assert np.max(np.abs(B - A)) < 1e-12


def test_b_matrix_pure_rotation_uniform_field():
    rng = np.random.default_rng(1)
    b = rng.uniform(-50, 50, 3)
    theta = np.concatenate([b, np.zeros(5)])
    pose = PoseChange(np.zeros(3), np.array([0.2, -0.4, 1.1]))
    dR = rot_exp(pose.dphi)
    pred = (b_matrix(MODEL1, GRID, pose) @ theta).reshape(-1, 3)
    assert np.allclose(pred, dR.T @ b, atol=1e-12)


def test_b_matrix_pure_translation_shifts_constant_term():
    rng = np.random.default_rng(2)
    theta = rng.standard_normal(8) * 5.0
    m11, m12, m13, m22, m23 = theta[3:]
    M = np.array([[m11, m12, m13], [m12, m22, m23], [m13, m23, -m11 - m22]])
    dp = np.array([0.3, -0.1, 0.25])
    T = coeff_transition(MODEL1, GRID, PoseChange(dp, np.zeros(3)))
    new_theta = T @ theta
    assert np.allclose(new_theta[:3], theta[:3] + M @ dp, atol=1e-10)
    assert np.allclose(new_theta[3:], theta[3:], atol=1e-10)


def test_coeff_transition_identity():
    T = coeff_transition(MODEL1, GRID, PoseChange.identity())
    assert np.max(np.abs(T - np.eye(8))) < 1e-12


def test_coeff_transition_half_turn_flips_constant_term():
    theta = np.zeros(8)
    theta[0] = 30.0
    T = coeff_transition(MODEL1, GRID, PoseChange(np.zeros(3), np.array([0, 0, np.pi])))
    assert np.allclose((T @ theta)[:3], [-30.0, 0.0, 0.0], atol=1e-9)


def test_coeff_transition_composition():
    rng = np.random.default_rng(3)
    p1 = PoseChange(rng.uniform(-0.2, 0.2, 3), rng.uniform(-0.5, 0.5, 3))
    p2 = PoseChange(rng.uniform(-0.2, 0.2, 3), rng.uniform(-0.5, 0.5, 3))
    dR1 = rot_exp(p1.dphi)
    dR2 = rot_exp(p2.dphi)
    # combined pose expressed in the starting frame
    comb = PoseChange(p1.dp + dR1 @ p2.dp, quat_log(from_rot(dR1 @ dR2)))
    T_two = coeff_transition(MODEL1, GRID, p2) @ coeff_transition(MODEL1, GRID, p1)
    T_one = coeff_transition(MODEL1, GRID, comb)
    assert np.max(np.abs(T_two - T_one)) < 1e-9


def test_field_jacobian_uniform_field_is_zero():
    theta = np.concatenate([[10.0, -20.0, 30.0], np.zeros(5)])
    pose = PoseChange(np.array([0.1, 0.0, 0.0]), np.array([0.0, 0.3, 0.0]))
    assert np.max(np.abs(field_jacobian(MODEL1, GRID, pose, theta))) == 0.0


def test_field_jacobian_order1_blocks():
    rng = np.random.default_rng(4)
    theta = rng.standard_normal(8)
    m11, m12, m13, m22, m23 = theta[3:]
    M = np.array([[m11, m12, m13], [m12, m22, m23], [m13, m23, -m11 - m22]])
    pose = PoseChange(rng.uniform(-0.2, 0.2, 3), rng.uniform(-0.4, 0.4, 3))
    dR = rot_exp(pose.dphi)
    J = field_jacobian(MODEL1, GRID, pose, theta).reshape(-1, 3, 3)
    for blk in J:
        assert np.allclose(blk, dR.T @ M, atol=1e-12)


@pytest.mark.parametrize("model", [MODEL1, MODEL2], ids=["order1", "order2"])
def test_field_jacobian_matches_finite_differences(model):
    rng = np.random.default_rng(5)
    theta = rng.standard_normal(model.kappa) * 4.0
    pose = PoseChange(rng.uniform(-0.3, 0.3, 3), rng.uniform(-0.5, 0.5, 3))
    J = field_jacobian(model, GRID, pose, theta)
    h = 1e-6
    J_fd = np.zeros_like(J)
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        fp = b_matrix(model, GRID, PoseChange(pose.dp + e, pose.dphi)) @ theta
        fm = b_matrix(model, GRID, PoseChange(pose.dp - e, pose.dphi)) @ theta
        J_fd[:, j] = (fp - fm) / (2.0 * h)
    assert np.max(np.abs(J - J_fd)) < 1e-6 * max(1.0, np.max(np.abs(J_fd)))


@pytest.mark.parametrize("model", [MODEL1, MODEL2], ids=["order1", "order2"])
def test_rotation_field_jacobian_matches_finite_differences(model):
    rng = np.random.default_rng(6)
    theta = rng.standard_normal(model.kappa) * 4.0
    pose = PoseChange(rng.uniform(-0.3, 0.3, 3), rng.uniform(-0.5, 0.5, 3))
    J = rotation_field_jacobian(model, GRID, pose, theta)
    h = 1e-6
    J_fd = np.zeros_like(J)
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        fp = b_matrix(model, GRID, PoseChange(pose.dp, pose.dphi + e)) @ theta
        fm = b_matrix(model, GRID, PoseChange(pose.dp, pose.dphi - e)) @ theta
        J_fd[:, j] = (fp - fm) / (2.0 * h)
    assert np.max(np.abs(J - J_fd)) < 1e-6 * max(1.0, np.max(np.abs(J_fd)))


def test_dipole_field_on_axis():
    moment = 40.0
    d = 1.5
    env = DipoleEnvironment(
        earth_field=[10.0, 0.0, -40.0],
        positions=[[0.0, 0.0, 0.0]],
        moments=[[0.0, 0.0, moment]],
    )
    B = dipole_field(env, np.array([0.0, 0.0, d]))
    expected_z = -40.0 + 0.2 * moment / d**3  # mu0/(2 pi) in microtesla units
    assert B[0] == pytest.approx(10.0)
    assert B[1] == pytest.approx(0.0)
    assert B[2] == pytest.approx(expected_z, rel=1e-12)


def test_dipole_field_superposition():
    rng = np.random.default_rng(7)
    p1, p2 = rng.uniform(-2, 2, (2, 3))
    m1, m2 = rng.uniform(-30, 30, (2, 3))
    r = np.array([4.0, 4.0, 4.0])
    both = DipoleEnvironment(np.zeros(3), [p1, p2], [m1, m2])
    one = DipoleEnvironment(np.zeros(3), [p1], [m1])
    two = DipoleEnvironment(np.zeros(3), [p2], [m2])
    assert np.allclose(dipole_field(both, r), dipole_field(one, r) + dipole_field(two, r))


def test_dipole_field_divergence_free():
    env = random_environment(seed=123)
    rng = np.random.default_rng(8)
    for _ in range(5):
        r = np.array([rng.uniform(0, 2), rng.uniform(0, 2), 0.0])
        J = _numeric_jacobian(lambda p: dipole_field(env, p), r, h=1e-4)
        scale = np.max(np.abs(J))
        assert abs(np.trace(J)) < 1e-6 * max(scale, 1.0)


def test_dipole_exclusion_radius():
    env = DipoleEnvironment(np.zeros(3), [[0.0, 0.0, 0.0]], [[0.0, 0.0, 10.0]])
    with pytest.raises(ExclusionRadiusError):
        dipole_field(env, np.array([0.05, 0.0, 0.0]))


def test_random_environment_band():
    env = random_environment(seed=123)
    xs = np.linspace(-0.5, 2.5, 15)
    pts = np.array([[x, y, 0.0] for x in xs for y in xs])
    mags = np.linalg.norm(dipole_field(env, pts), axis=1)
    assert mags.min() >= 15.0  # calibrated on the wider default region
    assert mags.max() <= 70.0
    assert mags.max() - mags.min() > 5.0  # enough spatial variation to aid odometry


def test_geometry_from_file(tmp_path):
    path = tmp_path / "array.txt"
    path.write_text("# test array\n0.0 0.0 0.0\n0.1 0.0 0.0  # sensor 2\n0.0 0.1 0.0\n")
    geom = ArrayGeometry.from_file(path)
    assert geom.m == 3
    assert np.allclose(geom.positions[1], [0.1, 0.0, 0.0])
    bad = tmp_path / "bad.txt"
    bad.write_text("0.0 0.0\n")
    with pytest.raises(ValueError, match="bad.txt:1"):
        ArrayGeometry.from_file(bad)


def test_default_grid_layout():
    assert GRID.m == 30
    assert np.allclose(GRID.positions.mean(axis=0), 0.0)
    assert np.allclose(GRID.positions[:, 2], 0.0)
    dx = np.unique(np.round(np.diff(np.unique(GRID.positions[:, 0])), 12))
    assert np.allclose(dx, 0.03)
