import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparc.conformal import PredictionRegion
from sparc.safety import (
    FilterParams,
    HalfspaceConstraint,
    InfeasibleControlError,
    barrier_value,
    box_distance,
    cbf_constraint,
    dist_to_box,
    filter_control,
    kkt_candidates,
)
from sparc.sim import VehicleState, WorldConfig


def region(c, hw):
    return PredictionRegion(np.asarray(c, float), np.asarray(hw, float))


# -- geometry ----------------------------------------------------------------

def test_box_distance_axis_case():
    d, g = dist_to_box([0.0, 0.0], region([3, 0], [1, 1]))
    assert d == pytest.approx(2.0)
    assert g.tolist() == pytest.approx([-1.0, 0.0])


def test_box_distance_inside():
    d, g = dist_to_box([0.2, -0.3], region([0, 0], [1, 1]))
    assert d == 0.0 and g.tolist() == [0.0, 0.0]


def test_box_distance_corner():
    d, g = dist_to_box([5.0, 5.0], region([0, 0], [1, 2]))
    assert d == pytest.approx(5.0)
    assert g.tolist() == pytest.approx([0.8, 0.6])


def test_box_distance_on_boundary_has_zero_gradient():
    d, g = dist_to_box([1.0, 0.5], region([0, 0], [1, 1]))
    assert d == 0.0 and g.tolist() == [0.0, 0.0]


def test_box_distance_broadcasts():
    p = np.array([[0.0, 0.0], [5.0, 5.0]])
    d, g = box_distance(p, np.array([[3.0, 0.0], [0.0, 0.0]]), np.array([[1.0, 1.0], [1.0, 2.0]]))
    assert d.tolist() == pytest.approx([2.0, 5.0])
    assert g.shape == (2, 2)


def test_degenerate_point_box_is_euclidean():
    d, _ = box_distance([3.0, 4.0], [0.0, 0.0], [0.0, 0.0])
    assert d == pytest.approx(5.0)


# -- barrier -----------------------------------------------------------------

def test_barrier_values():
    cfg, fp = WorldConfig(), FilterParams(d_safe=1.0)
    reg = region([13.0, 12.5], [1.0, 1.0])
    assert barrier_value(VehicleState(9.0, 0.0), reg, fp, cfg) == pytest.approx(2.0)
    assert barrier_value(VehicleState(13.0, 0.0), reg, fp, cfg) == pytest.approx(-1.0)
    assert barrier_value(VehicleState(11.0, 0.0), reg, fp, cfg) == pytest.approx(0.0)


def test_cbf_constraint_ahead():
    cfg, fp = WorldConfig(), FilterParams(gamma=1.0, d_safe=1.0)
    # box starts 5 m ahead on the lane line: h = 4
    reg = region([16.0, 12.5], [1.0, 0.5])
    c = cbf_constraint(VehicleState(10.0, 0.0), reg, fp, cfg)
    assert float(c.a) == pytest.approx(-1.0) and float(c.b) == pytest.approx(-4.0)
    assert filter_control(10.0, c, fp).u == pytest.approx(4.0)


def test_cbf_constraint_gradient_matches_fd():
    cfg, fp = WorldConfig(), FilterParams(gamma=2.0)
    reg = region([20.0, 14.0], [0.5, 0.3])
    x, eps = 16.3, 1e-6
    c = cbf_constraint(x, reg, fp, cfg)
    fd = (barrier_value(x + eps, reg, fp, cfg) - barrier_value(x - eps, reg, fp, cfg)) / (2 * eps)
    assert float(c.a) == pytest.approx(fd, abs=1e-6)


def test_cbf_constraint_inside_is_infeasible():
    cfg, fp = WorldConfig(), FilterParams(gamma=1.0, d_safe=1.0)
    c = cbf_constraint(VehicleState(10.0, 0.0), region([10.0, 12.5], [1, 1]), fp, cfg)
    assert float(c.a) == 0.0 and float(c.b) == pytest.approx(1.0)
    res = filter_control(7.0, c, fp)
    assert res.infeasible and res.u == fp.u_min


def test_cbf_constraint_behind_never_binds():
    cfg, fp = WorldConfig(), FilterParams(gamma=1.0)
    c = cbf_constraint(VehicleState(30.0, 0.0), region([20.0, 12.5], [1, 1]), fp, cfg)
    assert float(c.a) == pytest.approx(1.0) and float(c.b) < 0
    for u in (0.0, 5.0, 15.0):
        assert filter_control(u, c, fp).u == u


# -- filter ------------------------------------------------------------------

def test_filter_examples():
    fp = FilterParams()
    upper4 = HalfspaceConstraint(-1.0, -4.0)
    assert filter_control(2.0, upper4, fp) == (2.0, False)
    assert filter_control(10.0, upper4, fp).u == pytest.approx(4.0)
    res = filter_control(3.0, HalfspaceConstraint(1.0, 20.0), fp)
    assert res.u == 15.0 and res.infeasible


def test_filter_fail_policy():
    fp = FilterParams(infeasible_policy="fail")
    with pytest.raises(InfeasibleControlError):
        filter_control(3.0, HalfspaceConstraint(1.0, 20.0), fp)


def test_filter_vectorised_matches_scalar():
    g = np.random.default_rng(4)
    fp = FilterParams()
    u_r = g.uniform(-2, 17, 200)
    a = g.normal(size=200)
    a[::7] = 0.0
    b = g.normal(scale=5, size=200)
    vec = filter_control(u_r, HalfspaceConstraint(a, b), fp)
    for k in range(200):
        one = filter_control(u_r[k], HalfspaceConstraint(a[k], b[k]), fp)
        assert one.u == vec.u[k] and one.infeasible == vec.infeasible[k]


@settings(max_examples=300, deadline=None)
@given(
    u_r=st.floats(-5, 20),
    a=st.floats(-3, 3),
    b=st.floats(-30, 30),
)
def test_filter_matches_kkt_enumeration(u_r, a, b):
    fp = FilterParams()
    c = HalfspaceConstraint(a, b)
    res = filter_control(u_r, c, fp)
    # the b/a candidate may miss the halfspace by one rounding step
    slack = 1e-12 * (abs(b) + abs(a) * fp.u_max)
    feas = [u for u in kkt_candidates(u_r, c, fp) if fp.u_min <= u <= fp.u_max and a * u >= b - slack]
    if res.infeasible:
        assert not [u for u in kkt_candidates(u_r, c, fp) if fp.u_min <= u <= fp.u_max and a * u >= b]
        return
    assert a * res.u >= b - slack and fp.u_min <= res.u <= fp.u_max
    assert (res.u - u_r) ** 2 <= min((u - u_r) ** 2 for u in feas) + 1e-9


def test_forward_invariance_static_region():
    """Closed loop against a frozen box: h stays above the discretisation slack."""
    cfg = WorldConfig()
    g = np.random.default_rng(8)
    for _ in range(100):
        fp = FilterParams(gamma=float(g.uniform(0.5, 10)))
        reg = region([g.uniform(10, 60), g.uniform(11, 14)], g.uniform(0, 0.5, 2))
        x = float(g.uniform(0, reg.center[0] - 3))
        if barrier_value(x, reg, fp, cfg) < 0:
            continue
        h_max = barrier_value(x, reg, fp, cfg)
        u_r = float(g.uniform(0, 15))
        for _ in range(800):
            c = cbf_constraint(x, reg, fp, cfg)
            x += filter_control(u_r, c, fp).u * fp.dt_ctrl
            h = barrier_value(x, reg, fp, cfg)
            assert h >= -fp.gamma * h_max * fp.dt_ctrl - 1e-12


@pytest.mark.parametrize(
    "kw",
    [{"gamma": 0.0}, {"u_min": 5.0, "u_max": 1.0}, {"infeasible_policy": "ignore"}, {"region_mode": "disk"}],
)
def test_filter_params_validation(kw):
    with pytest.raises(ValueError):
        FilterParams(**kw)
