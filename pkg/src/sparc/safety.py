"""Control-barrier-function safety filter around a box-shaped prediction region.

The barrier is the Euclidean distance from the vehicle to the region minus a
safety margin.  With single-integrator dynamics along the road the CBF
condition is one halfspace in the scalar speed, and the minimally-invasive
filtered input has a closed form.

All functions broadcast over leading array dimensions so the same code
serves both single queries and batches of trials.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .conformal import PredictionRegion
from .sim import VehicleState, WorldConfig

INFEASIBLE_POLICIES = ("fail", "clamp_best_effort")


class InfeasibleControlError(RuntimeError):
    """No admissible input satisfies the barrier condition."""


@dataclass(frozen=True)
class FilterParams:
    gamma: float = 5.0
    d_safe: float = 1.0
    u_min: float = 0.0
    u_max: float = 15.0
    infeasible_policy: str = "clamp_best_effort"
    dt_ctrl: float = 0.01
    region_mode: str = "next"  # "next" or "hull"

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.u_min > self.u_max:
            raise ValueError("u_min must not exceed u_max")
        if self.infeasible_policy not in INFEASIBLE_POLICIES:
            raise ValueError(f"infeasible_policy must be one of {INFEASIBLE_POLICIES}")
        if not self.dt_ctrl > 0:
            raise ValueError("dt_ctrl must be positive")
        if self.region_mode not in ("next", "hull"):
            raise ValueError("region_mode must be 'next' or 'hull'")
        if self.d_safe < 0:
            raise ValueError("d_safe must be non-negative")


class HalfspaceConstraint(NamedTuple):
    """Feasible inputs ``{u : a * u >= b}``."""

    a: float
    b: float


class FilteredControl(NamedTuple):
    u: float
    infeasible: bool


def box_distance(p, center, half_widths):
    """Distance from ``p`` to an axis-aligned box and its gradient w.r.t. ``p``.

    The gradient is the unit vector from the closest box point to ``p``; it
    is set to zero inside the box and on its boundary.
    """
    delta = np.asarray(p, dtype=float) - np.asarray(center, dtype=float)
    excess = np.maximum(np.abs(delta) - np.asarray(half_widths, dtype=float), 0.0)
    d = np.hypot(excess[..., 0], excess[..., 1])
    outside = d > 0
    denom = np.where(outside, d, 1.0)
    grad = np.where(outside[..., None], np.sign(delta) * excess / denom[..., None], 0.0)
    return d, grad


def dist_to_box(p, region: PredictionRegion):
    return box_distance(p, region.center, region.half_widths)


def _vehicle_point(x, cfg: WorldConfig):
    par = x.par if isinstance(x, VehicleState) else x
    par = np.asarray(par, dtype=float)
    return np.stack([par, np.full_like(par, cfg.vehicle_lane_perp)], axis=-1)


def barrier_value(x, region: PredictionRegion, params: FilterParams, cfg: WorldConfig):
    """``h(x)``; ``x`` is a :class:`VehicleState` or an array of positions."""
    d, _ = dist_to_box(_vehicle_point(x, cfg), region)
    return d - params.d_safe


def cbf_constraint(x, region: PredictionRegion, params: FilterParams, cfg: WorldConfig) -> HalfspaceConstraint:
    # dx/dt = u, so L_f h = 0 and L_g h = dh/dpar
    d, grad = dist_to_box(_vehicle_point(x, cfg), region)
    h = d - params.d_safe
    return HalfspaceConstraint(a=grad[..., 0], b=-params.gamma * h)


def filter_control(u_r, c: HalfspaceConstraint, params: FilterParams) -> FilteredControl:
    """Closest input to ``u_r`` in ``[u_min, u_max]`` satisfying ``a*u >= b``.

    When the feasible set is empty the result is the box point maximising
    ``a*u`` (braking when ``a`` is zero) with ``infeasible`` set, unless the
    policy is ``"fail"``.
    """
    u_r = np.asarray(u_r, dtype=float)
    a = np.asarray(c.a, dtype=float)
    b = np.asarray(c.b, dtype=float)
    lo, hi = params.u_min, params.u_max
    safe_a = np.where(a != 0, a, 1.0)
    with np.errstate(over="ignore"):
        bound = b / safe_a  # +-inf for tiny a still orders correctly
    lower = np.where(a > 0, np.maximum(lo, bound), lo)
    upper = np.where(a < 0, np.minimum(hi, bound), hi)
    empty = (lower > upper) | ((a == 0) & (b > 0))
    u = np.clip(u_r, lower, upper)
    # a feasible reference is returned untouched, whatever the rounding in b/a
    keep = (a * u_r >= b) & (u_r >= lo) & (u_r <= hi)
    u = np.where(keep, u_r, u)
    best = np.where(a > 0, hi, lo)
    u = np.where(empty, best, u)
    if params.infeasible_policy == "fail" and np.any(empty):
        raise InfeasibleControlError(f"empty feasible set for constraint a={c.a}, b={c.b}")
    if u.ndim == 0:
        return FilteredControl(float(u), bool(empty))
    return FilteredControl(u, empty)


def kkt_candidates(u_r: float, c: HalfspaceConstraint, params: FilterParams) -> list[float]:
    """Candidate minimisers of the 1-D problem: the reference and each active bound."""
    cands = [u_r, params.u_min, params.u_max]
    if c.a != 0:
        cands.append(c.b / c.a)
    return cands
