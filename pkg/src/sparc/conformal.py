"""Split conformal calibration of the velocity predictor.

Scores are per-dimension absolute errors of the predicted pedestrian
velocity.  The finite-sample radius for miscoverage ``alpha`` is the
``ceil((n + 1)(1 - alpha))``-th smallest score, or ``inf`` when that rank
exceeds ``n``.  Radii are converted to a box around the predicted next
position.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

SCORE_MODES = ("per_step", "sup_per_trajectory")


class UnboundedRegionError(ValueError):
    """The calibrated radius is infinite, so no bounded region exists."""


@dataclass
class ScoreSet:
    par: np.ndarray
    perp: np.ndarray
    score_mode: str = "per_step"

    @property
    def n(self) -> int:
        return len(self.par)


@dataclass(frozen=True)
class CalibrationProfile:
    alpha: float
    r_par: float
    r_perp: float
    n_cal: int
    score_mode: str = "per_step"

    @property
    def radii(self) -> np.ndarray:
        return np.array([self.r_par, self.r_perp])

    @property
    def finite(self) -> bool:
        return math.isfinite(self.r_par) and math.isfinite(self.r_perp)

    @classmethod
    def zero(cls, alpha: float = 1.0, n_cal: int = 0) -> "CalibrationProfile":
        """Zero-radius profile: the bare point prediction."""
        return cls(alpha=alpha, r_par=0.0, r_perp=0.0, n_cal=n_cal)


@dataclass(frozen=True)
class PredictionRegion:
    center: np.ndarray
    half_widths: np.ndarray


def quantile_rank(n: int, alpha: float) -> int:
    """1-based rank of the conformal quantile among ``n`` sorted scores."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha!r}")
    # exact rational arithmetic on the decimal alpha avoids ceil() off-by-one
    r = math.ceil((n + 1) * (1 - Fraction(repr(float(alpha)))))
    return max(r, 1)


def conformal_quantile(scores: Sequence[float], alpha: float) -> float:
    s = np.sort(np.asarray(scores, dtype=float))
    if s.size and s[0] < 0:
        raise ValueError("scores must be non-negative")
    r = quantile_rank(len(s), alpha)
    if r > len(s):
        return math.inf
    return float(s[r - 1])


def _episode_errors(model, episodes):
    from .predictor import episode_features, forward

    feats = np.concatenate([episode_features(ep, model.feature_window, model.feature_norm) for ep in episodes])
    truth = np.concatenate([ep.dvel() for ep in episodes])
    return np.abs(truth - forward(model, feats))


def nonconformity_scores(model, cal_set, mode: str = "per_step") -> ScoreSet:
    if mode not in SCORE_MODES:
        raise ValueError(f"score mode must be one of {SCORE_MODES}")
    episodes = list(cal_set)
    if not episodes:
        raise ValueError("calibration set is empty")
    if any(len(ep) == 0 for ep in episodes):
        raise ValueError("every calibration episode needs at least one step")
    err = _episode_errors(model, episodes)
    if mode == "per_step":
        return ScoreSet(err[:, 0].copy(), err[:, 1].copy(), mode)
    bounds = np.cumsum([0] + [len(ep) for ep in episodes])
    sup = np.array([err[a:b].max(axis=0) for a, b in zip(bounds[:-1], bounds[1:])])
    return ScoreSet(sup[:, 0], sup[:, 1], mode)


def profile_from_scores(scores: ScoreSet, alpha: float) -> CalibrationProfile:
    return CalibrationProfile(
        alpha=float(alpha),
        r_par=conformal_quantile(scores.par, alpha),
        r_perp=conformal_quantile(scores.perp, alpha),
        n_cal=scores.n,
        score_mode=scores.score_mode,
    )


def calibrate(model, cal_set, alpha: float, mode: str = "per_step") -> CalibrationProfile:
    return profile_from_scores(nonconformity_scores(model, cal_set, mode), alpha)


def prediction_region(y_t, dy_hat, profile: CalibrationProfile, dt: float) -> PredictionRegion:
    if not profile.finite:
        raise UnboundedRegionError(
            f"radius is infinite at alpha={profile.alpha} with n_cal={profile.n_cal}; "
            "increase alpha or the calibration set"
        )
    center = np.asarray(y_t, dtype=float) + np.asarray(dy_hat, dtype=float) * dt
    return PredictionRegion(center=center, half_widths=profile.radii * dt)


def region_contains(region: PredictionRegion, y) -> bool:
    dev = np.abs(np.asarray(y, dtype=float) - region.center)
    return bool(np.all(dev <= region.half_widths))


def _encode_radius(r: float):
    return r if math.isfinite(r) else "inf"


def _decode_radius(v, key: str) -> float:
    if v == "inf":
        return math.inf
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError(f"calibration field {key!r} must be a number or \"inf\"")
    if v < 0:
        raise ValueError(f"calibration field {key!r} must be non-negative")
    return float(v)


def profile_to_dict(p: CalibrationProfile) -> dict:
    return {
        "alpha": p.alpha,
        "r_par": _encode_radius(p.r_par),
        "r_perp": _encode_radius(p.r_perp),
        "n_cal": p.n_cal,
        "score_mode": p.score_mode,
    }


def profile_from_dict(d: dict) -> CalibrationProfile:
    missing = {"alpha", "r_par", "r_perp", "n_cal", "score_mode"} - set(d)
    if missing:
        raise ValueError(f"calibration entry missing fields: {sorted(missing)}")
    if d["score_mode"] not in SCORE_MODES:
        raise ValueError(f"unknown score_mode {d['score_mode']!r}")
    alpha = float(d["alpha"])
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return CalibrationProfile(
        alpha=alpha,
        r_par=_decode_radius(d["r_par"], "r_par"),
        r_perp=_decode_radius(d["r_perp"], "r_perp"),
        n_cal=int(d["n_cal"]),
        score_mode=d["score_mode"],
    )


def save_profiles(profiles: Sequence[CalibrationProfile], path) -> None:
    """Write one profile as an object, several as a list of objects."""
    items = [profile_to_dict(p) for p in profiles]
    doc = items[0] if len(items) == 1 else items
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_profiles(path) -> list[CalibrationProfile]:
    doc = json.loads(Path(path).read_text())
    items = doc if isinstance(doc, list) else [doc]
    return [profile_from_dict(d) for d in items]
