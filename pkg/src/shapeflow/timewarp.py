"""Affine subject-time reparametrization and its estimation from scores.

psi(t) = alpha (t - t0 - tau) + t0 maps subject age onto the reference clock:
alpha > 1 means fast progression, positive tau a late onset.  (alpha, tau) are
fitted per subject by least squares of the scores against a fixed logistic
reference curve: coarse grid search over (log alpha, tau) followed by
Gauss-Newton refinement.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .deformation import Geodesic, shape_at
from .errors import InterpolationRangeError, InvalidInputError

ALPHA_GRID = (0.1, 10.0, 40)      # log-spaced bounds and count
TAU_GRID = (-25.0, 25.0, 100)


def _sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True)
class TimeWarp:
    alpha: float
    tau: float
    t0: float
    identifiable: bool = True

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise InvalidInputError(f"alpha must be positive, got {self.alpha}")
        if not (np.isfinite(self.tau) and np.isfinite(self.t0)):
            raise InvalidInputError("non-finite warp parameters")

    def to_dict(self):
        return {"alpha": self.alpha, "tau": self.tau, "t0": self.t0,
                "identifiable": self.identifiable}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["alpha"]), float(d["tau"]), float(d["t0"]),
                   bool(d.get("identifiable", True)))


@dataclass(frozen=True)
class ScoreSeries:
    """Longitudinal normalized scores: times strictly increasing, >= 2 points."""

    times: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        s = np.asarray(self.scores, dtype=float)
        if t.ndim != 1 or t.shape != s.shape or len(t) < 2:
            raise InvalidInputError("need >= 2 (time, score) pairs of equal length")
        if np.any(np.diff(t) <= 0):
            raise InvalidInputError("times must be strictly increasing")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(s))):
            raise InvalidInputError("non-finite score data")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "scores", s)


@dataclass(frozen=True)
class ReferenceCurve:
    """Logistic progression curve in normalized score space."""

    t_mid: float
    scale: float
    floor: float = 0.0
    ceiling: float = 1.0

    def __post_init__(self):
        if self.scale <= 0:
            raise InvalidInputError("scale must be positive")
        if self.floor >= self.ceiling:
            raise InvalidInputError("floor must be below ceiling")

    def value(self, t):
        z = (np.asarray(t, dtype=float) - self.t_mid) / self.scale
        return self.floor + (self.ceiling - self.floor) * _sigmoid(z)

    def slope(self, t):
        z = (np.asarray(t, dtype=float) - self.t_mid) / self.scale
        sig = _sigmoid(z)
        return (self.ceiling - self.floor) * sig * (1.0 - sig) / self.scale

    def to_dict(self):
        return {"t_mid": self.t_mid, "scale": self.scale,
                "floor": self.floor, "ceiling": self.ceiling}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["t_mid"]), float(d["scale"]),
                   float(d.get("floor", 0.0)), float(d.get("ceiling", 1.0)))


def psi(t, warp):
    """Map subject time onto the reference clock."""
    return warp.alpha * (np.asarray(t, dtype=float) - warp.t0 - warp.tau) + warp.t0


def psi_inverse(u, warp):
    """Subject time at which the reference clock reads u."""
    return warp.t0 + warp.tau + (np.asarray(u, dtype=float) - warp.t0) / warp.alpha


def invert_warp(warp):
    """Warp whose psi is the inverse map of the given warp's psi."""
    return TimeWarp(alpha=1.0 / warp.alpha, tau=-warp.alpha * warp.tau,
                    t0=warp.t0, identifiable=warp.identifiable)


def compose_warps(outer, inner):
    """Warp w with psi_w = psi_outer o psi_inner, expressed at inner.t0."""
    alpha = outer.alpha * inner.alpha
    # psi_outer(psi_inner(t)) = alpha t + b; solve tau from the fixed-point form
    b = psi(float(psi(0.0, inner)), outer)
    t0 = inner.t0
    tau = (t0 - b) / alpha - t0
    return TimeWarp(alpha=alpha, tau=float(tau), t0=t0,
                    identifiable=outer.identifiable and inner.identifiable)


def fit_timewarp(series, ref, t0):
    """Least-squares (alpha, tau) against the reference curve; deterministic.

    Coarse log-alpha x tau grid search, then Gauss-Newton with Levenberg
    damping on (log alpha, tau).  A flat series over a flat stretch of the
    reference is unidentifiable: the identity warp is returned flagged.
    """
    t = series.times
    s = series.scores
    a_lo, a_hi, a_n = ALPHA_GRID
    t_lo, t_hi, t_n = TAU_GRID
    alphas = np.exp(np.linspace(np.log(a_lo), np.log(a_hi), a_n))
    taus = np.linspace(t_lo, t_hi, t_n)
    u = alphas[:, None, None] * (t[None, None, :] - t0 - taus[None, :, None]) + t0
    sse = np.sum((ref.value(u) - s[None, None, :]) ** 2, axis=2)
    spread = float(sse.max() - sse.min())
    if spread <= 1e-12 * max(1.0, float(sse.max())):
        return TimeWarp(1.0, 0.0, t0, identifiable=False)
    i, j = np.unravel_index(int(np.argmin(sse)), sse.shape)

    theta = np.array([np.log(alphas[i]), taus[j]])

    def residuals(th):
        alpha, tau = np.exp(th[0]), th[1]
        uu = alpha * (t - t0 - tau) + t0
        return ref.value(uu) - s, uu, alpha, tau

    r, uu, alpha, tau = residuals(theta)
    best = float(r @ r)
    mu = 1e-8
    for _ in range(100):
        fp = ref.slope(uu)
        J = np.stack([fp * alpha * (t - t0 - tau), fp * (-alpha)], axis=1)
        JtJ = J.T @ J
        rhs = -J.T @ r
        step = None
        for _ in range(25):
            try:
                step = np.linalg.solve(JtJ + mu * np.eye(2), rhs)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            cand = theta + step
            rc, uc, ac, tc = residuals(cand)
            cand_sse = float(rc @ rc)
            if cand_sse <= best:
                theta, r, uu, alpha, tau = cand, rc, uc, ac, tc
                improvement = best - cand_sse
                best = cand_sse
                mu = max(mu / 3.0, 1e-12)
                break
            mu *= 10.0
        else:
            break
        if np.max(np.abs(step)) < 1e-12 or improvement < 1e-18:
            break
    return TimeWarp(alpha=float(np.exp(theta[0])), tau=float(theta[1]), t0=t0)


# ---------------------------------------------------------------------------
# Trajectory reparametrization
# ---------------------------------------------------------------------------

def evaluate_trajectory(traj, u, steps=20):
    """Shape of a trajectory at reference time u.

    Geodesics (and geodesic-parallel trajectories) evaluate in closed form and
    extrapolate freely; sampled trajectories interpolate vertices linearly
    between samples and refuse queries outside their span.
    """
    if isinstance(traj, Geodesic):
        return shape_at(traj, u, steps)
    if getattr(traj, "geodesic", None) is not None:
        return shape_at(traj.geodesic, u, steps)
    samples = traj.samples
    times = np.array([t for t, _ in samples])
    if len(samples) == 0:
        raise InterpolationRangeError("trajectory has no samples")
    k = int(np.searchsorted(times, u))
    if k < len(times) and abs(times[k] - u) < 1e-9:
        return samples[k][1]
    if k > 0 and abs(times[k - 1] - u) < 1e-9:
        return samples[k - 1][1]
    if k == 0 or k == len(times):
        raise InterpolationRangeError(
            f"query time {u} outside sampled span [{times[0]}, {times[-1]}]"
        )
    t0_, s0 = samples[k - 1]
    t1_, s1 = samples[k]
    lam = (u - t0_) / (t1_ - t0_)
    verts = (1.0 - lam) * s0.concat_vertices() + lam * s1.concat_vertices()
    return s0.with_concat_vertices(verts)


def reparametrize_trajectory(traj, warp, query_times, steps=20):
    """Evaluate a trajectory at psi(t) for each subject-time query."""
    out = []
    for t in query_times:
        out.append((float(t), evaluate_trajectory(traj, float(psi(t, warp)), steps)))
    return out


# ---------------------------------------------------------------------------
# Score file I/O
# ---------------------------------------------------------------------------

def read_scores_csv(path):
    """Read 'subject_id,age,score' rows into per-subject ScoreSeries."""
    rows = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        required = {"subject_id", "age", "score"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise InvalidInputError(
                f"scores CSV must have columns {sorted(required)}, "
                f"got {reader.fieldnames}"
            )
        for row in reader:
            rows.setdefault(row["subject_id"], []).append(
                (float(row["age"]), float(row["score"]))
            )
    out = {}
    for sid, pairs in rows.items():
        pairs.sort()
        out[sid] = ScoreSeries(np.array([p[0] for p in pairs]),
                               np.array([p[1] for p in pairs]))
    return out
