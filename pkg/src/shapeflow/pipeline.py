"""Prediction protocols, evaluation tables and rank statistics.

Four ways to predict follow-up shapes: carry the last learning visit forward
(naive), extrapolate a per-subject geodesic regression, or transfer a
reference trajectory by exp- or geodesic-parallelization, optionally
reparametrized by score-fitted time warps.  Dice tables and two-sided
Mann-Whitney tests score the outcome.
"""

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from math import erfc, sqrt

import numpy as np

from .deformation import Geodesic, shape_at, state_at
from .errors import ConfigurationError, InvalidInputError, PairingError
from .estimation import FitConfig, Observation, register, regress
from .mesh import dice
from .timewarp import (
    TimeWarp,
    compose_warps,
    fit_timewarp,
    invert_warp,
    psi,
)
from .transport import exp_parallelize, geodesic_parallelize

TRANSFER_METHODS = ("exp_parallel", "geod_parallel")
STAR_THRESHOLDS = (0.05, 0.01, 0.001, 0.0001)

# baseline matching does not need the tight tolerances of a full regression
MATCHING_FIT = FitConfig(max_iters=80, tol=1e-5)


@dataclass
class PredictionTask:
    method: str                       # naive | extrapolate | exp_parallel | geod_parallel
    learning: list                    # Observation list, ordered by age
    target_times: list
    reparam: bool = False
    reference: Geodesic | None = None
    subject_scores: object = None     # ScoreSeries, reparam only
    reference_scores: object = None
    curve: object = None              # ReferenceCurve
    fit_config: FitConfig | None = None
    steps: int = 20
    rungs_per_year: int = 10
    matching: np.ndarray | None = None   # precomputed matching momenta at c(u_b)

    def __post_init__(self):
        if self.method not in ("naive", "extrapolate") + TRANSFER_METHODS:
            raise InvalidInputError(f"unknown method {self.method!r}")
        if not self.learning:
            raise InvalidInputError("need at least one learning visit")
        if self.method in TRANSFER_METHODS and self.reference is None:
            raise ConfigurationError(f"{self.method} requires a reference geodesic")
        if self.reparam:
            if self.method == "extrapolate":
                raise ConfigurationError("reparam applies to transfer methods")
            if self.method in TRANSFER_METHODS and (
                self.subject_scores is None or self.reference_scores is None
                or self.curve is None
            ):
                raise ConfigurationError(
                    "reparam needs subject scores, reference scores and a curve"
                )


def _subject_to_reference_map(task):
    """Affine map from subject age to reference age.

    Raw mode aligns the baselines; reparam composes the two score warps.
    """
    t_b = task.learning[0].t
    ref = task.reference
    if not task.reparam:
        # u(t) = ref.t_ref + (t - t_b)
        return TimeWarp(alpha=1.0, tau=t_b - ref.t_ref, t0=ref.t_ref)
    t0 = ref.t_ref
    warp_s = fit_timewarp(task.subject_scores, task.curve, t0)
    warp_r = fit_timewarp(task.reference_scores, task.curve, t0)
    return compose_warps(invert_warp(warp_r), warp_s)


def predict_with_info(task):
    """Run one prediction task; returns (samples, info dict)."""
    info = {"clamped": False}
    learning = sorted(task.learning, key=lambda o: o.t)
    times = list(task.target_times)

    if task.method == "naive":
        last = learning[-1].shape
        return [(float(t), last) for t in times], info

    if task.method == "extrapolate":
        result = regress(learning, task.fit_config)
        info["fit"] = result
        return [(float(t), shape_at(result.geodesic, t, task.steps))
                for t in times], info

    ref = task.reference
    to_ref = _subject_to_reference_map(task)
    t_b = learning[0].t
    u_b = float(psi(t_b, to_ref))
    lo, hi = ref.span
    if not (lo <= u_b <= hi):
        info["clamped"] = True
        u_b = min(max(u_b, lo), hi)
    info["baseline_ref_time"] = u_b

    if task.matching is not None:
        momenta = np.asarray(task.matching, dtype=float)
    else:
        c_b, _ = state_at(ref, u_b, task.steps)
        source = shape_at(ref, u_b, task.steps)
        cfg = task.fit_config or MATCHING_FIT
        cfg = FitConfig(**{**cfg.__dict__, "control_points": c_b,
                           "optimize_template": False})
        result = register(source, learning[0].shape, cfg)
        info["matching"] = result
        momenta = result.params.momenta
    u_times = [float(psi(t, to_ref)) for t in times]

    if task.method == "exp_parallel":
        traj = exp_parallelize(ref, momenta, u_times,
                               baseline_time=u_b,
                               rungs_per_year=task.rungs_per_year,
                               steps=task.steps)
    else:
        traj = geodesic_parallelize(ref, momenta, u_times,
                                    baseline_time=u_b, steps=task.steps)
    by_u = {u: s for u, s in traj.samples}
    return [(float(t), by_u[u]) for t, u in zip(times, u_times)], info


def predict(task):
    """Predicted (time, shape) samples for a task."""
    return predict_with_info(task)[0]


# ---------------------------------------------------------------------------
# Evaluation tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalRow:
    subject: str
    method: str
    horizon: float
    dice: float
    flags: str = ""


@dataclass
class EvalTable:
    rows: list = field(default_factory=list)

    def methods(self):
        return sorted({r.method for r in self.rows})

    def horizons(self):
        return sorted({r.horizon for r in self.rows})

    def samples(self, method, horizon):
        return [r.dice for r in self.rows
                if r.method == method and r.horizon == horizon]

    def mean(self, method, horizon):
        s = self.samples(method, horizon)
        return float(np.mean(s)) if s else float("nan")

    def count(self, method, horizon):
        return len(self.samples(method, horizon))

    def p_value(self, method_a, method_b, horizon):
        a = self.samples(method_a, horizon)
        b = self.samples(method_b, horizon)
        return mann_whitney_u(a, b)[1]

    def to_csv(self, path, baseline_method="naive"):
        """Aggregate matrix: one row per method, one column per horizon."""
        horizons = self.horizons()
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["method"]
                       + [f"h{h:+g}" for h in horizons]
                       + [f"n_h{h:+g}" for h in horizons]
                       + [f"p_vs_{baseline_method}_h{h:+g}" for h in horizons])
            for m in self.methods():
                means = [f"{self.mean(m, h):.4f}" for h in horizons]
                ns = [str(self.count(m, h)) for h in horizons]
                ps = []
                for h in horizons:
                    if m == baseline_method:
                        ps.append("")
                    else:
                        ps.append(f"{self.p_value(m, baseline_method, h):.6g}")
                w.writerow([m] + means + ns + ps)

    def rows_to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["subject", "method", "horizon", "dice", "flags"])
            for r in sorted(self.rows, key=lambda r: (r.subject, r.method, r.horizon)):
                w.writerow([r.subject, r.method, f"{r.horizon:g}",
                            f"{r.dice:.6f}", r.flags])

    def render_text(self, baseline_method="naive", title="Dice by method and horizon"):
        horizons = self.horizons()
        lines = [title, ""]
        header = f"{'method':<22}" + "".join(f"{'+%g yr' % h:>12}" for h in horizons)
        lines.append(header)
        lines.append(f"{'N':<22}" + "".join(
            f"{self.count(baseline_method, h):>12}" for h in horizons))
        for m in self.methods():
            cells = []
            for h in horizons:
                mean = self.mean(m, h)
                stars = ""
                if m != baseline_method and self.count(m, h) and \
                        self.count(baseline_method, h):
                    stars = significance_stars(
                        self.p_value(m, baseline_method, h))
                cells.append(f"{mean:.3f}{stars}".rjust(12))
            lines.append(f"{m:<22}" + "".join(cells))
        lines.append("")
        lines.append("Two-sided Mann-Whitney vs "
                     f"{baseline_method}; stars at p < {list(STAR_THRESHOLDS)}.")
        return "\n".join(lines)


def evaluate(predictions, ground_truth_visits, voxel_size=1.0, baselines=None,
             flags=None, time_tolerance=0.05):
    """Dice table from predictions keyed by (subject, method).

    ground_truth_visits maps subject -> [(t, ShapeComplex), ...]; horizons are
    measured from the subject baseline when given, else from the first truth
    visit.
    """
    rows = []
    for (subject, method), samples in sorted(predictions.items()):
        truths = ground_truth_visits[subject]
        base = baselines[subject] if baselines else truths[0][0]
        flag = (flags or {}).get((subject, method), "")
        for t, shape in samples:
            matches = [s for tt, s in truths if abs(tt - t) <= time_tolerance]
            if not matches:
                raise PairingError(
                    f"no ground-truth visit within {time_tolerance} yr of "
                    f"t={t} for subject {subject}"
                )
            d = dice(shape, matches[0], voxel_size)
            rows.append(EvalRow(subject=subject, method=method,
                                horizon=round(t - base, 3), dice=d, flags=flag))
    return EvalTable(rows=rows)


# ---------------------------------------------------------------------------
# Mann-Whitney U
# ---------------------------------------------------------------------------

def _rankdata(values):
    """Midranks."""
    v = np.asarray(values, dtype=float)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v))
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _exact_sf(n1, n2, u_big):
    """P(U >= u_big) under the exact null (no ties), via dynamic programming."""
    # ways[u] for sample sizes (m, n): ways(m, n, u) = ways(m-1, n, u-n) + ways(m, n-1, u)
    ways = {(0, 0): np.array([1.0])}

    def build(m, n):
        if (m, n) in ways:
            return ways[(m, n)]
        out = np.zeros(m * n + 1)
        if m == 0 or n == 0:
            out[0] = 1.0
        else:
            a = build(m - 1, n)
            b = build(m, n - 1)
            out[n:] += a[: m * n + 1 - n]
            out[: m * (n - 1) + 1] += b
        ways[(m, n)] = out
        return out

    dist = build(n1, n2)
    total = dist.sum()
    k = int(np.ceil(u_big - 1e-9))
    k = max(0, min(k, len(dist)))
    return float(dist[k:].sum() / total)


def mann_whitney_u(sample_a, sample_b, method="auto"):
    """Two-sided Mann-Whitney U test.

    Exact null distribution when n_a * n_b <= 400 (or method='exact'),
    otherwise normal approximation with tie and continuity corrections.
    Returns (U, p) where U counts pairs with a > b (midrank convention).
    """
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    n1, n2 = len(a), len(b)
    if n1 == 0 or n2 == 0:
        raise InvalidInputError("both samples must be non-empty")
    ranks = _rankdata(np.concatenate([a, b]))
    r1 = float(ranks[:n1].sum())
    u1 = r1 - n1 * (n1 + 1) / 2.0          # pairs with a > b
    u2 = n1 * n2 - u1
    u_big = max(u1, u2)

    use_exact = method == "exact" or (method == "auto" and n1 * n2 <= 400)
    if use_exact:
        p = min(1.0, 2.0 * _exact_sf(n1, n2, u_big))
        return u1, p

    n = n1 + n2
    _, t_counts = np.unique(np.concatenate([a, b]), return_counts=True)
    tie_term = float(np.sum(t_counts**3 - t_counts))
    correction = 1.0 - tie_term / (n**3 - n) if n > 1 else 1.0
    if correction <= 0.0:
        return u1, 1.0
    sd = sqrt(correction * n1 * n2 * (n + 1) / 12.0)
    z = (u_big - n1 * n2 / 2.0 - 0.5) / sd
    p = min(1.0, max(0.0, erfc(z / sqrt(2.0))))
    return u1, p


def significance_stars(p):
    stars = ""
    for thr in STAR_THRESHOLDS:
        if p < thr:
            stars += "*"
    return stars


# ---------------------------------------------------------------------------
# Experiment drivers
# ---------------------------------------------------------------------------

def _worker_count():
    return max(1, int(os.environ.get("SHAPEFLOW_THREADS", "1")))


def _map_subjects(fn, records):
    """Run per-subject closures, possibly on a thread pool; order-stable."""
    workers = _worker_count()
    if workers == 1:
        return [fn(rec) for rec in records]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, records))


def run_transfer_experiment(cohort, methods=None, voxel_size=1.0,
                            fit_config=None, steps=20, rungs_per_year=10,
                            max_horizons=None):
    """Table-2-style experiment: baseline-only transfer versus naive.

    Learning data per subject is the baseline visit (plus scores for the
    reparametrized variants); every later visit is predicted and scored.
    """
    if methods is None:
        methods = ["naive", "exp_parallel", "geod_parallel",
                   "exp_parallel_reparam", "geod_parallel_reparam"]

    def run_subject(rec):
        baseline = Observation(rec.visit_ages[0], rec.visits[0])
        held_out = list(zip(rec.visit_ages[1:], rec.visits[1:]))
        if max_horizons is not None:
            held_out = held_out[:max_horizons]
        target_times = [t for t, _ in held_out]
        preds = {}
        flags = {}
        cached_matching = {}             # one registration per reparam mode
        for method in methods:
            base_method = method.replace("_reparam", "")
            reparam = method.endswith("_reparam")
            task = PredictionTask(
                method=base_method,
                learning=[baseline],
                target_times=target_times,
                reparam=reparam,
                reference=cohort.reference,
                subject_scores=rec.scores if reparam else None,
                reference_scores=cohort.reference_scores if reparam else None,
                curve=cohort.curve if reparam else None,
                fit_config=fit_config,
                steps=steps,
                rungs_per_year=rungs_per_year,
                matching=cached_matching.get(reparam) if base_method in
                TRANSFER_METHODS else None,
            )
            samples, info = predict_with_info(task)
            if "matching" in info:
                cached_matching[reparam] = info["matching"].params.momenta
            preds[(rec.subject_id, method)] = samples
            flags[(rec.subject_id, method)] = "clamped" if info["clamped"] else ""
        truths = {rec.subject_id: held_out}
        baselines = {rec.subject_id: rec.visit_ages[0]}
        return evaluate(preds, truths, voxel_size, baselines, flags)

    tables = _map_subjects(run_subject, cohort.subjects)
    rows = [r for t in tables for r in t.rows]
    rows.sort(key=lambda r: (r.subject, r.method, r.horizon))
    return EvalTable(rows=rows)


def run_extrapolation_experiment(cohort, n_learning=2, voxel_size=1.0,
                                 fit_config=None, steps=20,
                                 control_spacing=10.0, control_pad=5.0):
    """Table-1-style experiment: per-subject regression extrapolation vs naive.

    Unless fit_config pins a layout, control points sit on a coarse grid over
    each subject's baseline (control_spacing/control_pad).
    """
    from .estimation import control_grid

    def run_subject(rec):
        if len(rec.visit_ages) <= n_learning:
            return EvalTable()
        learning = [Observation(t, s) for t, s in
                    zip(rec.visit_ages[:n_learning], rec.visits[:n_learning])]
        held_out = list(zip(rec.visit_ages[n_learning:], rec.visits[n_learning:]))
        target_times = [t for t, _ in held_out]
        cfg = fit_config or FitConfig(max_iters=80, tol=1e-6)
        if cfg.control_points is None and cfg.control_spacing is None:
            cps = control_grid(learning[0].shape, control_spacing, pad=control_pad)
            cfg = FitConfig(**{**cfg.__dict__, "control_points": cps})
        preds = {}
        for method in ("naive", "extrapolate"):
            task = PredictionTask(method=method, learning=learning,
                                  target_times=target_times,
                                  fit_config=cfg, steps=steps)
            preds[(rec.subject_id, method)] = predict(task)
        return evaluate(preds, {rec.subject_id: held_out}, voxel_size,
                        {rec.subject_id: rec.visit_ages[0]})

    tables = _map_subjects(run_subject, cohort.subjects)
    rows = [r for t in tables for r in t.rows]
    rows.sort(key=lambda r: (r.subject, r.method, r.horizon))
    return EvalTable(rows=rows)
