"""Synthetic longitudinal cohort generator.

Every subject is an exp-parallel of one reference geodesic (random matching
momenta) watched through a random affine time warp; visit meshes get i.i.d.
vertex jitter and scores are the reference curve at warped times plus noise.
The truth manifest records every latent parameter, so end-to-end experiments
have exact ground truth.
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .deformation import DeformationParams, Geodesic, load_geodesic, save_geodesic
from .errors import ValidationError
from .kernels import KernelConfig
from .mesh import ShapeComplex, load_mesh, make_icosphere, save_mesh
from .timewarp import ReferenceCurve, ScoreSeries, TimeWarp, psi
from .transport import exp_parallelize


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    n_subjects: int = 10
    subdivisions: int = 2
    radii: tuple = (6.0, 5.0)
    centers: tuple = ((-8.0, 0.0, 0.0), (8.0, 0.0, 0.0))
    labels: tuple = ("left_hippocampus", "right_hippocampus")
    control_shape: tuple = (4, 2, 2)          # grid counts per axis, 16 points
    sigma_V: float = 5.0
    sigma_W: float = 3.0
    reference_momenta_scale: float = 0.25     # per-year, mm
    matching_scale: float = 0.4
    alpha_range: tuple = (0.5, 2.0)
    tau_range: tuple = (-3.0, 3.0)
    # when set, tau is derived so the baseline lands at stage t0 + s0 with
    # s0 ~ U(stage_offset_range); subjects then enter at spread-out stages
    stage_offset_range: tuple | None = None
    reference_baseline_age: float = 70.0
    reference_span_years: float = 12.0
    baseline_age_range: tuple = (69.0, 71.0)
    visit_gap: float = 1.0
    visits_per_subject: int = 7
    vertex_noise: float = 0.0
    score_noise: float = 0.0
    curve_mid_offset: float = 3.0             # reference curve midpoint after baseline
    curve_scale: float = 2.0

    def __post_init__(self):
        if len(self.radii) != len(self.centers) or len(self.radii) != len(self.labels):
            raise ValidationError("radii, centers and labels must align")
        if self.visits_per_subject < 1 or self.n_subjects < 1:
            raise ValidationError("need at least one subject and one visit")
        if any(r <= 0 for r in self.radii):
            raise ValidationError("radii must be positive")


@dataclass
class SubjectRecord:
    subject_id: str
    alpha: float
    tau: float
    t0: float
    baseline_age: float
    visit_ages: list
    visits: list                      # observed ShapeComplex per visit
    scores: ScoreSeries
    matching: np.ndarray              # latent matching momenta

    @property
    def warp(self):
        return TimeWarp(self.alpha, self.tau, self.t0)


@dataclass
class Cohort:
    reference: Geodesic
    curve: ReferenceCurve
    reference_scores: ScoreSeries
    subjects: list
    config: SimConfig | None = None


def _subject_rng(seed, index):
    # index 0 is the reference stream; subject i uses index i + 1
    return np.random.default_rng(np.random.SeedSequence(entropy=(seed, index)))


def build_template(config):
    meshes = tuple(
        make_icosphere(r, center, config.subdivisions, label)
        for r, center, label in zip(config.radii, config.centers, config.labels)
    )
    return ShapeComplex(meshes)


def _control_points(template, counts, pad):
    v = template.concat_vertices()
    lo, hi = v.min(axis=0) - pad, v.max(axis=0) + pad
    axes = [np.linspace(lo[d], hi[d], counts[d]) for d in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)


def make_cohort(config):
    """Build the cohort in memory (no disk I/O)."""
    kernel = KernelConfig(config.sigma_V, config.sigma_W)
    template = build_template(config)
    cps = _control_points(template, config.control_shape, pad=0.0)

    rng_ref = _subject_rng(config.seed, 0)
    beta_ref = rng_ref.normal(0.0, config.reference_momenta_scale, cps.shape)
    t0 = config.reference_baseline_age
    reference = Geodesic(
        template=template,
        params=DeformationParams(cps, beta_ref, kernel),
        t_ref=t0,
        span=(t0, t0 + config.reference_span_years),
    )
    curve = ReferenceCurve(t_mid=t0 + config.curve_mid_offset,
                           scale=config.curve_scale)

    ref_ages = t0 + config.visit_gap * np.arange(
        int(round(config.reference_span_years / config.visit_gap)) + 1
    )
    ref_scores = curve.value(ref_ages)
    if config.score_noise > 0:
        ref_scores = np.clip(
            ref_scores + rng_ref.normal(0, config.score_noise, ref_scores.shape),
            0.0, 1.0,
        )
    reference_scores = ScoreSeries(ref_ages, ref_scores)

    subjects = []
    for i in range(config.n_subjects):
        rng = _subject_rng(config.seed, i + 1)
        sid = f"s{i:03d}"
        matching = rng.normal(0.0, config.matching_scale, cps.shape)
        alpha = float(np.exp(rng.uniform(*np.log(config.alpha_range))))
        baseline = float(rng.uniform(*config.baseline_age_range))
        if config.stage_offset_range is not None:
            s0 = float(rng.uniform(*config.stage_offset_range))
            tau = baseline - t0 - s0 / alpha
        else:
            tau = float(rng.uniform(*config.tau_range))
        warp = TimeWarp(alpha, tau, t0)
        ages = baseline + config.visit_gap * np.arange(config.visits_per_subject)
        warped = psi(ages, warp)
        latent = exp_parallelize(reference, matching, list(warped))
        visits = []
        for k, (_, shape) in enumerate(latent.samples):
            verts = shape.concat_vertices()
            if config.vertex_noise > 0:
                verts = verts + rng.normal(0, config.vertex_noise, verts.shape)
            visits.append(shape.with_concat_vertices(verts))
        scores = curve.value(warped)
        if config.score_noise > 0:
            scores = np.clip(scores + rng.normal(0, config.score_noise, scores.shape),
                             0.0, 1.0)
        subjects.append(SubjectRecord(
            subject_id=sid, alpha=alpha, tau=tau, t0=t0,
            baseline_age=baseline, visit_ages=[float(a) for a in ages],
            visits=visits, scores=ScoreSeries(ages, scores), matching=matching,
        ))
    return Cohort(reference=reference, curve=curve,
                  reference_scores=reference_scores, subjects=subjects,
                  config=config)


def simulate_cohort(config, out_dir):
    """Generate a cohort and write the on-disk dataset; returns the Cohort.

    Layout: subjects/<id>/visit_<k>_<label>.vtk, scores.csv, truth.json and
    the reference geodesic under reference/.
    """
    cohort = make_cohort(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_geodesic(cohort.reference, out / "reference")

    score_rows = [("reference", t, s) for t, s in
                  zip(cohort.reference_scores.times, cohort.reference_scores.scores)]
    truth_subjects = {}
    for rec in cohort.subjects:
        sdir = out / "subjects" / rec.subject_id
        sdir.mkdir(parents=True, exist_ok=True)
        visit_files = []
        for k, shape in enumerate(rec.visits):
            files = []
            for mesh in shape:
                name = f"visit_{k}_{mesh.label}.vtk"
                save_mesh(mesh, sdir / name)
                files.append({"label": mesh.label, "path": name})
            visit_files.append(files)
        for t, s in zip(rec.scores.times, rec.scores.scores):
            score_rows.append((rec.subject_id, t, s))
        truth_subjects[rec.subject_id] = {
            "alpha": rec.alpha,
            "tau": rec.tau,
            "t0": rec.t0,
            "baseline_age": rec.baseline_age,
            "visit_ages": rec.visit_ages,
            "visit_files": visit_files,
            "matching": rec.matching.tolist(),
        }

    with open(out / "scores.csv", "w") as f:
        f.write("subject_id,age,score\n")
        for sid, t, s in score_rows:
            f.write(f"{sid},{float(t)!r},{float(s)!r}\n")

    truth = {
        "config": _config_to_dict(config),
        "curve": cohort.curve.to_dict(),
        "reference_visit_ages": [float(t) for t in cohort.reference_scores.times],
        "subjects": truth_subjects,
    }
    with open(out / "truth.json", "w") as f:
        json.dump(truth, f, indent=2, sort_keys=True)
    return cohort


def _config_to_dict(config):
    d = asdict(config)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def load_cohort(path):
    """Read a simulated cohort back from disk."""
    path = Path(path)
    with open(path / "truth.json") as f:
        truth = json.load(f)
    reference = load_geodesic(path / "reference")
    curve = ReferenceCurve.from_dict(truth["curve"])
    from .timewarp import read_scores_csv

    all_scores = read_scores_csv(path / "scores.csv")
    subjects = []
    for sid in sorted(truth["subjects"]):
        entry = truth["subjects"][sid]
        visits = []
        for files in entry["visit_files"]:
            meshes = tuple(
                load_mesh(path / "subjects" / sid / item["path"], label=item["label"])
                for item in files
            )
            visits.append(ShapeComplex(meshes))
        subjects.append(SubjectRecord(
            subject_id=sid,
            alpha=float(entry["alpha"]),
            tau=float(entry["tau"]),
            t0=float(entry["t0"]),
            baseline_age=float(entry["baseline_age"]),
            visit_ages=[float(a) for a in entry["visit_ages"]],
            visits=visits,
            scores=all_scores[sid],
            matching=np.asarray(entry["matching"], dtype=float),
        ))
    return Cohort(reference=reference, curve=curve,
                  reference_scores=all_scores["reference"], subjects=subjects,
                  config=None)
