"""Command-line entry points.

Exit codes: 0 success, 2 validation/configuration error, 3 numerical
divergence, 64 usage error.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import cohort as cohort_mod
from . import deformation, estimation, pipeline, timewarp
from .errors import (
    ConfigurationError,
    DivergenceError,
    InterpolationRangeError,
    InvalidInputError,
    MeshParseError,
    PairingError,
    ValidationError,
)
from .kernels import KernelConfig
from .mesh import ShapeComplex, load_mesh, save_mesh

USAGE_EXIT = 64
VALIDATION_EXIT = 2
DIVERGENCE_EXIT = 3

_VALIDATION_ERRORS = (
    InvalidInputError,
    ValidationError,
    MeshParseError,
    ConfigurationError,
    PairingError,
    InterpolationRangeError,
    FileNotFoundError,
    KeyError,
    json.JSONDecodeError,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_EXIT, f"{self.prog}: error: {message}\n")


def _load_json(path):
    with open(path) as f:
        return json.load(f)


def _fit_config(args, overrides=None):
    doc = _load_json(args.config) if getattr(args, "config", None) else {}
    doc.update(overrides or {})
    kernel_doc = doc.pop("kernel", {})
    kernel = KernelConfig(
        sigma_V=float(kernel_doc.get("sigma_V", 5.0)),
        sigma_W=float(kernel_doc.get("sigma_W", 3.0)),
    )
    cp = doc.pop("control_points", None)
    try:
        return estimation.FitConfig(
            kernel=kernel,
            control_points=np.asarray(cp, dtype=float) if cp is not None else None,
            **doc,
        )
    except TypeError as exc:
        raise ConfigurationError(f"bad fit config: {exc}") from exc


def _load_complex(entries, base=None):
    """entries: list of mesh paths or {label, path} dicts."""
    meshes = []
    for entry in entries:
        if isinstance(entry, str):
            path = Path(entry) if base is None else Path(base) / entry
            meshes.append(load_mesh(path))    # label from the file title line
        else:
            path = Path(entry["path"]) if base is None else Path(base) / entry["path"]
            meshes.append(load_mesh(path, label=entry["label"]))
    return ShapeComplex(tuple(meshes))


def _save_complex(shape, directory, stem):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for mesh in shape:
        p = directory / f"{stem}_{mesh.label}.vtk"
        save_mesh(mesh, p)
        paths.append({"label": mesh.label, "path": p.name})
    return paths


def _steps_for(args, dt):
    return max(1, int(np.ceil(args.steps_per_year * abs(dt)))) \
        if args.steps_per_year else deformation.DEFAULT_STEPS


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _sim_config(args):
    doc = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        doc["seed"] = args.seed
    doc = {k: (tuple(v) if isinstance(v, list) else v) for k, v in doc.items()}
    try:
        return cohort_mod.SimConfig(**doc)
    except TypeError as exc:
        raise ConfigurationError(f"bad simulator config: {exc}") from exc


def cmd_simulate(args):
    cohort_mod.simulate_cohort(_sim_config(args), args.out)
    print(f"cohort written to {args.out}")
    return 0


def _load_observations(manifest, base):
    """Accepts [[age, mesh-path], ...] or {"visits": [{age, mesh|meshes}, ...]}."""
    observations = []
    visits = manifest["visits"] if isinstance(manifest, dict) else manifest
    for visit in visits:
        if isinstance(visit, dict):
            age = float(visit["age"])
            entries = visit["meshes"] if "meshes" in visit else [visit["mesh"]]
        else:
            age, path = visit
            age, entries = float(age), [path]
        observations.append(estimation.Observation(age, _load_complex(entries, base)))
    return observations


def cmd_regress(args):
    manifest = _load_json(args.observations)
    base = Path(args.observations).parent
    observations = _load_observations(manifest, base)
    cfg = _fit_config(args)
    if args.steps_per_year:
        span = max(o.t for o in observations) - min(o.t for o in observations)
        cfg.steps = max(cfg.steps, int(np.ceil(args.steps_per_year * max(span, 1.0))))
    result = estimation.regress(observations, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    deformation.save_geodesic(result.geodesic, out)
    deformation.save_params(result.geodesic.params, out / "params.json")
    with open(out / "iterations.csv", "w") as f:
        f.write("iteration,objective,step,halvings\n")
        for rec in result.iterations:
            f.write(f"{rec.iteration},{rec.objective!r},{rec.step!r},{rec.halvings}\n")
    with open(out / "summary.json", "w") as f:
        json.dump({
            "final_objective": result.final_objective,
            "residuals": result.residuals.tolist(),
            "converged": result.converged,
        }, f, indent=2, sort_keys=True)
    print(f"regression written to {out}")
    return 0


def cmd_register(args):
    source = _load_complex(json.loads(args.source) if args.source.startswith("[")
                           else [args.source])
    target = _load_complex(json.loads(args.target) if args.target.startswith("[")
                           else [args.target])
    cfg = _fit_config(args)
    result = estimation.register(source, target, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    doc = result.params.to_dict()
    doc.update({
        "final_objective": result.final_objective,
        "residual": result.residual,
        "converged": result.converged,
    })
    with open(out, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
    print(f"matching written to {out}")
    return 0


def cmd_shoot(args):
    params = deformation.load_params(args.params)
    template = _load_complex([args.template])
    dt = args.time
    steps = _steps_for(args, dt)
    geod = deformation.Geodesic(template=template, params=params,
                                t_ref=0.0, span=(min(0.0, dt), max(0.0, dt)))
    shape = deformation.shape_at(geod, dt, steps)
    _save_complex(shape, Path(args.out).parent or Path("."), Path(args.out).stem)
    print(f"deformed shape written next to {args.out}")
    return 0


def cmd_transport(args):
    reference = deformation.load_geodesic(args.reference)
    match_doc = _load_json(args.matching)
    matching = np.asarray(match_doc["momenta"], dtype=float)
    times = [float(t) for t in args.times.split(",")]
    if args.mode == "exp":
        traj = pipeline.exp_parallelize(reference, matching, times)
    else:
        traj = pipeline.geodesic_parallelize(reference, matching, times)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"mode": traj.mode, "samples": []}
    for k, (t, shape) in enumerate(traj.samples):
        files = _save_complex(shape, out, f"sample_{k}")
        manifest["samples"].append({"t": t, "meshes": files})
    with open(out / "trajectory.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    print(f"trajectory written to {out}")
    return 0


def cmd_fit_warp(args):
    series = timewarp.read_scores_csv(args.scores)[args.subject]
    curve = timewarp.ReferenceCurve.from_dict(_load_json(args.curve))
    if args.normalize:
        lo, hi = (float(x) for x in args.normalize.split(","))
        series = timewarp.ScoreSeries(series.times,
                                      (series.scores - lo) / (hi - lo))
    warp = timewarp.fit_timewarp(series, curve, args.t0)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    doc = warp.to_dict()
    if args.normalize:
        doc["normalization"] = {"min": lo, "max": hi}
    with open(out, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
    print(f"warp written to {out}")
    return 0


def cmd_predict(args):
    task_doc = _load_json(args.task)
    base = Path(args.task).parent
    learning = []
    for visit in task_doc["learning"]:
        entries = visit["meshes"] if "meshes" in visit else [visit["mesh"]]
        learning.append(
            estimation.Observation(float(visit["age"]), _load_complex(entries, base))
        )
    reference = None
    if task_doc.get("reference"):
        reference = deformation.load_geodesic(base / task_doc["reference"])
    scores = curve = subject_scores = reference_scores = None
    if task_doc.get("reparam"):
        scores = timewarp.read_scores_csv(base / task_doc["scores"])
        subject_scores = scores[task_doc["subject_id"]]
        reference_scores = scores[task_doc.get("reference_id", "reference")]
        curve = timewarp.ReferenceCurve.from_dict(task_doc["curve"])
    task = pipeline.PredictionTask(
        method=task_doc["method"],
        learning=learning,
        target_times=[float(t) for t in task_doc["target_times"]],
        reparam=bool(task_doc.get("reparam", False)),
        reference=reference,
        subject_scores=subject_scores,
        reference_scores=reference_scores,
        curve=curve,
    )
    samples = pipeline.predict(task)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"method": task_doc["method"], "samples": []}
    for k, (t, shape) in enumerate(samples):
        files = _save_complex(shape, out, f"pred_{k}")
        manifest["samples"].append({"t": t, "meshes": files})
    with open(out / "predictions.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    print(f"predictions written to {out}")
    return 0


def cmd_evaluate(args):
    pred_doc = _load_json(args.predictions)
    truth_doc = _load_json(args.truth)
    pred_base = Path(args.predictions).parent
    truth_base = Path(args.truth).parent
    preds = {}
    truths = {}
    for s in pred_doc["samples"]:
        preds.setdefault(("subject", pred_doc.get("method", "pred")), []).append(
            (float(s["t"]), _load_complex(s["meshes"], pred_base))
        )
    truths["subject"] = [
        (float(s["t"]), _load_complex(s["meshes"], truth_base))
        for s in truth_doc["samples"]
    ]
    table = pipeline.evaluate(preds, truths, args.voxel_size)
    table.rows_to_csv(args.out)
    print(f"evaluation written to {args.out}")
    return 0


def cmd_report(args):
    if args.cohort:
        cohort = cohort_mod.load_cohort(args.cohort)
    else:
        cohort = cohort_mod.make_cohort(_sim_config(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.experiment == "transfer":
        table = pipeline.run_transfer_experiment(cohort, voxel_size=args.voxel_size)
        stem = "table2_synthetic"
        title = "Transfer prediction Dice (synthetic cohort)"
    else:
        table = pipeline.run_extrapolation_experiment(
            cohort, n_learning=args.n_learning, voxel_size=args.voxel_size
        )
        stem = "table1_synthetic"
        title = "Regression extrapolation Dice (synthetic cohort)"
    table.to_csv(out / f"{stem}.csv")
    table.rows_to_csv(out / f"{stem}_rows.csv")
    with open(out / f"{stem}.txt", "w") as f:
        f.write(table.render_text(title=title) + "\n")
    print(f"report written to {out}")
    return 0


def build_parser():
    parser = _Parser(prog="shapeflow",
                     description="Longitudinal shape-trajectory engine")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--steps-per-year", type=int, default=6,
                       help="time discretization (6 = two months)")
        p.add_argument("--voxel-size", type=float, default=1.0)

    p = sub.add_parser("simulate", parents=[], help="generate a synthetic cohort")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("regress", help="fit a geodesic to a visit manifest")
    p.add_argument("--observations", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_regress)

    p = sub.add_parser("register", help="match one shape onto another")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("shoot", help="deform a template along stored momenta")
    p.add_argument("--params", required=True)
    p.add_argument("--template", required=True)
    p.add_argument("--time", type=float, default=1.0)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_shoot)

    p = sub.add_parser("transport", help="parallelize a trajectory to a subject")
    p.add_argument("--reference", required=True)
    p.add_argument("--matching", required=True)
    p.add_argument("--mode", choices=("exp", "geod"), required=True)
    p.add_argument("--times", required=True, help="comma-separated years")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_transport)

    p = sub.add_parser("fit-warp", help="fit (alpha, tau) from a score series")
    p.add_argument("--scores", required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--curve", required=True)
    p.add_argument("--t0", type=float, required=True)
    p.add_argument("--normalize", default=None, help="min,max raw score range")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_fit_warp)

    p = sub.add_parser("predict", help="run one prediction task")
    p.add_argument("--task", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="Dice a prediction manifest against truth")
    p.add_argument("--predictions", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="full synthetic experiment with tables")
    p.add_argument("--cohort", default=None, help="existing cohort directory")
    p.add_argument("--config", default=None, help="SimConfig JSON")
    p.add_argument("--experiment", choices=("transfer", "extrapolation"),
                   default="transfer")
    p.add_argument("--n-learning", type=int, default=2)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"shapeflow: divergence: {exc}", file=sys.stderr)
        return DIVERGENCE_EXIT
    except _VALIDATION_ERRORS as exc:
        print(f"shapeflow: error: {exc}", file=sys.stderr)
        return VALIDATION_EXIT


if __name__ == "__main__":
    sys.exit(main())
