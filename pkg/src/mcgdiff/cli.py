"""Command-line front end.

Subcommands: ``make-phantom``, ``train-score``, ``solve``, ``ablate`` and
``verify-geometry``. Every option can also come from a YAML run spec passed
with ``--spec``; explicit flags override the file. The seed is mandatory and
nothing is read from the environment.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import geometry
from . import io as mio
from . import rng as rng_mod
from .operators import ColorCoupling, Dense, InpaintingMask, Radon, WeightSpec, measure
from .phantoms import PHANTOM_KINDS, make_phantom
from .schedule import ParameterError, SdeKind, make_ve_schedule, make_vp_schedule, max_pairwise_distance
from .scores import (EmpiricalMixtureScore, GaussianSubspaceScore, MlpParams, load_model, save_model,
                     train_dsm, write_loss_log)
from .solvers import (GradientVariant, SamplerConfig, SamplerDivergence, solve_inverse, task_defaults)

METRICS_SCHEMA = "mcgdiff-metrics/1"
DIAG_SCHEMA = "mcgdiff-diagnostics/1"
METRIC_FIELDS = ["run_id", "task", "variant", "nfe", "alpha_prime", "mse", "psnr", "ssim", "mse_mc",
                 "tangency", "seconds"]
ABLATION_FIELDS = ["sweep", "value", "rep", "status"] + METRIC_FIELDS
TASKS = ("inpaint", "colorize", "ct", "custom-dense")

# variant -> (gradient variant, projection)
VARIANTS = {
    "mcg": (GradientVariant.MCG, True),
    "projection-only": (GradientVariant.NONE, True),
    "mcg-only": (GradientVariant.MCG, False),
    "matched-only": (GradientVariant.MATCHED, False),
    "matched": (GradientVariant.MATCHED, True),
    "unconditional": (GradientVariant.NONE, False),
}


@dataclass
class RunSpec:
    command: str
    seed: int | None = None
    out: str = "out"
    task: str = "inpaint"
    variant: str = "mcg"
    model: str | None = None
    image: str | None = None
    measurement: str | None = None
    shape: list | None = None
    noise_sigma: float = 0.0
    operator: dict = field(default_factory=dict)
    sampler: dict = field(default_factory=dict)
    # make-phantom / train-score
    kind: str | None = None
    size: int = 64
    count: int = 1000
    options: dict = field(default_factory=dict)
    data: str | None = None
    score_kind: str = "mlp"
    sde: str = "VP"
    n_levels: int = 1000
    training: dict = field(default_factory=dict)
    # ablate
    sweep: str | None = None
    values: list = field(default_factory=list)
    reps: int = 1
    workers: int = 1
    # verify-geometry
    negate_jacobian: bool = False
    samples: int = 100_000
    omit_timing: bool = False

    def validate(self):
        if self.seed is None:
            raise ParameterError("a seed is required (--seed or 'seed:' in the spec)")
        if self.command in ("solve", "ablate"):
            if self.task not in TASKS:
                raise ParameterError(f"unknown task {self.task!r}; expected one of {TASKS}")
            if self.variant not in VARIANTS:
                raise ParameterError(f"unknown variant {self.variant!r}; expected one of {tuple(VARIANTS)}")
            for key in ("model", "image", "measurement"):
                path = getattr(self, key)
                if path is not None and not Path(path).is_file():
                    raise ParameterError(f"{key} file not found: {path}")
            if self.model is None:
                raise ParameterError("solve needs --model")
            if self.image is None and self.measurement is None:
                raise ParameterError("solve needs --image (ground truth) or --measurement")
        if self.command == "ablate":
            if self.sweep not in ("nfe", "alpha"):
                raise ParameterError("sweep must be 'nfe' or 'alpha'")
            if len(self.values) < 2:
                raise ParameterError("a sweep needs at least two values")
        if self.command == "train-score" and (self.data is None or not Path(self.data).is_file()):
            raise ParameterError(f"training data not found: {self.data}")
        return self


def load_spec(path) -> dict:
    doc = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(doc, dict):
        raise ParameterError("run spec must be a mapping")
    unknown = set(doc) - {f.name for f in dataclasses.fields(RunSpec)}
    if unknown:
        raise ParameterError(f"unknown run-spec keys: {sorted(unknown)}")
    return doc


# ---------------------------------------------------------------------------
# Problem construction
# ---------------------------------------------------------------------------


def random_box(h: int, w: int, rng):
    """Box of half the side length, placed uniformly inside a margin of 1/16 of the side."""
    bw, bh = max(1, w // 2), max(1, h // 2)
    mx, my = max(1, round(w / 16)), max(1, round(h / 16))
    x0 = int(rng.integers(mx, max(mx, w - mx - bw) + 1))
    y0 = int(rng.integers(my, max(my, h - my - bh) + 1))
    return x0, y0, bw, bh


def build_operator(task: str, shape, op: dict, rng=None):
    h, w = shape[0], shape[1]
    if task == "inpaint":
        if "mask" in op:
            mode, val = mio.read_mask(op["mask"], shape)
            if mode == "indices":
                return InpaintingMask(val, int(np.prod(shape)))
            return InpaintingMask.from_box(shape, *val)
        box = op.get("box") or random_box(h, w, np.random.default_rng(rng))
        return InpaintingMask.from_box(shape, *box)
    if task == "colorize":
        return ColorCoupling(h, w)
    if task == "ct":
        if h != w:
            raise ParameterError("CT needs a square image")
        return Radon(h, int(op.get("views", 30)), op.get("detectors"))
    if "matrix" not in op:
        raise ParameterError("custom-dense needs operator.matrix")
    mat = mio.read_raw(op["matrix"])
    return Dense(mat.reshape(mat.shape[0], -1))


def variant_config(base: SamplerConfig, variant: str) -> SamplerConfig:
    grad, proj = VARIANTS[variant]
    return base.replace(gradient_variant=grad, use_projection=proj)


def sampler_config(spec: RunSpec) -> tuple[SamplerConfig, WeightSpec]:
    if spec.task in ("inpaint", "colorize", "ct"):
        base, W = task_defaults(spec.task)
    else:
        base, W = task_defaults("inpaint")
    overrides = dict(spec.sampler)
    if "weight" in overrides:
        W = WeightSpec(overrides.pop("weight"))
    fields = {f.name for f in dataclasses.fields(SamplerConfig)}
    bad = set(overrides) - fields
    if bad:
        raise ParameterError(f"unknown sampler keys: {sorted(bad)}")
    cfg = base.replace(**overrides, seed=int(spec.seed))
    return variant_config(cfg, spec.variant), W


def load_problem(spec: RunSpec):
    model = load_model(spec.model)
    x_true = None
    if spec.image is not None:
        x_true = mio.read_raw(spec.image)
        shape = x_true.shape
    else:
        if spec.shape is None:
            raise ParameterError("--shape is required with --measurement")
        shape = tuple(int(v) for v in spec.shape)
    H = build_operator(spec.task, shape, spec.operator, rng_mod.stream(spec.seed, rng_mod.DATA, 1))
    if H.n != model.dim:
        raise ParameterError(f"model dimension {model.dim} does not match the image ({H.n})")
    if spec.measurement is not None:
        y = mio.read_raw(spec.measurement).ravel()
    else:
        y = measure(H, x_true.ravel(), spec.noise_sigma, rng_mod.stream(spec.seed, rng_mod.DATA))
    return model, H, y, x_true, shape


def run_id(spec: RunSpec, cfg: SamplerConfig) -> str:
    return f"{spec.task}-{spec.variant}-n{cfg.n_steps}-a{cfg.alpha_prime:g}-s{cfg.seed}"


def metrics_row(spec, cfg, report) -> dict:
    return {
        "run_id": run_id(spec, cfg), "task": spec.task, "variant": spec.variant, "nfe": cfg.n_steps,
        "alpha_prime": repr(float(cfg.alpha_prime)), "mse": repr(report.mse), "psnr": repr(report.psnr),
        "ssim": repr(report.ssim), "mse_mc": repr(report.mse_mc), "tangency": repr(report.max_tangency),
        "seconds": "" if spec.omit_timing else f"{report.wall_time:.3f}",
    }


def append_rows(path: Path, fields, rows, schema) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        if new:
            fh.write(f"# schema: {schema}\n")
        writer = csv.DictWriter(fh, fieldnames=fields)
        if new:
            writer.writeheader()
        writer.writerows(rows)


def write_diagnostics(path: Path, diag) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {DIAG_SCHEMA}\n")
        writer = csv.writer(fh)
        writer.writerow(diag.dtype.names)
        for row in diag:
            writer.writerow([int(row[0])] + [repr(float(v)) for v in list(row)[1:]])


def write_image(out: Path, stem: str, x, shape) -> None:
    img = np.asarray(x).reshape(shape)
    mio.write_raw(out / f"{stem}.raw", img)
    mio.write_pgm16(out / f"{stem}.pgm", img)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_make_phantom(spec: RunSpec) -> int:
    if spec.kind not in PHANTOM_KINDS:
        raise ParameterError(f"unknown phantom kind {spec.kind!r}; expected one of {PHANTOM_KINDS}")
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    arrays = make_phantom(spec.kind, spec.size, spec.seed, count=spec.count, **spec.options)
    for name, arr in arrays.items():
        if arr.ndim == 3:
            arr = arr.reshape(arr.shape[0], -1)
        mio.write_raw(out / f"{name}.raw", arr)
        if name == "image":
            mio.write_pgm16(out / "image.pgm", arr)
    return 0


def cmd_train_score(spec: RunSpec) -> int:
    data = mio.read_raw(spec.data)
    data = data.reshape(data.shape[0], -1)
    kind = SdeKind(spec.sde.upper())
    if kind is SdeKind.VP:
        sched = make_vp_schedule(spec.n_levels)
    else:
        sigma_max = spec.options.get("sigma_max") or max_pairwise_distance(data)
        sched = make_ve_schedule(spec.n_levels, float(spec.options.get("sigma_min", 0.01)), float(sigma_max))
    out = Path(spec.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if spec.score_kind == "mixture":
        model = EmpiricalMixtureScore(data, sched)
    elif spec.score_kind == "gaussian":
        basis = mio.read_raw(spec.options["basis"])
        offset = mio.read_raw(spec.options["offset"]).ravel()
        model = GaussianSubspaceScore(offset, basis.reshape(offset.size, -1), float(spec.options.get("tau", 1.0)),
                                      sched)
    elif spec.score_kind == "mlp":
        params = MlpParams(**{k: (tuple(v) if k == "hidden" else v) for k, v in spec.training.items()})
        model = train_dsm(params, data, sched, seed=rng_mod.stream(spec.seed, rng_mod.TRAINING))
        write_loss_log(model, out.with_suffix(".loss.txt"))
    else:
        raise ParameterError(f"unknown score kind {spec.score_kind!r}")
    save_model(model, out)
    return 0


def _solve_once(spec: RunSpec, cfg: SamplerConfig, W, problem, out: Path):
    model, H, y, x_true, shape = problem
    image_shape = shape if len(shape) >= 2 else None
    report = solve_inverse(cfg, model.schedule, model, H, W, y,
                           None if x_true is None else x_true.ravel(), image_shape)
    out.mkdir(parents=True, exist_ok=True)
    write_image(out, "reconstruction", report.x0_hat, shape)
    write_diagnostics(out / "diagnostics.csv", report.diagnostics)
    return report


def cmd_solve(spec: RunSpec) -> int:
    cfg, W = sampler_config(spec)
    problem = load_problem(spec)
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        report = _solve_once(spec, cfg, W, problem, out)
    except SamplerDivergence as exc:
        (out / "FAILED").write_text(f"{exc}\n")
        if exc.diagnostics is not None:
            write_diagnostics(out / "diagnostics.csv", exc.diagnostics)
        raise
    append_rows(out / "metrics.csv", METRIC_FIELDS, [metrics_row(spec, cfg, report)], METRICS_SCHEMA)
    print(f"{run_id(spec, cfg)}: PSNR={report.psnr:.3f} SSIM={report.ssim:.4f} MSE_MC={report.mse_mc:.3e}")
    return 0


def cell_seed(seed: int, rep: int) -> int:
    return int(rng_mod.stream(seed, 4, rep).integers(0, 2 ** 63))


def _run_cell(args):
    spec, cfg, W, sweep, value, rep, out = args
    problem = load_problem(spec)
    row = {"sweep": sweep, "value": value, "rep": rep}
    try:
        report = _solve_once(spec, cfg, W, problem, out)
    except SamplerDivergence as exc:
        (out / "FAILED").parent.mkdir(parents=True, exist_ok=True)
        (out / "FAILED").write_text(f"{exc}\n")
        row.update({k: "" for k in METRIC_FIELDS}, run_id=run_id(spec, cfg), status=f"diverged@{exc.step}")
        return row
    row.update(metrics_row(spec, cfg, report), status="ok")
    return row


def cmd_ablate(spec: RunSpec) -> int:
    base, W = sampler_config(spec)
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    cells = []
    for value in spec.values:
        for rep in range(spec.reps):
            change = {"n_steps": int(value)} if spec.sweep == "nfe" else {"alpha_prime": float(value)}
            cfg = base.replace(seed=cell_seed(spec.seed, rep), **change)
            cells.append((spec, cfg, W, spec.sweep, value, rep, out / f"{spec.sweep}={value}" / f"rep{rep}"))
    if spec.workers > 1:
        with ProcessPoolExecutor(spec.workers) as pool:
            rows = list(pool.map(_run_cell, cells))
    else:
        rows = [_run_cell(c) for c in cells]
    table = out / "ablation.csv"
    if table.exists():
        table.unlink()
    append_rows(table, ABLATION_FIELDS, rows, METRICS_SCHEMA)
    for line in ablation_summary(spec, rows):
        print(line)
    return 0


def ablation_summary(spec: RunSpec, rows) -> list[str]:
    lines = []
    by_value = {}
    for row in rows:
        if row["status"] == "ok":
            by_value.setdefault(row["value"], []).append(float(row["mse"]))
        else:
            lines.append(f"{spec.sweep}={row['value']} rep{row['rep']}: {row['status']}")
    means = [(v, float(np.mean(by_value[v]))) for v in spec.values if v in by_value]
    for v, m in means:
        lines.append(f"{spec.sweep}={v}: mean MSE {m:.4e}")
    if spec.sweep == "nfe" and len(means) >= 2:
        (_, prev), (_, last) = means[-2], means[-1]
        verdict = "improves" if last < prev else "does not improve"
        lines.append(f"largest NFE {verdict} on the previous value ({last:.4e} vs {prev:.4e})")
    return lines


def cmd_verify_geometry(spec: RunSpec) -> int:
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    records = geometry.run_default_suite(int(spec.seed), negate_jacobian=spec.negate_jacobian,
                                         concentration_samples=int(spec.samples))
    by_check = {}
    for rec in records:
        by_check.setdefault(rec.check, []).append(rec)
    for name, recs in by_check.items():
        geometry.write_csv(recs, out / f"{name}.csv")
    failed = [r for r in records if not r.passed]
    for rec in records:
        flag = "PASS" if rec.passed else "FAIL"
        print(f"{flag} {rec.check} [{rec.params}] {rec.statistic:.3e} {rec.comparison} {rec.threshold:g}")
    return 1 if failed else 0


COMMANDS = {
    "make-phantom": cmd_make_phantom,
    "train-score": cmd_train_score,
    "solve": cmd_solve,
    "ablate": cmd_ablate,
    "verify-geometry": cmd_verify_geometry,
}


def _parse_box(text):
    parts = [int(v) for v in text.replace(",", " ").split()]
    if len(parts) != 4:
        raise argparse.ArgumentTypeError("box needs four integers: x0 y0 w h")
    return parts


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mcgdiff", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--spec", help="YAML run spec; flags override its entries")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        return sp

    mp = common(sub.add_parser("make-phantom", help="generate an image or point-cloud dataset"))
    mp.add_argument("--kind", choices=PHANTOM_KINDS)
    mp.add_argument("--size", type=int)
    mp.add_argument("--count", type=int)
    mp.add_argument("--variant", dest="opt_variant", choices=("classical", "modified"))
    mp.add_argument("--embed-side", dest="opt_embed_side", type=int)
    mp.add_argument("--n", dest="opt_n", type=int)
    mp.add_argument("--l", dest="opt_l", type=int)

    tp = common(sub.add_parser("train-score", help="fit or package a score model"))
    tp.add_argument("--data")
    tp.add_argument("--score-kind", choices=("mlp", "mixture", "gaussian"))
    tp.add_argument("--sde", choices=("VP", "VE", "vp", "ve"))
    tp.add_argument("--n-levels", type=int)
    tp.add_argument("--iterations", dest="train_iterations", type=int)
    tp.add_argument("--basis", dest="opt_basis")
    tp.add_argument("--offset", dest="opt_offset")
    tp.add_argument("--tau", dest="opt_tau", type=float)
    tp.add_argument("--sigma-max", dest="opt_sigma_max", type=float)

    for name, helptext in (("solve", "reconstruct from a measurement"), ("ablate", "run an NFE or alpha' sweep")):
        sp = common(sub.add_parser(name, help=helptext))
        sp.add_argument("--task", choices=TASKS)
        sp.add_argument("--variant", choices=tuple(VARIANTS))
        sp.add_argument("--model")
        sp.add_argument("--image")
        sp.add_argument("--measurement")
        sp.add_argument("--shape", type=int, nargs="+")
        sp.add_argument("--noise-sigma", type=float)
        sp.add_argument("--mask", dest="op_mask")
        sp.add_argument("--box", dest="op_box", type=_parse_box)
        sp.add_argument("--views", dest="op_views", type=int)
        sp.add_argument("--matrix", dest="op_matrix")
        sp.add_argument("--nfe", dest="sm_n_steps", type=int)
        sp.add_argument("--alpha-prime", dest="sm_alpha_prime", type=float)
        sp.add_argument("--weight", dest="sm_weight", choices=[w.value for w in WeightSpec])
        sp.add_argument("--corrector-steps", dest="sm_corrector_steps", type=int)
        sp.add_argument("--snr", dest="sm_snr", type=float)
        sp.add_argument("--placement", dest="sm_placement", choices=("predictor_and_corrector", "sweep"))
        sp.add_argument("--stop-gradient", dest="sm_stop_gradient", action="store_true", default=None)
        sp.add_argument("--omit-timing", action="store_true", default=None)
        if name == "ablate":
            sp.add_argument("--sweep", choices=("nfe", "alpha"))
            sp.add_argument("--values", type=float, nargs="+")
            sp.add_argument("--reps", type=int)
            sp.add_argument("--workers", type=int)

    gp = common(sub.add_parser("verify-geometry", help="run the manifold geometry checks"))
    gp.add_argument("--negate-jacobian", action="store_true", default=None)
    gp.add_argument("--samples", type=int)
    return p


def spec_from_args(args) -> RunSpec:
    doc = load_spec(args.spec) if args.spec else {}
    doc["command"] = args.command
    for prefix, key in (("opt_", "options"), ("op_", "operator"), ("sm_", "sampler"), ("train_", "training")):
        nested = dict(doc.get(key) or {})
        for name, val in vars(args).items():
            if name.startswith(prefix) and val is not None:
                nested[name[len(prefix):]] = val
        doc[key] = nested
    for name, val in vars(args).items():
        if val is None or name in ("spec", "command") or name.startswith(("opt_", "op_", "sm_", "train_")):
            continue
        doc[name] = val
    if doc.get("values") and doc.get("sweep") == "nfe":
        doc["values"] = [int(v) for v in doc["values"]]
    return RunSpec(**doc).validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = spec_from_args(args)
        return COMMANDS[spec.command](spec)
    except (ParameterError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SamplerDivergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
