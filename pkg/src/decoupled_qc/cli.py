"""Command-line interface: simulate, metrics, train, evaluate.

Exit codes: 0 success, 2 usage or invalid parameters, 3 I/O failure,
4 missing prerequisite (e.g. training a student without teachers).
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .artefacts import (
    ARTEFACT_KINDS,
    ArtefactKind,
    ArtefactSpec,
    corrupt,
    sample_spec,
    specs_to_json,
)
from .config import ConfigError, RunConfig
from .nifti import NiftiError, load_nifti, save_nifti
from .qcmetrics import QCReport, build_report, reports_to_csv
from .toytrain import checkpoint
from .toytrain.evaluate import (
    SUMMARY_METRICS,
    clean_reference,
    clean_vs_artefact_medians,
    correlation_summary,
    error_bar_sweep,
    evaluate_cascade,
)
from .toytrain.model import forward
from .toytrain.phantoms import DEFAULT_SHAPE, generate_phantoms
from .toytrain.train import (
    LOG_COLUMNS,
    Frozen,
    MissingPrerequisite,
    TrainConfig,
    TrainingError,
    load_model,
    load_state,
    parse_stage,
    save_state,
    train_stage,
)
from .uncmath import UncertaintyBundle
from .volume import LabelVolume, Volume, normalize

log = logging.getLogger("decoupled_qc")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_PREREQ = 0, 2, 3, 4
ALL_KINDS = [ArtefactKind.GEOMETRIC, ArtefactKind.BIAS_FIELD, ArtefactKind.MOTION,
             *[k for k in ARTEFACT_KINDS if k is not ArtefactKind.MOTION]]


class UsageError(Exception):
    pass


def _json_dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out) if args.out else Path(cfg["io"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _overrides(args) -> dict:
    out = {"run.seed": args.seed}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


# --------------------------------------------------------------------------
# simulate

def _explicit_specs(args, shape, spacing, rng) -> list[ArtefactSpec]:
    free = [a for a, n in enumerate(shape) if n > 1]
    specs = []
    if args.spike_magnitude is not None:
        base = sample_spec(ArtefactKind.RF_SPIKE, shape, spacing, rng)
        specs.append(ArtefactSpec(ArtefactKind.RF_SPIKE,
                                  {**base.params, "magnitude": args.spike_magnitude}, base.seed))
    if args.noise_snr_db is not None:
        seed = int(rng.integers(0, 2**63 - 1))
        specs.append(ArtefactSpec(ArtefactKind.K_NOISE, {"snr_db": args.noise_snr_db}, seed))
    if args.blur_ratio is not None:
        specs.append(ArtefactSpec(ArtefactKind.BLUR, {"ratio": args.blur_ratio, "axes": free}, 0))
    if args.wrap_fraction is not None:
        axis = args.wrap_axis if args.wrap_axis is not None else free[0]
        seed = int(rng.integers(0, 2**63 - 1))
        specs.append(ArtefactSpec(ArtefactKind.WRAP, {"fraction": args.wrap_fraction,
                                                      "pattern": args.wrap_pattern,
                                                      "axis": axis}, seed))
    kinds = []
    for k in args.kind or []:
        kinds.extend(ALL_KINDS if k == "all" else [ArtefactKind(k)])
    for k in kinds:
        specs.append(sample_spec(k, shape, spacing, rng))
    specs.sort(key=lambda s: s.stage)
    return specs


def cmd_simulate(args, cfg: RunConfig) -> int:
    seed = cfg["run"]["seed"]
    rng = np.random.default_rng([seed, 0x51])
    extra_files = {}
    if args.phantom:
        ds = generate_phantoms(1, seed, shape=tuple(args.phantom_shape))
        vol = ds.images[0]
        extra_files = {"labels.nii": ds.labels[0].labels, "tissues.nii": ds.tissues[0].labels}
        source = f"phantom(seed={seed}, shape={list(vol.shape)})"
    else:
        if not args.input:
            raise UsageError("simulate needs an input volume or --phantom")
        vol, _ = load_nifti(args.input)
        vol = normalize(vol)
        source = str(args.input)
    specs = _explicit_specs(args, vol.shape, vol.spacing, rng)
    out_vol, specs = corrupt(vol, specs)
    out = _out_dir(args, cfg)
    prov = cfg.provenance(command="simulate", input=source)
    save_nifti(out_vol, out / "corrupted.nii", descrip="decoupled_qc simulate")
    (out / "specs.json").write_text(specs_to_json(specs, provenance=prov) + "\n", encoding="utf-8")
    if args.save_clean:
        save_nifti(normalize(vol), out / "clean.nii", descrip="decoupled_qc clean")
        for name, arr in extra_files.items():
            save_nifti(Volume(arr.astype(np.float32), vol.spacing), out / name)
    cfg.write(out)
    print(out / "corrupted.nii")
    return EXIT_OK


# --------------------------------------------------------------------------
# metrics

def _load_labels(path) -> LabelVolume:
    vol, _ = load_nifti(path)
    labels = np.rint(vol.data).astype(np.int64)
    return LabelVolume(labels, max(2, int(labels.max()) + 1))


def _load_bundle(path, shape):
    with np.load(path) as npz:
        missing = {"logits", "s_task"} - set(npz.files)
        if missing:
            raise UsageError(f"{path}: bundle file lacks arrays {sorted(missing)}")
        logits = npz["logits"].astype(np.float64)
        s_aug = npz["s_aug"] if "s_aug" in npz.files else np.zeros((0, *shape))
        bundle = UncertaintyBundle(npz["s_task"].astype(np.float64), s_aug.astype(np.float64))
    if logits.shape[1:] != tuple(shape):
        raise UsageError(f"{path}: logits shape {logits.shape} does not match volume {shape}")
    return logits, bundle


def _reference(args, model) -> float:
    if args.reference_variance is not None:
        return args.reference_variance
    if args.reference is not None:
        if model is None:
            raise UsageError("--reference needs --model; use --reference-variance with --bundle")
        ref, _ = load_nifti(args.reference)
        return clean_reference(model, [normalize(ref)])
    return 0.0


def _report_for(path: Path, args, cfg, model, reference, mask_path, truth_path) -> QCReport:
    vol, _ = load_nifti(path)
    vol = normalize(vol)
    if model is not None:
        logits, bundle = forward(model, vol)
    else:
        logits, bundle = _load_bundle(args.bundle, vol.shape)
    mask = _load_labels(mask_path) if mask_path else None
    truth = _load_labels(truth_path) if truth_path else None
    prov = cfg.provenance(command="metrics", input=str(path),
                          model=str(args.model) if args.model else None,
                          clean_reference_variance=reference)
    sidecar = path.with_name(path.name.replace(".nii", "") + ".json")
    if sidecar.name != path.name and sidecar.exists():
        with contextlib.suppress(ValueError, KeyError):
            prov["specs"] = json.loads(sidecar.read_text())["specs"]
    return build_report(vol, logits, bundle, reference, mask=mask, truth=truth,
                        gm=args.gm, wm=args.wm, provenance=prov)


def cmd_metrics(args, cfg: RunConfig) -> int:
    if (args.model is None) == (args.bundle is None):
        raise UsageError("metrics needs exactly one of --model or --bundle")
    model = load_model(args.model) if args.model else None
    reference = _reference(args, model)
    target = Path(args.input)
    if target.is_dir():
        if model is None:
            raise UsageError("batch mode over a directory needs --model")
        paths = sorted(target.glob("*.nii"))
        if not paths:
            raise OSError(f"no .nii volumes in {target}")
        out = _out_dir(args, cfg)
        rows = []
        for p in paths:
            mask = Path(args.mask) / p.name if args.mask else None
            truth = Path(args.truth) / p.name if args.truth else None
            report = _report_for(p, args, cfg, model, reference, mask, truth)
            (out / f"{p.stem}.json").write_text(report.to_json() + "\n", encoding="utf-8")
            rows.append((p.stem, report))
        comment = "provenance: " + json.dumps(cfg.provenance(command="metrics"), sort_keys=True)
        (out / "metrics.csv").write_text(reports_to_csv(rows, comment), encoding="utf-8")
        cfg.write(out)
        print(out / "metrics.csv")
    else:
        report = _report_for(target, args, cfg, model, reference, args.mask, args.truth)
        text = report.to_json() + "\n"
        if args.out:
            Path(args.out).parent.mkdir(parents=True, exist_ok=True)
            Path(args.out).write_text(text, encoding="utf-8")
        else:
            sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# train

def _ckpt_name(stage: str) -> str:
    kind, which = parse_stage(stage)
    return "teacher_" + which.value + ".ckpt" if kind == "teacher" else stage + ".ckpt"


def _train_config(cfg: RunConfig, stage: str) -> TrainConfig:
    t, a = cfg["training"], cfg["artefact"]
    return TrainConfig(
        stage=stage, iterations=t["iterations"], learning_rate=t["learning_rate"],
        batch_size=t["batch_size"], width=t["width"], epsilon=t["epsilon"],
        epsilon_floor=t["epsilon_floor"], plateau_window=t["plateau_window"],
        plateau_threshold=t["plateau_threshold"], artefact_rate=a["rate"],
        geometric=a["geometric"], bias_field=a["bias_field"],
        consistency_lambda=t["consistency_lambda"], seed=cfg["run"]["seed"],
    )


def _load_frozen(out: Path, stage: str) -> Frozen:
    kind, _ = parse_stage(stage)
    frozen = Frozen()
    if kind == "task":
        return frozen
    needed = ["task"]
    if kind == "student":
        needed += [f"teacher:{k.value}" for k in ARTEFACT_KINDS]
    missing = [s for s in needed if not (out / _ckpt_name(s)).exists()]
    if missing:
        raise MissingPrerequisite(
            f"stage {stage} needs checkpoints for: {', '.join(missing)} (in {out}); "
            f"run `train --stage {missing[0]}` first")
    frozen.task = load_model(out / "task.ckpt")
    if kind == "student":
        for k in ARTEFACT_KINDS:
            frozen.teachers[k.value] = load_model(out / _ckpt_name(f"teacher:{k.value}"))
    return frozen


def _write_log(path: Path, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: repr(float(r[k])) if k != "iteration" else r[k]
                             for k in LOG_COLUMNS})


def _read_log(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with path.open(newline="", encoding="utf-8") as fh:
        return [{k: (int(v) if k == "iteration" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def _train_one(stage: str, args, cfg: RunConfig, out: Path, data) -> None:
    ckpt = out / _ckpt_name(stage)
    log_path = out / (ckpt.stem + "_log.csv")
    frozen = _load_frozen(out, stage)
    tcfg = _train_config(cfg, stage)
    prov = cfg.provenance(command="train", stage=stage)
    state = None
    if args.resume and ckpt.exists():
        state, meta = load_state(ckpt)
        if meta["config"] != _train_config(cfg, stage).__dict__:
            raise UsageError(f"{ckpt} was written with a different training config")
        state.log = [r for r in _read_log(log_path) if r["iteration"] < state.iteration]
    elif ckpt.exists() and not args.force:
        raise UsageError(f"{ckpt} exists; pass --force to overwrite or --resume to continue")
    every = args.checkpoint_every

    def progress(st):
        if every and st.iteration % every == 0 and st.iteration < tcfg.iterations:
            save_state(ckpt, st, tcfg, prov)
            _write_log(log_path, st.log)

    state = train_stage(tcfg, data, frozen, state, progress)
    save_state(ckpt, state, tcfg, prov)
    _write_log(log_path, state.log)
    log.info("%s: %d iterations, final epsilon %g", stage, state.iteration,
             state.schedule.epsilon)
    print(ckpt)


def cmd_train(args, cfg: RunConfig) -> int:
    if args.stage == "all":
        stages = ["task", *[f"teacher:{k.value}" for k in ARTEFACT_KINDS], "student"]
    else:
        try:
            parse_stage(args.stage)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        stages = [args.stage]
    out = _out_dir(args, cfg)
    # fail fast before generating data
    _load_frozen(out, stages[0])
    t = cfg["training"]
    data = generate_phantoms(t["n_train"], t["data_seed"])
    cfg.write(out)
    for stage in stages:
        _train_one(stage, args, cfg, out, data)
    return EXIT_OK


# --------------------------------------------------------------------------
# evaluate

def cmd_evaluate(args, cfg: RunConfig) -> int:
    from .plots import scatter_svg

    model_path = Path(args.model)
    if model_path.is_dir():
        model_path = model_path / "student.ckpt"
    if not model_path.exists():
        raise MissingPrerequisite(f"no student checkpoint at {model_path}; run `train` first")
    model = load_model(model_path)
    if not model.n_aug:
        raise UsageError(f"{model_path} has no artefact-variance channels; pass a student model")
    e = cfg["evaluation"]
    n = args.n if args.n is not None else e["n_test"]
    n_control = min(e["n_control"], n - 1)
    test = generate_phantoms(n, e["data_seed"])
    seed = cfg["run"]["seed"]
    rows, reference = evaluate_cascade(model, test, seed=seed, n_control=n_control)
    out = _out_dir(args, cfg)
    prov = cfg.provenance(command="evaluate", model=str(model_path), n=n, n_control=n_control,
                          clean_reference_variance=reference)
    csv_rows = [(f"{r.ident}_{r.kind}", r.report) for r in rows]
    comment = "provenance: " + json.dumps(prov, sort_keys=True)
    (out / "metrics.csv").write_text(reports_to_csv(csv_rows, comment), encoding="utf-8")
    summary = {"correlations": correlation_summary(rows), "provenance": prov}
    if n_control:
        clean, dirty = clean_vs_artefact_medians(rows)
        summary["median_artefact_variance"] = {"clean": clean, "artefacted": dirty}
    summary["error_bars"] = error_bar_sweep(model, test.images[0], seed=seed)
    _json_dump(summary, out / "summary.json")
    art = [r for r in rows if r.kind != "none"]
    dices = [r.report.dice for r in art]
    for metric in SUMMARY_METRICS:
        xs = [getattr(r.report, metric) for r in art]
        xs = [x if math.isfinite(x) else float("nan") for x in xs]
        rho = summary["correlations"][metric]["rho"]
        svg = scatter_svg(xs, dices, metric, kinds=[r.kind for r in art], rho=rho)
        (out / f"dice_vs_{metric}.svg").write_bytes(svg)
    cfg.write(out)
    for metric, c in summary["correlations"].items():
        if c["rho"] is None:
            print(f"{metric:>24}: rho undefined (constant series) n={c['n']}")
        else:
            print(f"{metric:>24}: rho={c['rho']:+.3f} p={c['p_value']:.3g} n={c['n']}")
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, help="master seed (overrides [run] seed)")
    common.add_argument("--out", help="output path or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="decoupled-qc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="corrupt a volume with artefacts")
    s.add_argument("input", nargs="?", help="input .nii volume")
    s.add_argument("--phantom", action="store_true", help="use a generated phantom as input")
    s.add_argument("--phantom-shape", type=int, nargs=3, default=list(DEFAULT_SHAPE),
                   metavar=("X", "Y", "Z"))
    s.add_argument("--spike-magnitude", type=float)
    s.add_argument("--noise-snr-db", type=float)
    s.add_argument("--blur-ratio", type=float)
    s.add_argument("--wrap-fraction", type=float)
    s.add_argument("--wrap-pattern", choices=("regular", "random"), default="regular")
    s.add_argument("--wrap-axis", type=int, choices=(0, 1, 2))
    s.add_argument("--kind", action="append",
                   choices=[k.value for k in ArtefactKind] + ["all"],
                   help="add one randomly parameterised artefact of this kind (repeatable)")
    s.add_argument("--save-clean", action="store_true",
                   help="also write the normalized clean input (and phantom label maps)")
    s.set_defaults(func=cmd_simulate)

    m = sub.add_parser("metrics", parents=[common], help="QC report for a volume or directory")
    m.add_argument("input", help=".nii volume or a directory of them (batch mode)")
    m.add_argument("--model", help="trained student checkpoint")
    m.add_argument("--bundle", help=".npz with logits, s_task and optional s_aug arrays")
    m.add_argument("--mask", help="tissue label map for SNR/CNR (file, or directory in batch)")
    m.add_argument("--truth", help="binary segmentation for Dice (file, or directory in batch)")
    m.add_argument("--gm", type=int, default=1, help="gray-matter id in --mask")
    m.add_argument("--wm", type=int, default=2, help="white-matter id in --mask")
    m.add_argument("--reference", help="clean reference volume for error-bar calibration")
    m.add_argument("--reference-variance", type=float,
                   help="clean reference total variance, if already known")
    m.set_defaults(func=cmd_metrics)

    t = sub.add_parser("train", parents=[common], help="run one or all cascade stages")
    t.add_argument("--stage", required=True,
                   help="task, teacher:<kind>, student or all")
    t.add_argument("--resume", action="store_true", help="continue from the stage checkpoint")
    t.add_argument("--force", action="store_true", help="overwrite an existing checkpoint")
    t.add_argument("--checkpoint-every", type=int, default=500)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", parents=[common], help="Dice vs quality metric experiment")
    e.add_argument("--model", required=True, help="student checkpoint or the training directory")
    e.add_argument("--n", type=int, help="number of test phantoms")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config, _overrides(args))
        limit = threadpool_limits(1) if cfg["run"]["single_thread"] else contextlib.nullcontext()
        with limit:
            return args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingPrerequisite as exc:
        print(f"error: missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except (OSError, NiftiError, checkpoint.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
