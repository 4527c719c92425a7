"""Command line driver for the three-stage pipeline.

    spikedistill train-teacher      --config run.cfg --out runs/a
    spikedistill train-intermediate --config run.cfg --out runs/a
    spikedistill convert            --config run.cfg --out runs/a
    spikedistill distill            --config run.cfg --out runs/a
    spikedistill evaluate           --config run.cfg --out runs/a
    spikedistill energy-report      --config run.cfg --out runs/a

Checkpoints live in the output directory as teacher.ckpt, intermediate.ckpt,
student.ckpt (converted) and distilled.ckpt. CSV logs, columns in order:

    teacher_log.csv / intermediate_log.csv
        config_hash, stage, epoch, train_loss, train_acc, test_acc
    calibration.csv
        config_hash, layer, max_preactivation, threshold, samples, time_steps, percentile
    distill_log.csv
        config_hash, method, mode, alpha, epoch, loss_total, loss_ce, loss_at, train_acc, test_acc
    evaluate_<tag>.csv
        config_hash, checkpoint, role, time_steps, coding, samples, accuracy
    energy_<tag>.csv
        layer, kind, neurons, avg_spikes, total_spikes, time_steps, samples, threshold, config_hash

Exit codes: 0 success, 1 internal error, 2 user or config error.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import os
import pathlib
import sys

from . import ann, conversion, distillation, metrics, network, snn
from .config import ConfigError, dataset_spec, load_config
from .datasets import DatasetError, load_dataset, subset
from .optim import Optimizer

log = logging.getLogger("spikedistill")

TRAIN_COLUMNS = ("config_hash", "stage", "epoch", "train_loss", "train_acc", "test_acc")
CALIBRATION_COLUMNS = ("config_hash", "layer", "max_preactivation", "threshold", "samples",
                       "time_steps", "percentile")
DISTILL_COLUMNS = ("config_hash", "method", "mode", "alpha", "epoch", "loss_total", "loss_ce",
                   "loss_at", "train_acc", "test_acc")
EVAL_COLUMNS = ("config_hash", "checkpoint", "role", "time_steps", "coding", "samples", "accuracy")

CHECKPOINTS = {"teacher": "teacher.ckpt", "intermediate": "intermediate.ckpt",
               "student": "student.ckpt", "distilled": "distilled.ckpt"}


class UserError(Exception):
    """Problem with the user's input; reported with exit code 2."""


class LockError(UserError):
    pass


@contextlib.contextmanager
def locked(out):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{out} is in use by another run (remove {lock} if it is stale)") from None
    with os.fdopen(fd, "w") as fh:
        fh.write(f"{os.getpid()}\n")
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _cell(value):
    return repr(value) if isinstance(value, float) else value


def write_csv(path, columns, rows):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(row[k]) for k in columns})
    os.replace(tmp, path)


def _save(ckpt, out, name, cfg, stage):
    ckpt.metadata.update(config_hash=cfg.hash, stage=stage)
    path = out / CHECKPOINTS.get(name, name)
    ckpt.save(path)
    log.info("wrote %s", path)
    return path


def _load(out, name):
    path = out / CHECKPOINTS.get(name, name)
    if not path.exists():
        raise UserError(f"checkpoint not found: {path}")
    return network.Checkpoint.load(path)


def _datasets(cfg):
    return load_dataset(dataset_spec(cfg))


def _architecture(cfg, stage):
    s = cfg.section(stage)
    shape = tuple(cfg["dataset.image_shape"])
    classes = cfg["dataset.num_classes"]
    arch = s["arch"]
    if arch == "vgg9":
        kwargs = {"width": s["width"], "hidden": s["hidden"], "dropout_p": s["dropout"]}
    elif arch == "3conv2linear":
        kwargs = {"channels": tuple(s["channels"]), "hidden": s["hidden"], "dropout_p": s["dropout"]}
    elif arch == "vgg5":
        kwargs = {"width": s["width"], "hidden": s["hidden"], "dropout_p": s["dropout"]}
    elif arch == "mlp":
        kwargs = {"hidden": (s["hidden"],), "dropout_p": s["dropout"]}
    else:
        raise UserError(f"{stage}.arch: unknown architecture {arch!r}")
    spec = network.build_architecture(arch, shape, classes, **kwargs)
    return spec.with_role("teacher" if stage == "teacher" else "intermediate")


def _train_stage(cfg, out, stage):
    train, test = _datasets(cfg)
    spec = _architecture(cfg, stage)
    if stage == "intermediate":
        problems = conversion.validate_convertible(spec)
        if problems:
            raise UserError("intermediate architecture is not convertible:\n  "
                            + "\n  ".join(map(str, problems)))
    s = cfg.section(stage)
    tcfg = ann.TrainConfig(epochs=s["epochs"], batch_size=s["batch_size"], lr=s["lr"],
                           momentum=s["momentum"], weight_decay=s["weight_decay"],
                           optimizer=s["optimizer"], seed=cfg["seed"])
    best, rows = ann.train_ann(spec, train, test, tcfg)
    _save(best, out, stage, cfg, stage)
    write_csv(out / f"{stage}_log.csv", TRAIN_COLUMNS,
              [{"config_hash": cfg.hash, "stage": stage, **r} for r in rows])
    print(f"{stage}: best test accuracy {best.metadata.get('test_acc', float('nan')):.4f}")
    return 0


def cmd_train_teacher(cfg, out):
    return _train_stage(cfg, out, "teacher")


def cmd_train_intermediate(cfg, out):
    return _train_stage(cfg, out, "intermediate")


def cmd_convert(cfg, out):
    source = _load(out, "intermediate")
    problems = conversion.validate_convertible(source.spec)
    if problems:
        raise UserError("checkpoint is not convertible:\n  " + "\n  ".join(map(str, problems)))
    train, _ = _datasets(cfg)
    s = cfg.section("convert")
    calib = subset(train, s["samples"], cfg["seed"])
    report = conversion.balance_thresholds(source, calib.images, s["time_steps"], seed=cfg["seed"],
                                           percentile=s["percentile"] or None, coding=s["coding"])
    student = conversion.convert(source, report, leak=s["leak"])
    _save(student, out, "student", cfg, "convert")
    rows = [{"config_hash": cfg.hash, **r, "samples": report.samples,
             "time_steps": report.time_steps, "percentile": report.percentile}
            for r in report.rows()]
    write_csv(out / "calibration.csv", CALIBRATION_COLUMNS, rows)
    for r in rows:
        print(f"layer {r['layer']}: max preactivation {r['max_preactivation']:.6g} "
              f"threshold {r['threshold']:.6g}")
    return 0


def _snn_config(cfg, section, ckpt=None):
    """Distill settings with ``section``'s time steps; a checkpoint's stored leak wins."""
    leak = cfg["distill.leak"]
    if section != "distill" and ckpt is not None:
        leak = ckpt.metadata.get("leak", leak)
    return snn.SnnConfig(leak=leak, gamma=cfg["distill.gamma"],
                         time_steps=cfg[f"{section}.time_steps"],
                         reset_grad=cfg["distill.reset_grad"], leak_grad=cfg["distill.leak_grad"])


def _distill_config(cfg):
    s = cfg.section("distill")
    pairs = None
    if s["pairs"]:
        pairs = []
        for entry in s["pairs"]:
            parts = entry.split(":")
            if len(parts) != 3 or not (parts[1].isdigit() and parts[2].isdigit()):
                raise UserError(f"distill.pairs entry {entry!r} is not level:teacher:student")
            pairs.append((parts[0], int(parts[1]), int(parts[2])))
    return distillation.DistillConfig(alpha=s["alpha"], mode=s["mode"], levels=tuple(s["levels"]),
                                      normalize=s["normalize"],
                                      student_activation=s["student_activation"],
                                      per_step=s["per_step"], pairs=pairs)


def cmd_distill(cfg, out):
    s = cfg.section("distill")
    dcfg = _distill_config(cfg)
    hybrid = dcfg.alpha == 0
    teacher = None if hybrid else _load(out, "teacher")
    student = _load(out, "student")
    if teacher is not None:
        distillation.pair_layers(teacher.spec, student.spec, dcfg.levels, dcfg.pairs)
    train, test = _datasets(cfg)
    opt = Optimizer(s["optimizer"], s["lr"], weight_decay=s["weight_decay"])
    best, rows = distillation.train_student(teacher, student, train, test, dcfg,
                                            _snn_config(cfg, "distill"), opt, s["epochs"],
                                            seed=cfg["seed"], batch_size=s["batch_size"],
                                            coding=s["coding"])
    method = "hybrid" if hybrid else "lasnn"
    best.metadata.update(method=method, leak=float(s["leak"]))
    _save(best, out, "distilled", cfg, "distill")
    write_csv(out / "distill_log.csv", DISTILL_COLUMNS,
              [{"config_hash": cfg.hash, "method": method, "mode": dcfg.mode,
                "alpha": float(dcfg.alpha), **r} for r in rows])
    print(f"{method}: best test accuracy {max(r['test_acc'] for r in rows):.4f}")
    return 0


def _resolve(out, name):
    path = pathlib.Path(name)
    path = path if path.is_absolute() else out / path
    if not path.exists():
        raise UserError(f"checkpoint not found: {path}")
    return path


def cmd_evaluate(cfg, out):
    s = cfg.section("evaluate")
    path = _resolve(out, s["checkpoint"])
    ckpt = network.Checkpoint.load(path)
    _, test = _datasets(cfg)
    row = {"config_hash": cfg.hash, "checkpoint": path.name, "role": ckpt.spec.role,
           "samples": len(test)}
    if ckpt.spec.role == "student-snn":
        scfg = _snn_config(cfg, "evaluate", ckpt)
        counter = metrics.SpikeCounter(ckpt.spec)
        probs = snn.simulate(ckpt, test.images, scfg, s["coding"], cfg["seed"],
                             on_chunk=lambda ids, rec: counter.add(rec))
        acc = metrics.top1_accuracy(probs, test.labels)
        row.update(time_steps=scfg.time_steps, coding=s["coding"], accuracy=acc)
        tag = f"{path.stem}_T{scfg.time_steps}"
        report = counter.report()
        (out / f"energy_{tag}.csv").write_text(report.to_csv({"config_hash": cfg.hash}))
        print(report.summary(), end="")
    else:
        acc = ann.evaluate_accuracy(ckpt, test)
        row.update(time_steps=0, coding="analog", accuracy=acc)
        tag = path.stem
    write_csv(out / f"evaluate_{tag}.csv", EVAL_COLUMNS, [row])
    print(f"accuracy {acc:.4f}")
    return 0


def cmd_energy_report(cfg, out):
    s = cfg.section("energy")
    path = _resolve(out, s["checkpoint"])
    ckpt = network.Checkpoint.load(path)
    if ckpt.spec.role != "student-snn":
        raise UserError(f"{path} is an ANN checkpoint; energy reports need a spiking network")
    spec = dataset_spec(cfg)
    spec.test_subset = s["samples"] or None
    _, test = load_dataset(spec)
    scfg = _snn_config(cfg, "energy", ckpt)
    counter = metrics.SpikeCounter(ckpt.spec)
    records_dir = pathlib.Path(s["records_dir"]) if s["records_dir"] else None
    if records_dir is not None:
        records_dir.mkdir(parents=True, exist_ok=True)
    chunks = []

    def on_chunk(ids, rec):
        counter.add(rec)
        if records_dir is not None:
            metrics.save_spike_record(records_dir / f"chunk_{len(chunks):05d}.npz", rec)
        chunks.append(len(ids))

    probs = snn.simulate(ckpt, test.images, scfg, s["coding"], cfg["seed"], on_chunk=on_chunk)
    report = counter.report()
    tag = f"{path.stem}_T{scfg.time_steps}"
    (out / f"energy_{tag}.csv").write_text(report.to_csv({"config_hash": cfg.hash}))
    (out / f"energy_{tag}.txt").write_text(
        report.summary() + f"accuracy: {metrics.top1_accuracy(probs, test.labels)!r}\n")
    print(report.summary(), end="")
    return 0


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "train-intermediate": cmd_train_intermediate,
    "convert": cmd_convert,
    "distill": cmd_distill,
    "evaluate": cmd_evaluate,
    "energy-report": cmd_energy_report,
}

USER_ERRORS = (UserError, ConfigError, DatasetError, FileNotFoundError, network.SpecError,
               network.CheckpointError, conversion.ConversionError, distillation.DistillError,
               snn.SnnError)


def build_parser():
    parser = argparse.ArgumentParser(prog="spikedistill", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=pathlib.Path, help="key = value config file")
        p.add_argument("--seed", type=int, help="overrides the seed key")
        p.add_argument("--out", type=pathlib.Path, help="output directory")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="set a config key (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.override, args.seed, args.out)
        out = pathlib.Path(cfg["out"])
        with locked(out):
            (out / "config.txt").write_text(cfg.to_text())
            (out / "config.sha256").write_text(cfg.hash + "\n")
            return COMMANDS[args.command](cfg, out)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
