"""Command-line pipeline: synth, train, finetune, segment, evaluate, measures,
blandaltman, cohort and gradcheck.

Settings come from flags, optionally preloaded from an INI-style config file
(``key = value`` under sections). Keys in ``[run]`` apply to every command,
keys in a section named after the command apply to that command only, and
flags given on the command line win over both.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import logging
import sys
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import clinical, data, metrics, stats
from . import network as net
from .errors import (CheckpointError, ConfigError, FormatError, InsufficientDataError, NonFiniteError,
                     ShapeError, UndefinedMeasureError, UninitialisedStatisticsError)

log = logging.getLogger("cmrfcn")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
TASK_ALIASES = {"sa": "sa", "short-axis": "sa", "2ch": "2ch", "4ch": "4ch"}
VOLUME_MEASURES = ("LVEDV_ml", "LVESV_ml", "LVM_g", "RVEDV_ml", "RVESV_ml")


class PairingError(RuntimeError):
    """Inputs that must be paired by subject id are not."""


@dataclass
class RunConfig:
    task: str
    manifest: Path
    out: Path
    checkpoint: Path
    train: net.TrainConfig
    augment: data.AugmentParams = field(default_factory=data.AugmentParams)
    input_size: int = 192
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASK_ALIASES:
            raise ConfigError(f"unknown task {self.task!r}; choose from {sorted(TASK_ALIASES)}")
        self.task = TASK_ALIASES[self.task]
        if not self.manifest.is_file():
            raise ConfigError(f"manifest {self.manifest} does not exist")

    @property
    def k(self) -> int:
        return net.TASK_CLASSES[self.task]


# ---------------------------------------------------------------------------
# helpers


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".write_probe"
    try:
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc
    return out


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _label_index(path, split: str = "all") -> dict[str, dict[int, dict]]:
    """subject -> frame -> row, from a manifest or label listing (file or directory)."""
    p = Path(path)
    if p.is_dir():
        for name in ("labels.csv", "manifest.csv"):
            if (p / name).is_file():
                p = p / name
                break
        else:
            raise ConfigError(f"{path} holds neither labels.csv nor manifest.csv")
    index: dict[str, dict[int, dict]] = defaultdict(dict)
    for r in data.read_manifest(p):
        if r.get("label_path") and (split == "all" or r["split"] == split):
            index[r["subject_id"]].setdefault(r["frame_index"], r)
    return dict(index)


def _pair_subjects(a: dict, b: dict, what: str, allow_missing: bool) -> list[str]:
    only_a, only_b = sorted(set(a) - set(b)), sorted(set(b) - set(a))
    if only_a or only_b:
        msg = f"{what}: unpaired subjects; only in first: {only_a}; only in second: {only_b}"
        if not allow_missing:
            raise PairingError(msg)
        log.warning("%s (continuing with --allow-missing)", msg)
    return sorted(set(a) & set(b))


def _augment_params(args) -> data.AugmentParams:
    return data.AugmentParams(max_translation=args.max_translation, max_rotation=args.max_rotation,
                              scale_range=(args.scale_min, args.scale_max),
                              intensity_range=(args.intensity_min, args.intensity_max))


def _train_config(args, iterations) -> net.TrainConfig:
    return net.TrainConfig(learning_rate=args.learning_rate, iterations=iterations, batch_size=args.batch_size,
                           seed=args.seed, log_every=args.log_every, augment=not args.no_augment,
                           augment_params=_augment_params(args), checkpoint_every=args.checkpoint_every)


TRACE_HEADER = ("iteration", "loss", "val_loss")


def _trace_rows(trace):
    return [(r.iteration, repr(float(r.loss)), "" if r.val_loss is None else repr(float(r.val_loss)))
            for r in trace]


def _read_trace(path, upto):
    if not Path(path).is_file():
        return []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [tuple(r) for r in rows if int(r[0]) <= upto]


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.subjects <= 0:
        raise ConfigError("--subjects must be positive")
    fractions = tuple(float(f) for f in args.split.split(","))
    n_train, n_val, n_test = data.split_counts(args.subjects, fractions)
    out = _out_dir(args)
    profile = data.SHIFTED_INTENSITY if args.intensity == "shifted" else data.STANDARD_INTENSITY
    specs = data.synth_cohort(args.subjects, args.seed, image_size=args.size, n_slices=args.slices,
                              n_frames=args.frames, intensity=profile)
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    rows, subjects = [], []
    for i, (spec, split) in enumerate(zip(specs, splits)):
        sid = f"subj{i:03d}"
        d = out / sid
        d.mkdir(exist_ok=True)
        vol, lab = data.generate_phantom(spec)
        for f in range(spec.n_frames):
            img_name, lab_name = f"{sid}/image_f{f:02d}.csg", f"{sid}/label_f{f:02d}.csg"
            data.write_container(out / img_name, data.Volume(vol.data[f], vol.spacing, vol.frame_interval))
            data.write_container(out / lab_name,
                                 data.LabelMap(lab.data[f], lab.spacing, lab.classes, lab.frame_interval))
            phase = "ED" if f == 0 else "ES" if f == spec.es_frame else ""
            for z in range(spec.n_slices):
                rows.append(dict(subject_id=sid, path=img_name, label_path=lab_name, frame_index=f,
                                 slice_index=z, phase=phase, split=split))
        hr = clinical.heart_rate_from_timing(spec.n_frames, spec.frame_interval)
        subjects.append((sid, split, spec.es_frame, repr(hr), args.intensity))
    data.write_manifest(out / "manifest.csv", rows)
    _write_rows(out / "subjects.csv", ("subject_id", "split", "es_frame", "heart_rate", "intensity"), subjects)
    log.info("wrote %d subjects (%d/%d/%d train/val/test) to %s", args.subjects, n_train, n_val, n_test, out)
    return EXIT_OK


def _run_config(args, checkpoint_default: str) -> RunConfig:
    if not args.manifest:
        raise ConfigError(f"{args.command} needs --manifest")
    out = Path(args.out)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / checkpoint_default
    return RunConfig(task=args.task, manifest=Path(args.manifest), out=out, checkpoint=ckpt,
                     train=_train_config(args, args.iterations), augment=_augment_params(args),
                     input_size=args.input_size, seed=args.seed)


def _train_and_trace(model, rc: RunConfig, cfg: net.TrainConfig, trace_path, ckpt_out, ignore=()):
    train_ds = data.dataset_from_manifest(rc.manifest, "train", rc.input_size)
    val_ds = data.dataset_from_manifest(rc.manifest, "val", rc.input_size)
    log.info("training on %d slices (%d validation), %d iterations", len(train_ds), len(val_ds), cfg.iterations)
    previous = _read_trace(trace_path, model.iteration)
    t0 = time.perf_counter()
    model, trace = net.train(model, train_ds, cfg, validation=val_ds if len(val_ds) else None,
                             ignore_classes=ignore, checkpoint_path=ckpt_out)
    if cfg.iterations == 0:
        net.save_checkpoint(model, ckpt_out)
    log.info("training took %.1f s", time.perf_counter() - t0)
    _write_rows(trace_path, TRACE_HEADER, previous + _trace_rows(trace))
    return model


def cmd_train(args) -> int:
    rc = _run_config(args, "model.fcnc")
    _out_dir(args)
    if args.resume:
        model = net.load_checkpoint(rc.checkpoint, expected_k=rc.k,
                                    config=net.NetworkConfig(k=rc.k, input_size=rc.input_size))
        remaining = max(0, rc.train.iterations - model.iteration)
        log.info("resuming at iteration %d, %d to go", model.iteration, remaining)
    else:
        model = net.build_network(net.NetworkConfig(k=rc.k, input_size=rc.input_size), seed=rc.seed)
        remaining = rc.train.iterations
    cfg = net.TrainConfig(**{**rc.train.__dict__, "iterations": remaining})
    _train_and_trace(model, rc, cfg, rc.out / "loss_trace.csv", rc.checkpoint)
    return EXIT_OK


def cmd_finetune(args) -> int:
    if not args.checkpoint:
        raise ConfigError("finetune needs --checkpoint")
    rc = _run_config(args, "")
    _out_dir(args)
    model = net.load_checkpoint(rc.checkpoint, expected_k=rc.k,
                                config=net.NetworkConfig(k=rc.k, input_size=rc.input_size))
    start = model.iteration
    cfg = net.TrainConfig(**{**rc.train.__dict__, "iterations": args.iterations})
    ignore = tuple(int(c) for c in args.ignore_classes.split(",")) if args.ignore_classes else ()
    model = _train_and_trace(model, rc, cfg, rc.out / "finetune_trace.csv", rc.out / "finetuned.fcnc", ignore)
    log.info("fine-tuned from iteration %d to %d", start, model.iteration)
    return EXIT_OK


def cmd_segment(args) -> int:
    task = TASK_ALIASES.get(args.task)
    if task is None:
        raise ConfigError(f"unknown task {args.task!r}")
    if not args.checkpoint:
        raise ConfigError("segment needs --checkpoint")
    manifest = Path(args.manifest or "")
    if not args.manifest or not manifest.is_file():
        raise ConfigError(f"manifest {args.manifest} does not exist")
    out = _out_dir(args)
    model = net.load_checkpoint(args.checkpoint, expected_k=net.TASK_CLASSES[task])
    size = args.input_size
    model.config = net.NetworkConfig(k=model.config.k, input_size=size)
    phases = None if args.phases == "all" else set(args.phases.split(","))
    frames = {}
    for r in data.read_manifest(manifest):
        if args.split != "all" and r["split"] != args.split:
            continue
        if phases is not None and r.get("phase") not in phases:
            continue
        frames.setdefault((r["subject_id"], r["frame_index"]), r)
    listing, timing = [], []
    for (sid, f), r in sorted(frames.items()):
        vol = data.read_container(r["path"])
        if vol.data.ndim != 3:
            raise ShapeError(f"{r['path']}: expected one (Z, H, W) frame, got shape {vol.data.shape}")
        t0 = time.perf_counter()
        cropped, rec = data.crop_or_pad(vol.data, size)
        pred = net.segment(model, data.normalize_intensity(cropped), batch_size=args.batch_size)
        labels = data.uncrop(pred, rec, fill=0)
        seconds = time.perf_counter() - t0
        (out / sid).mkdir(exist_ok=True)
        name = f"{sid}/label_f{f:02d}.csg"
        classes = {i: data.SHORT_AXIS_CLASSES.get(i, f"class {i}") if task == "sa" else f"class {i}"
                   for i in range(model.config.k)}
        data.write_container(out / name, data.LabelMap(labels, vol.spacing, classes, vol.frame_interval))
        listing.append(dict(subject_id=sid, path=str(Path(r["path"]).resolve()), label_path=name, frame_index=f,
                            slice_index=0, phase=r.get("phase", ""), split=r["split"]))
        timing.append((sid, f, vol.data.shape[0], f"{seconds:.4f}"))
        log.info("segmented %s frame %d (%d slices) in %.3f s", sid, f, vol.data.shape[0], seconds)
    data.write_manifest(out / "labels.csv", listing)
    _write_rows(out / "timing.csv", ("subject_id", "frame_index", "n_slices", "seconds"), timing)
    total = sum(float(t[3]) for t in timing)
    log.info("inference on %d frames took %.3f s", len(timing), total)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    auto, manual = _label_index(args.auto, args.split), _label_index(args.manual, args.split)
    subjects = _pair_subjects(auto, manual, "evaluate", args.allow_missing)
    out = _out_dir(args)
    classes = [int(c) for c in args.classes.split(",")]
    rows, per_class = [], defaultdict(list)
    for sid in subjects:
        # every automated frame needs its manual counterpart; extra manual frames are fine
        frames = sorted(set(auto[sid]) & set(manual[sid]))
        missing = sorted(set(auto[sid]) - set(manual[sid]))
        if missing:
            if not args.allow_missing:
                raise PairingError(f"evaluate: subject {sid} has no manual labels for frames {missing}")
            log.warning("evaluate: subject %s has no manual labels for frames %s", sid, missing)
        if not frames:
            continue
        acc = defaultdict(list)
        for f in frames:
            a = data.read_container(auto[sid][f]["label_path"])
            m = data.read_container(manual[sid][f]["label_path"])
            rep = metrics.evaluate_pair(a.data, m.data, classes, m.spacing, per_slice=args.per_slice)
            for c in classes:
                acc[c].append(rep[c])
        for c in classes:
            ms = acc[c]
            mcd = [x.mcd for x in ms if x.mcd is not None]
            hd = [x.hd for x in ms if x.hd is not None]
            cm = metrics.ClassMetrics(float(np.mean([x.dice for x in ms])),
                                      float(np.mean(mcd)) if mcd else None, float(np.mean(hd)) if hd else None)
            name = data.SHORT_AXIS_CLASSES.get(c, f"class {c}")
            rows.append((sid, name, cm))
            per_class[name].append(cm)
    metrics.write_metric_csv(out / "metrics.csv", rows)
    summary = []
    for name, ms in per_class.items():
        cells = [name]
        for attr in ("dice", "mcd", "hd"):
            v = [getattr(x, attr) for x in ms if getattr(x, attr) is not None]
            cells += [repr(float(np.mean(v))) if v else "", repr(float(np.std(v, ddof=1))) if len(v) > 1 else ""]
        summary.append(cells)
        log.info("%-14s dice %s", name, cells[1])
    _write_rows(out / "metrics_summary.csv",
                ("class", "dice_mean", "dice_sd", "mcd_mean_mm", "mcd_sd_mm", "hd_mean_mm", "hd_sd_mm"), summary)
    return EXIT_OK


def _heart_rates(path) -> dict[str, float]:
    if not path:
        return {}
    with open(path, newline="") as fh:
        return {r["subject_id"]: float(r["heart_rate"]) for r in csv.DictReader(fh) if r.get("heart_rate")}


def cmd_measures(args) -> int:
    index = _label_index(args.labels, args.split)
    rates = _heart_rates(args.subjects)
    out = _out_dir(args)
    rows = []
    for sid in sorted(index):
        frames = sorted(index[sid])
        maps = [data.read_container(index[sid][f]["label_path"]) for f in frames]
        stack = data.LabelMap(np.stack([m.data for m in maps]), maps[0].spacing,
                              dict(data.SHORT_AXIS_CLASSES), maps[0].frame_interval)
        hr = rates.get(sid, args.heart_rate)
        m = clinical.subject_measures(stack, heart_rate=hr if hr else None)
        if not hr:
            # the listing may hold only a few frames, so timing cannot give the rate
            m.LVCO_lpm = m.RVCO_lpm = m.heart_rate = None
        # positions in the available-frame list back to acquisition frame indices
        m.ed_frame, m.es_frame = frames[m.ed_frame], frames[m.es_frame]
        rows.append((sid, m))
    clinical.write_measures_csv(out / "measures.csv", rows)
    log.info("measures for %d subjects", len(rows))
    return EXIT_OK


def cmd_blandaltman(args) -> int:
    ref, other = clinical.read_measures_csv(args.reference), clinical.read_measures_csv(args.other)
    subjects = _pair_subjects(ref, other, "blandaltman", args.allow_missing)
    out = _out_dir(args)
    names = args.measures.split(",") if args.measures else list(VOLUME_MEASURES)
    agreement = []
    for name in names:
        pairs = [(ref[s][name], other[s][name]) for s in subjects
                 if ref[s].get(name) is not None and other[s].get(name) is not None]
        if len(pairs) < 2:
            raise InsufficientDataError(f"{name}: fewer than two paired values")
        sample = stats.PairedSample(*zip(*pairs), measure=name)
        res = stats.bland_altman(sample)
        stats.write_bland_altman(res, out / f"bland_altman_{name}.csv",
                                 None if args.no_plot else out / f"bland_altman_{name}.svg", title=name)
        agreement.append((name, stats.paired_diff_stats(sample)))
        log.info("%s bias %.3f LoA [%.3f, %.3f]", name, res.bias, res.lower, res.upper)
    stats.write_agreement_csv(out / "agreement.csv", agreement)
    return EXIT_OK


def cmd_cohort(args) -> int:
    measures = clinical.read_measures_csv(args.measures)
    with open(args.groups, newline="") as fh:
        grouping = {r["subject_id"]: r["group"] for r in csv.DictReader(fh)}
    _pair_subjects(measures, grouping, "cohort", args.allow_missing)
    out = _out_dir(args)
    names = args.measure_names.split(",") if args.measure_names else [
        c for c in clinical.MEASURE_COLUMNS[1:] if c not in ("ed_frame", "es_frame")]
    groups = tuple(args.group_names.split(",")) if args.group_names else None
    rows = stats.cohort_table(measures, grouping, names, groups)
    stats.write_cohort_csv(out / "cohort.csv", rows)
    for r in rows:
        if r.flagged:
            log.warning("%s: a group has fewer than two values; no p-value", r.measure)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradcheck

    layers = args.layers.split(",") if args.layers else None
    include_network = not args.no_network and (layers is None or "network" in layers)
    reports = gradcheck.run_suite(layers, include_network=include_network, seed=args.seed, inject=args.inject)
    for r in reports:
        print(r.line())
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="INI-style key = value file; flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out", help="directory receiving every output")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads")
    p.add_argument("--allow-missing", action="store_true", help="report unpaired subjects but continue")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _training_flags(p):
    p.add_argument("--manifest", required=False, default=None)
    p.add_argument("--task", default="sa")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--input-size", type=int, default=192)
    p.add_argument("--learning-rate", type=float, default=0.001)
    p.add_argument("--batch-size", type=int, default=20)
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--max-translation", type=float, default=10.0, help="pixels")
    p.add_argument("--max-rotation", type=float, default=15.0, help="degrees")
    p.add_argument("--scale-min", type=float, default=0.9)
    p.add_argument("--scale-max", type=float, default=1.1)
    p.add_argument("--intensity-min", type=float, default=0.8)
    p.add_argument("--intensity-max", type=float, default=1.2)


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="cmrfcn", description=__doc__.split("\n\n")[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a phantom cohort and manifest")
    p.add_argument("--subjects", type=int, default=10)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--slices", type=int, default=6)
    p.add_argument("--size", type=int, default=48, help="in-plane pixels")
    p.add_argument("--split", default="0.7,0.1,0.2", help="train,val,test fractions")
    p.add_argument("--intensity", choices=("standard", "shifted"), default="standard")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a network from a manifest")
    _training_flags(p)
    p.add_argument("--iterations", type=int, default=50_000)
    p.add_argument("--resume", action="store_true", help="continue from --checkpoint up to --iterations")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", parents=[common], help="continue training a checkpoint on new data")
    _training_flags(p)
    p.add_argument("--iterations", type=int, default=10_000)
    p.add_argument("--ignore-classes", default="", help="comma-separated class ids excluded from the loss")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("segment", parents=[common], help="label every selected frame of a manifest")
    p.add_argument("--manifest", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--task", default="sa")
    p.add_argument("--input-size", type=int, default=192)
    p.add_argument("--split", default="test", help="manifest split to segment, or 'all'")
    p.add_argument("--phases", default="ED,ES", help="comma-separated phases, or 'all' for every frame")
    p.add_argument("--batch-size", type=int, default=10)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", parents=[common], help="Dice / MCD / HD of automated vs manual labels")
    p.add_argument("--auto", required=True, help="labels.csv, manifest.csv or a directory holding one")
    p.add_argument("--manual", required=True)
    p.add_argument("--classes", default="1,2,3")
    p.add_argument("--per-slice", action="store_true", help="distances within slices instead of in 3-D")
    p.add_argument("--split", default="all", help="restrict both sides to one manifest split")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("measures", parents=[common], help="volumes, mass, SV/EF/CO per subject")
    p.add_argument("--labels", required=True)
    p.add_argument("--subjects", default=None, help="CSV with subject_id, heart_rate")
    p.add_argument("--heart-rate", type=float, default=None, help="bpm used when --subjects has none")
    p.add_argument("--split", default="all", help="restrict to one manifest split")
    p.set_defaults(func=cmd_measures)

    p = sub.add_parser("blandaltman", parents=[common], help="agreement of two measures.csv files")
    p.add_argument("--reference", required=True)
    p.add_argument("--other", required=True)
    p.add_argument("--measures", default="", help="comma-separated columns (default: volumes and mass)")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_blandaltman)

    p = sub.add_parser("cohort", parents=[common], help="two-group comparison of measures")
    p.add_argument("--measures", required=True)
    p.add_argument("--groups", required=True, help="CSV with subject_id, group")
    p.add_argument("--measure-names", default="")
    p.add_argument("--group-names", default="", help="two comma-separated group labels")
    p.set_defaults(func=cmd_cohort)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every layer")
    p.add_argument("--layers", default="", help="comma-separated subset, e.g. conv2d,relu")
    p.add_argument("--no-network", action="store_true")
    p.add_argument("--inject", default=None, help=argparse.SUPPRESS)  # sign-flip a layer's gradient
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _config_defaults(path, command: str, sub: argparse.ArgumentParser) -> dict:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise ConfigError(f"cannot read config file {path}")
    actions = {a.dest: a for a in sub._actions}
    out = {}
    for section in ("run", command):
        if not cp.has_section(section):
            continue
        for key, raw in cp.items(section):
            dest = key.replace("-", "_")
            act = actions.get(dest)
            if act is None:
                if section == command:
                    raise ConfigError(f"config [{section}]: unknown key {key!r}")
                continue
            if isinstance(act, (argparse._StoreTrueAction,)):
                out[dest] = cp.getboolean(section, key)
            else:
                out[dest] = act.type(raw) if act.type else raw
    return out


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        try:
            sub.set_defaults(**_config_defaults(args.config, args.command, sub))
        except (ConfigError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except PairingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (ConfigError, ShapeError, FormatError, CheckpointError, InsufficientDataError,
            UndefinedMeasureError, UninitialisedStatisticsError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
