"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure,
3 verification failure (``gradcheck``). Human-readable output goes to stderr;
artifacts go to files (``--print-config`` prints JSON to stdout).
"""
from __future__ import annotations

import os

# cap BLAS worker threads before numpy is imported
_threads = os.environ.get("SYNTHGEN_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

from . import engine, model  # noqa: E402
from .classmixpp import classmix_pp  # noqa: E402
from .config import ConfigError, RunConfig, from_dict, load_config, to_dict  # noqa: E402
from .datasets import DatasetManifest, LabeledImage, NetpbmError, read_pgm, read_ppm, write_pgm, write_ppm  # noqa: E402
from .numerics import Rng  # noqa: E402
from .scenegen import PRESETS, ClassSchema, SceneStyle, generate_dataset, get_style  # noqa: E402

log = logging.getLogger("synthgen")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------

def resolve_config(args) -> RunConfig:
    """Config file (or defaults) with command-line overrides applied, re-validated."""
    path = getattr(args, "config", None)
    if path:
        if not Path(path).exists():
            raise UsageError(f"config file not found: {path}")
        cfg = load_config(path)
    else:
        cfg = RunConfig()
    d = to_dict(cfg)
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
        d["teacher"]["seed"] = args.seed
        d["student"]["seed"] = args.seed
    if getattr(args, "out", None):
        d["out_dir"] = str(args.out)
    if getattr(args, "gmc_patch_size", None) is not None:
        d["teacher"]["gmc"]["patch"] = args.gmc_patch_size
    if getattr(args, "gmc_ratio", None) is not None:
        d["teacher"]["gmc"]["ratio"] = args.gmc_ratio
    return from_dict(RunConfig, d)


def _print_config(cfg: RunConfig) -> None:
    sys.stdout.write(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.style_json:
        style = SceneStyle.from_json(args.style_json)
    else:
        try:
            style = get_style(args.style)
        except KeyError:
            raise UsageError(f"unknown style {args.style!r}; valid presets: {', '.join(sorted(PRESETS))}")
    schema = ClassSchema.with_classes(args.classes)
    m = generate_dataset(style, schema, args.count, args.seed, args.out, size=args.size)
    log.info("wrote %d samples: %s", len(m), Path(args.out) / "manifest.json")
    return EXIT_OK


def _read_labeled(path: str, labels: str | None) -> LabeledImage:
    p = Path(path)
    if p.is_dir() or p.name == "manifest.json":
        return DatasetManifest.load(p).read_sample(0)
    lp = Path(labels) if labels else p.with_name(p.stem + "_labels.pgm")
    return LabeledImage(read_ppm(p), read_pgm(lp))


def cmd_mix(args) -> int:
    a = _read_labeled(args.a, args.a_labels)
    b = _read_labeled(args.b, args.b_labels)
    res = classmix_pp(a, b, Rng(args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ppm(out / "mixed.ppm", res.image)
    write_pgm(out / "mixed_labels.pgm", res.labels)
    write_pgm(out / "mask.pgm", res.mask)
    audit = {"selected_classes": res.selected_classes, "seed": args.seed}
    (out / "audit.json").write_text(json.dumps(audit, sort_keys=True) + "\n")
    log.info("mixed classes %s -> %s", res.selected_classes, out)
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    cfg = resolve_config(args)
    if args.print_config:
        _print_config(cfg)
        return EXIT_OK
    if not cfg.teacher.sources:
        raise ConfigError(["teacher.sources: at least one source manifest is required"])
    out = Path(cfg.out_dir) / "teacher"
    engine.train_teacher(cfg.teacher, out)
    log.info("teacher checkpoint: %s", out / "teacher.ckpt")
    return EXIT_OK


def cmd_adapt_student(args) -> int:
    cfg = resolve_config(args)
    if args.print_config:
        _print_config(cfg)
        return EXIT_OK
    if not cfg.student.target:
        raise ConfigError(["student.target: a target manifest is required"])
    ckpt = Path(args.teacher) if args.teacher else Path(cfg.out_dir) / "teacher" / "teacher.ckpt"
    if not ckpt.exists():
        raise UsageError(f"teacher checkpoint not found: {ckpt}")
    teacher, _ = model.load_checkpoint(ckpt)
    out = Path(cfg.out_dir) / "student"
    _, final_teacher, audit = engine.adapt_student(teacher, cfg.student, out)
    model.save_checkpoint(out / "teacher_ema.ckpt", final_teacher)
    log.info("student checkpoint: %s (target label reads: %d)", out / "student.ckpt", audit.reads)
    return EXIT_OK


def cmd_eval(args) -> int:
    for p in (args.checkpoint, args.data):
        if not Path(p).exists():
            raise UsageError(f"not found: {p}")
    params, _ = model.load_checkpoint(args.checkpoint)
    rep = engine.evaluate(params, args.data)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("report.json")
    engine.write_report(out, rep)
    log.info("mIoU %.4f over %d pixels -> %s", rep["miou"], rep["pixels_evaluated"], out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradcheck

    ok, summary = gradcheck.main_report(range(args.seeds))
    for path, s in summary.items():
        if path == "seconds":
            continue
        log.info("%-13s max rel. error %.3e over %d seeds (%d failures, %d redraws)",
                 path, s["max_rel_error"], s["seeds"], s["failures"], s["redraws"])
    log.info("gradcheck %s in %.1fs (tolerance %.0e)", "passed" if ok else "FAILED",
             summary["seconds"], gradcheck.TOLERANCE)
    return EXIT_OK if ok else EXIT_VERIFY


def generate_run_data(cfg: RunConfig) -> dict[str, DatasetManifest]:
    """Sources, unlabeled target and labeled held-out target for a ``run``."""
    d = cfg.data
    root = Path(d.root) if Path(d.root).is_absolute() else Path(cfg.out_dir) / d.root
    schema = ClassSchema.with_classes(d.classes)
    base = 1000 * cfg.seed
    out = {}
    for i, (style, n) in enumerate(sorted(d.sources.items())):
        out[style] = generate_dataset(get_style(style), schema, n, base + 1 + i, root / style, d.size, style)
    out["target"] = generate_dataset(get_style(d.target), schema, d.target_count, base + 101, root / "target",
                                     d.size, "target")
    out["heldout"] = generate_dataset(get_style(d.target), schema, d.heldout_count, base + 102, root / "heldout",
                                      d.size, "heldout")
    return out


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    if args.print_config:
        _print_config(cfg)
        return EXIT_OK
    problems = [f"data.sources.{s}: unknown style (valid: {', '.join(sorted(PRESETS))})"
                for s in cfg.data.sources if s not in PRESETS]
    if cfg.data.target not in PRESETS:
        problems.append(f"data.target: unknown style {cfg.data.target!r}")
    if problems:
        raise ConfigError(problems)
    out = Path(cfg.out_dir)
    data = generate_run_data(cfg)
    tcfg = cfg.teacher
    if not tcfg.sources:
        tcfg.sources = [str(data[s].root) for s in sorted(cfg.data.sources)]
    teacher = engine.train_teacher(tcfg, out / "teacher")
    scfg = cfg.student
    if not scfg.target:
        scfg.target = str(data["target"].root)
    if not scfg.sources:
        scfg.sources = list(tcfg.sources)
    student, _, audit = engine.adapt_student(teacher.params, scfg, out / "student")
    rep = {
        "teacher": engine.evaluate(teacher.params, data["heldout"]),
        "student": engine.evaluate(student.params, data["heldout"]),
        "target_label_reads": audit.reads,
    }
    engine.write_report(out / "report.json", rep)
    log.info("held-out target mIoU: teacher %.4f, student %.4f -> %s",
             rep["teacher"]["miou"], rep["student"]["miou"], out / "report.json")
    return EXIT_OK


def cmd_experiment(args) -> int:
    from . import experiment

    cfg = experiment.ExperimentConfig()
    if args.seeds is not None:
        cfg.seeds = list(range(args.seeds))
    if args.no_ablations:
        cfg.ablations = False
    out = Path(args.out)
    res = experiment.run(out, cfg)
    timing = [r.pop("seconds") for r in res["runs"]]
    res["summary"].pop("seconds", None)
    (out / "experiment.json").write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")
    s = res["summary"]
    log.info("multi-source wins %d/%d, adaptation wins %d/%d, label reads %d, %.0fs",
             s["multi_source_wins"], len(cfg.seeds), s["adaptation_wins"], len(cfg.seeds),
             s["label_reads"], sum(timing))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="synthgen", description="Multi-source class mixing, masked consistency and "
                                             "contrastive adaptation on procedural street scenes.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    p.add_argument("--print-config", action="store_true",
                   help="print the effective run configuration as JSON and exit")
    p.add_argument("--config", help="run configuration JSON (with --print-config)")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a labeled dataset")
    g.add_argument("--style", default="src_a", help=f"preset: {', '.join(sorted(PRESETS))}")
    g.add_argument("--style-json", help="style definition file (overrides --style)")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--classes", type=int, default=8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    m = sub.add_parser("mix", help="class-mix two labeled images")
    m.add_argument("--a", required=True, help="PPM image (labels at <stem>_labels.pgm) or dataset dir")
    m.add_argument("--b", required=True)
    m.add_argument("--a-labels")
    m.add_argument("--b-labels")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mix)

    def config_cmd(name, func, help_):
        c = sub.add_parser(name, help=help_)
        c.add_argument("--config", help="run configuration JSON (defaults when omitted)")
        c.add_argument("--seed", type=int)
        c.add_argument("--out", help="output directory (overrides out_dir)")
        c.add_argument("--gmc-patch-size", type=int)
        c.add_argument("--gmc-ratio", type=float)
        c.add_argument("--print-config", action="store_true")
        c.set_defaults(func=func)
        return c

    config_cmd("train-teacher", cmd_train_teacher, "train the teacher on source manifests")
    a = config_cmd("adapt-student", cmd_adapt_student, "adapt a student on the unlabeled target")
    a.add_argument("--teacher", help="teacher checkpoint (default <out_dir>/teacher/teacher.ckpt)")
    config_cmd("run", cmd_run, "generate data, train, adapt and evaluate end to end")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a labeled dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="dataset dir or manifest.json")
    e.add_argument("--out", help="report path (default: report.json next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every gradient path")
    gc.add_argument("--seeds", type=int, default=20)
    gc.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("experiment", help="five-seed adaptation experiment with ablations")
    x.add_argument("--out", required=True)
    x.add_argument("--seeds", type=int)
    x.add_argument("--no-ablations", action="store_true")
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        if args.command is None:
            if args.print_config:
                _print_config(resolve_config(args))
                return EXIT_OK
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        log.error("error: %s", exc)
        return EXIT_USAGE
    except (NetpbmError, ValueError, RuntimeError, OSError, FloatingPointError) as exc:
        log.error("failed: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
