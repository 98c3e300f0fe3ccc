"""``flowtrack`` command line: synth, train, track, eval, gradcheck."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from .config import ConfigError, load_config, section
from .cost import load_checkpoint, save_checkpoint
from .data import (read_mot_csv, read_sequence, split_train_val, synth_dataset, write_results,
                   write_sequence, RESULTS)
from .gradcheck import run_gradcheck
from .metrics import aggregate, evaluate, format_table, write_report_csv
from .tracking import track_sequence
from .training import TrainingAborted, split_sequence, train, write_trace

logger = logging.getLogger("flowtrack")


class CliError(RuntimeError):
    pass


def _write_meta(out: Path, cfg: dict, command: str, **extra) -> None:
    doc = {"command": command, "seed": cfg["seed"], "config": cfg, **extra}
    (out / "meta.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def sequence_dirs(path) -> list:
    """A sequence directory (holding det.txt) or a directory of them."""
    p = Path(path)
    if not p.is_dir():
        raise CliError(f"no such directory: {p}")
    if (p / "det.txt").exists():
        return [p]
    dirs = sorted(d for d in p.iterdir() if d.is_dir() and (d / "det.txt").exists())
    if not dirs:
        raise CliError(f"no sequences (det.txt) under {p}")
    return dirs


def cmd_synth(cfg, args) -> int:
    out = Path(args.out)
    sc = section(cfg, "synth")
    n = int(cfg["synth"]["n_sequences"])
    out.mkdir(parents=True, exist_ok=True)
    for k, seq in enumerate(synth_dataset(sc, n)):
        seq.metadata["name"] = f"seq_{k:03d}"
        write_sequence(seq, out / seq.metadata["name"])
    _write_meta(out, cfg, "synth", n_sequences=n)
    print(f"wrote {n} sequences to {out}")
    return 0


def cmd_train(cfg, args) -> int:
    out = Path(args.out)
    tc = section(cfg, "train")
    seqs = [read_sequence(d) for d in sequence_dirs(args.data)]
    tr, va = split_train_val(seqs, cfg["train"]["val_fraction"], cfg["train"]["val_names"])
    graphs = [g for s in tr for g in split_sequence(s, tc)]
    val = [g for s in va for g in split_sequence(s, tc)]
    if not graphs:
        raise CliError("no training graphs (sequences lack detections or gt)")
    init = opt_state = None
    start_epoch = 0
    if args.resume:
        init, extra = load_checkpoint(args.resume)
        opt_state = extra.get("optimizer")
        start_epoch = int(extra.get("epoch", 0))
    res = train(graphs, tc, val, init=init, optimizer_state=opt_state, start_epoch=start_epoch,
                jobs=args.jobs)
    out.mkdir(parents=True, exist_ok=True)
    end_epoch = start_epoch + tc.epochs
    save_checkpoint(out / "checkpoint.json", res.params,
                    {"epoch": res.best_epoch, "step": res.step, "loss_kind": tc.loss_kind})
    save_checkpoint(out / "last.json", res.final_params,
                    {"epoch": end_epoch, "step": res.step, "optimizer": res.optimizer_state,
                     "loss_kind": tc.loss_kind})
    write_trace(res.trace, out / "trace.csv")
    _write_meta(out, cfg, "train", n_train_graphs=len(graphs), n_val_graphs=len(val),
                best_epoch=res.best_epoch, step=res.step, dropped=res.n_dropped)
    print(f"trained {tc.epochs} epochs ({res.step} steps); best epoch {res.best_epoch}; "
          f"checkpoint {out / 'checkpoint.json'}")
    return 0


def cmd_track(cfg, args) -> int:
    out = Path(args.out)
    if args.no_second_stage:
        cfg["track"]["second_stage"] = False
    tk = section(cfg, "track")
    w, _ = load_checkpoint(args.checkpoint)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for d in sequence_dirs(args.data):
        seq = read_sequence(d)
        res = track_sequence(seq.detections, seq.embeddings, w, tk, n_frames=seq.n_frames)
        write_results(res.tracks, out / f"{d.name}.txt")
        names.append(d.name)
        print(f"{d.name}: {len(res.tracks)} tracks")
    _write_meta(out, cfg, "track", sequences=names)
    return 0


def cmd_eval(cfg, args) -> int:
    thr = cfg["eval"]["iou_threshold"]
    res_dir = Path(args.results)
    reports = []
    for d in sequence_dirs(args.gt):
        gt_file, res_file = d / "gt.txt", res_dir / f"{d.name}.txt"
        for f in (gt_file, res_file):
            if not f.exists():
                raise CliError(f"missing file: {f}")
        gt = read_mot_csv(gt_file, "ground_truth")
        pred = read_mot_csv(res_file, RESULTS)
        reports.append(evaluate(gt, pred, thr, name=d.name))
    reports.append(aggregate(reports))
    table = format_table(reports)
    print(table, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(table)
        write_report_csv(reports, out / "report.csv")
    return 0


def cmd_gradcheck(cfg, args) -> int:
    g = cfg["gradcheck"]
    rep = run_gradcheck(n_graphs=g["n_graphs"], m_max=g["m_max"], n_frames=g["n_frames"],
                        gamma=g["gamma"], step=g["step"], tol=g["tol"], loss=g["loss"], seed=cfg["seed"])
    text = "\n".join(rep.lines()) + "\n"
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.txt").write_text(text)
        doc = {"seed": cfg["seed"], "passed": rep.passed, "max_rel_error": rep.max_rel_error,
               "per_instance": rep.per_instance, "degenerate_instances": rep.degenerate_instances,
               "excluded_components": rep.excluded_components, "config": g}
        (out / "gradcheck.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return 0 if rep.passed else 1


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "track": cmd_track, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="run seed (overrides config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="worker cap for per-graph parallelism")

    p = argparse.ArgumentParser(prog="flowtrack", description=__doc__,
                                epilog="Config keys can be overridden with dotted flags, e.g. --train.gamma 0.05")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate synthetic sequences")
    t = sub.add_parser("train", parents=[common], help="train the transition cost")
    t.add_argument("--data", required=True, help="sequence directory or directory of sequences")
    t.add_argument("--resume", help="checkpoint (last.json) to continue from")
    k = sub.add_parser("track", parents=[common], help="track sequences")
    k.add_argument("--data", required=True)
    k.add_argument("--checkpoint", required=True)
    k.add_argument("--no-second-stage", action="store_true", help="first-stage association only")
    e = sub.add_parser("eval", parents=[common], help="evaluate result files against gt")
    e.add_argument("--gt", required=True, help="sequence directory or directory of sequences")
    e.add_argument("--results", required=True, help="directory of <sequence>.txt result files")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the backward pass")
    return p


def _split_overrides(extra):
    """``--section.key value`` / ``--section.key=value`` pairs from unparsed args."""
    pairs = []
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unrecognised argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            value = next(it, None)
            if value is None:
                raise ConfigError(f"missing value for {tok}")
        pairs.append((key, value))
    return pairs


def main(argv=None) -> int:
    level = os.environ.get("FLOWTRACK_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        cfg = load_config(args.config, _split_overrides(extra), args.seed)
        if args.command in ("synth", "train", "track") and not args.out:
            raise CliError(f"{args.command} requires --out")
        if args.jobs < 1:
            raise CliError("--jobs must be >= 1")
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"flowtrack: config error: {exc}", file=sys.stderr)
        return 2
    except (CliError, TrainingAborted, OSError, ValueError) as exc:
        print(f"flowtrack: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
