"""Command-line entry point: data generation, training, decoding, baselines and evaluation.

Exit codes: 0 success, 1 configuration / input error, 2 training divergence.
Log verbosity comes from ``MLVAE_LOG_LEVEL`` (default WARNING).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import lattice, metrics, synthdata, training
from .core import LocalizationResult, ValidationError

log = logging.getLogger("mlvae")


class CliError(Exception):
    pass


def _write_jsonl(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def _read_jsonl(path) -> list[dict]:
    rows = []
    with open(path) as fh:
        for i, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise CliError(f"{path}:{i}: invalid JSON ({exc.msg})") from None
    return rows


def _require_dir(path, what):
    if not Path(path).exists():
        raise CliError(f"{what} not found: {path}")


# ---------------------------------------------------------------------------
# commands

_GEN_FLAGS = {"num_utts": "total", "dim": "feature_dim", "sep": "sep", "dur_min": "d_min", "dur_max": "d_max",
              "mismatch_rate": "mismatch_rate", "seed": "seed"}


def cmd_gen_data(args) -> int:
    data = _load_config(args.config)
    known = {f.name for f in dataclasses.fields(synthdata.CorpusConfig)}
    for key in data:
        if key not in known:
            raise CliError(f"unknown config key {key!r}")
    for flag, field in _GEN_FLAGS.items():
        if getattr(args, flag) is not None:
            data[field] = getattr(args, flag)
    cfg = synthdata.CorpusConfig(**data)
    splits = synthdata.gen_dataset(cfg)
    synthdata.write_corpus(args.out, splits, cfg)
    summary = {name: {"utterances": len(u), "mismatch_fraction": synthdata.mismatch_fraction(u)}
               for name, u in splits.items()}
    print(json.dumps({"out": str(args.out), "splits": summary}, sort_keys=True, indent=1))
    return 0


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise CliError(f"config {path} must hold a JSON object")
    return data


def cmd_train(args) -> int:
    _require_dir(args.data, "dataset")
    if args.resume is not None:
        _require_dir(args.resume, "checkpoint")
    data = _load_config(args.config)
    for key, value in (("variant", args.variant), ("ablation", args.ablation), ("seed", args.seed),
                       ("epochs", args.epochs)):
        if value is not None:
            data[key] = value
    cfg, model_cfg = training.config_from_dict(data)
    corpus = synthdata.read_corpus(args.data)
    if "train" not in corpus or "valid" not in corpus:
        raise CliError(f"{args.data} must contain train/ and valid/ splits")
    train_utts = corpus["train"][:args.max_train] if args.max_train else corpus["train"]
    try:
        if args.resume is not None:
            res = training.resume(args.resume, train_utts, corpus["valid"], out_dir=args.out)
        else:
            res = training.train(train_utts, corpus["valid"], cfg, model_cfg, out_dir=args.out)
    except training.TrainingDiverged as exc:
        print(f"error: {exc}; diagnostic checkpoint: {exc.checkpoint_path}", file=sys.stderr)
        return 2
    print(json.dumps({"best_epoch": res.best_epoch, "best_valid_score": res.best_score,
                      "selection_metric": res.history[-1].get("selection_metric") if res.history else None,
                      "epochs_run": len(res.history), "model": str(Path(args.out) / "model.ckpt")}, indent=1))
    return 0


def _posteriors(model, utts, with_correctness):
    out = []
    for i in range(0, len(utts), 128):
        part = utts[i:i + 128]
        out.extend(model.posteriors(model.batch([u.X for u in part]), with_correctness=with_correctness))
    return out


def cmd_localize(args) -> int:
    model = training.load_model(args.model)
    utts = synthdata.load_split(args.data)
    rows, dumps = [], []
    for u, p in zip(utts, _posteriors(model, utts, True)):
        res = lattice.decode_posteriors(p, u.C, model.inventory.prior)
        rows.append({"id": u.id, **res.localization(u.C).to_dict(), "log_score": res.log_score})
        if args.dump_trellis:
            dumps.append(f"# {u.id}\n" + lattice.dump_trellis(res, model.inventory.symbols, u.C))
    _write_jsonl(args.out, rows)
    if args.dump_trellis:
        Path(args.dump_trellis).write_text("\n".join(dumps) + "\n")
    return 0


def cmd_align(args) -> int:
    model = training.load_model(args.model)
    utts = synthdata.load_split(args.data)
    rows, ious, hits, total = [], [], 0, 0
    for u, p in zip(utts, _posteriors(model, utts, False)):
        B = lattice.align_posteriors(p, u.C, model.inventory.prior)
        loc = LocalizationResult.from_path(u.C, B, np.zeros(u.num_phonemes, dtype=bool))
        starts = np.flatnonzero(B).tolist()
        rows.append({"id": u.id, "boundaries": starts, **loc.to_dict()})
        if u.truth is not None:
            ious.append(metrics.segment_ious(loc, u))
            h, n = metrics.boundary_hits(starts, u)
            hits, total = hits + h, total + n
    _write_jsonl(args.out, rows)
    if len(ious) == len(utts):
        print(json.dumps({"alignment_avg_iou": float(np.concatenate(ious).mean()),
                          "boundary_accuracy": hits / total if total else 1.0}, sort_keys=True))
    return 0


def cmd_baseline(args) -> int:
    model = training.load_model(args.model)
    utts = synthdata.load_split(args.data)
    fn = lattice.fa_localize_posteriors if args.which == "fa" else lattice.two_pass_from_posteriors
    rows = [{"id": u.id, **fn(p, u.C, model.inventory.prior).to_dict()}
            for u, p in zip(utts, _posteriors(model, utts, False))]
    _write_jsonl(args.out, rows)
    return 0


def cmd_evaluate(args) -> int:
    utts = synthdata.load_split(args.data)
    preds = {}
    for row in _read_jsonl(args.pred):
        if "id" not in row or "segments" not in row:
            raise CliError(f"{args.pred}: every line needs 'id' and 'segments'")
        preds[row["id"]] = LocalizationResult.from_dict(row)
    reports = metrics.evaluate(preds, utts)
    doc = metrics.build_report(reports, {"pred": str(args.pred), "data": str(args.data)})
    text = metrics.dumps_report(doc)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    corpus = doc["corpus"]
    print(json.dumps({k: corpus[k] for k in ("PR_ML", "RE_ML", "F1_ML", "alignment_avg_iou")}, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlvae", description="Mismatch localization with a multi-latent VAE.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--config", type=Path, help="JSON object of corpus settings; flags override it")
    g.add_argument("--num-utts", type=int, help="total utterances (default 3000)")
    g.add_argument("--mismatch-rate", type=float, help="per-digit mismatch probability (default 0.201)")
    g.add_argument("--seed", type=int)
    g.add_argument("--dim", type=int, help="feature dimension (default 8)")
    g.add_argument("--sep", type=float, help="minimum mean separation in sigmas (default 4)")
    g.add_argument("--dur-min", type=int)
    g.add_argument("--dur-max", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--config", type=Path)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--variant", choices=training.VARIANTS)
    t.add_argument("--ablation", choices=training.ABLATIONS)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-train", type=int, help="use only the first N training utterances")
    t.add_argument("--resume", type=Path, help="continue from a last.ckpt written by an earlier run")
    t.set_defaults(func=cmd_train)

    for name, func, text in (("localize", cmd_localize, "joint boundary and mismatch decoding"),
                             ("align", cmd_align, "forced alignment")):
        c = sub.add_parser(name, help=text)
        c.add_argument("--model", required=True, type=Path)
        c.add_argument("--data", required=True, type=Path)
        c.add_argument("--out", required=True, type=Path)
        if name == "localize":
            c.add_argument("--dump-trellis", type=Path, help="write the chosen path per utterance as a table")
        c.set_defaults(func=func)

    b = sub.add_parser("baseline", help="forced-alignment or two-pass baselines")
    b.add_argument("--which", choices=("fa", "two-pass"), required=True)
    b.add_argument("--model", required=True, type=Path)
    b.add_argument("--data", required=True, type=Path)
    b.add_argument("--out", required=True, type=Path)
    b.set_defaults(func=cmd_baseline)

    e = sub.add_parser("evaluate", help="score predictions against ground truth")
    e.add_argument("--pred", required=True, type=Path)
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--out", type=Path)
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    level = logging.getLevelName(os.environ.get("MLVAE_LOG_LEVEL", "WARNING").upper())
    logging.basicConfig(level=level if isinstance(level, int) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, training.ConfigError, ValidationError, ckpt.CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
