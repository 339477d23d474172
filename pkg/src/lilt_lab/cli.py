"""``lilt-lab`` command line: corpus generation, training, evaluation, accounting, analysis.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import logging
import os
import platform
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, analysis, checkpoint, corpus, evaluation, freeze, kernels, trainer
from . import tensor as T

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 2, 3
OUT_ENV = "LILT_LAB_OUT"  # the only environment override: output directory
MANIFEST_VERSION = 1

log = logging.getLogger("lilt_lab")


class UsageError(ValueError):
    pass


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


@dataclass
class RunManifest:
    config: dict
    preset: str
    seed: int
    tool_version: str = __version__
    format_versions: dict = dataclasses.field(
        default_factory=lambda: {"checkpoint": checkpoint.FORMAT_VERSION, "manifest": MANIFEST_VERSION}
    )
    environment: dict = dataclasses.field(
        default_factory=lambda: {
            "kernels": kernels.BACKEND,
            "gelu": kernels.GELU_VARIANT,
            "numpy": np.__version__,
            "python": platform.python_version(),
        }
    )
    created_at: str = dataclasses.field(default_factory=_now)
    finished_at: str | None = None
    status: str = "started"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        _write_json(path, self.to_dict())
        return path


# ---------------------------------------------------------------------------
# commands


def cmd_gen_corpus(args) -> int:
    spec_dict = {}
    if args.config:
        spec_dict = json.loads(Path(args.config).read_text())
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    if args.n_pairs is not None:
        spec_dict["n_pairs"] = args.n_pairs
    spec = corpus.SyntheticSpec.from_dict(spec_dict)
    records = corpus.generate(spec)
    out = Path(_out_dir(args, "corpus"))
    corpus.save_corpus(records, spec, out)
    print(json.dumps({"pairs": len(records), "out": str(out)}))
    return EXIT_OK


def _train_config(args) -> trainer.TrainConfig:
    overrides = {
        "preset": args.preset,
        "size": args.size,
        "seed": args.seed,
        "out_dir": args.out or os.environ.get(OUT_ENV) or None,
        "paper_literal": True if args.paper_literal else None,
        "corpus_dir": args.corpus,
        "epochs": args.epochs,
        "max_steps": args.max_steps,
        "batch_size": args.batch_size,
    }
    if args.epochs is not None and args.warmup_epochs is None:
        # keep the default warmup ratio when only the epoch count changes
        overrides["warmup_epochs"] = args.epochs * 2 // 3
    else:
        overrides["warmup_epochs"] = args.warmup_epochs
    text = Path(args.config).read_text() if args.config else ""
    return trainer.load_config(text, **overrides)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    if cfg.corpus_dir and not Path(cfg.corpus_dir, "index.jsonl").exists():
        raise UsageError(f"corpus not found at {cfg.corpus_dir!r}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(config=cfg.to_dict(), preset=cfg.preset, seed=cfg.seed)
    manifest.write(out)
    try:
        res = trainer.train(cfg, write=True, evaluate=True)
    except trainer.NumericalError:
        manifest.status, manifest.finished_at = "numerical_failure", _now()
        manifest.write(out)
        raise
    manifest.status, manifest.finished_at = "completed", _now()
    manifest.write(out)
    summary = {"out": str(out), "steps": len(res.metrics), "final_loss": res.metrics[-1]["loss"] if res.metrics else None}
    if res.heldout:
        summary.update({k: res.heldout[k] for k in ("tr@1", "ir@1", "mean_tr", "mean_ir")})
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _attribute_classification(model, records, spec, vocab, template) -> dict:
    pixels = corpus.to_model_input(np.stack([r.pixels for r in records]), T.default_dtype())
    out = {}
    for idx, name in enumerate(("shape", "color", "position", "size")):
        classes = list(getattr(spec, name + "s"))
        labels = [classes.index(r.attributes[idx]) for r in records]
        ks = tuple(k for k in (1, 5) if k <= len(classes))
        out[name] = evaluation.zero_shot_classify(model, pixels, labels, classes, vocab, template, ks)
        out[name]["n_classes"] = len(classes)
    return out


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise UsageError("eval needs a checkpoint path")
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    model, meta = checkpoint.load_checkpoint(args.checkpoint)
    if args.corpus:
        if not Path(args.corpus, "index.jsonl").exists():
            raise UsageError(f"corpus not found at {args.corpus!r}")
        records, spec = corpus.load_corpus(args.corpus)
    else:
        spec = corpus.SyntheticSpec(seed=args.seed or 0)
        records = corpus.generate(spec)
    vocab = corpus.build_vocab(spec)
    if vocab.size > model.size.text.vocab_size:
        raise UsageError(f"corpus vocabulary ({vocab.size}) exceeds the model's ({model.size.text.vocab_size})")
    if spec.image_size != model.size.image.image_size:
        raise UsageError(f"corpus images are {spec.image_size}px, model expects {model.size.image.image_size}px")
    train_recs, held_recs = corpus.split(records, spec)
    subset = {"heldout": held_recs, "train": train_recs, "all": list(records)}[args.split]
    retrieval = evaluation.evaluate_records(model, subset, vocab)
    report = {
        "checkpoint": str(args.checkpoint),
        "step": meta.get("step"),
        "preset": meta.get("preset"),
        "split": args.split,
        "n": len(subset),
        "seed": meta.get("model", {}).get("seed"),
        "retrieval": retrieval.to_dict(),
        **retrieval.to_dict(),
        "zero_shot": _attribute_classification(model, subset, spec, vocab, args.template),
        "template": args.template,
    }
    # headline top-1/top-5 from the largest attribute vocabulary (color)
    report["top1"] = report["zero_shot"]["color"].get("top1")
    report["top5"] = report["zero_shot"]["color"].get("top5")
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        if out.suffix != ".json":
            out.mkdir(parents=True, exist_ok=True)
            out = out / "eval_report.json"
        else:
            out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_count_params(args) -> int:
    name = args.preset or "lilt_lwa"
    if name not in freeze.PRESET_NAMES:
        raise UsageError(f"unknown preset {name!r}; choose from {', '.join(freeze.PRESET_NAMES)}")
    acc = freeze.count_preset(name, args.size or "base", args.paper_literal)
    print(json.dumps({"preset": name, "size": args.size or "base", **acc.to_dict()}, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_analyze(args) -> int:
    for p in (args.before, args.after):
        if not Path(p).exists():
            raise UsageError(f"checkpoint not found: {p}")
    report = analysis.ln_drift(args.before, args.after, strict=False)
    out = Path(_out_dir(args, "analysis"))
    jp, cp = report.write(out)
    print(json.dumps({"json": str(jp), "csv": str(cp), "pearson_r": report.pearson_r,
                      "correlation_undefined": report.correlation_undefined}, sort_keys=True))
    return EXIT_OK


def cmd_lock_sweep(args) -> int:
    args.preset = args.preset or "lilt_ln"
    cfg = _train_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(config=cfg.to_dict(), preset="lilt_ln", seed=cfg.seed)
    manifest.write(out)
    ks = [int(k) for k in args.ks.split(",")] if args.ks else None
    rows = analysis.progressive_lock_run(cfg, ks=ks, jobs=max(1, args.jobs), out_dir=out / "arms")
    _write_json(out / "lock_sweep.json", rows)
    (out / "lock_sweep.csv").write_text(analysis.lock_rows_to_csv(rows))
    manifest.status, manifest.finished_at = "completed", _now()
    manifest.write(out)
    print(analysis.lock_rows_to_csv(rows), end="")
    return EXIT_OK


def _out_dir(args, default: str) -> str:
    return args.out or os.environ.get(OUT_ENV) or default


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lilt-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, train_like=False):
        p.add_argument("--config", help="config file (INI for train/lock-sweep, JSON spec for gen-corpus)")
        p.add_argument("--preset", choices=freeze.PRESET_NAMES)
        p.add_argument("--size")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help=f"output path (or ${OUT_ENV})")
        p.add_argument("--paper-literal", action="store_true", help="fix the temperature at 1")
        p.add_argument("--jobs", type=int, default=1)
        if train_like:
            p.add_argument("--corpus", help="corpus directory written by gen-corpus")
            p.add_argument("--epochs", type=int)
            p.add_argument("--warmup-epochs", type=int)
            p.add_argument("--max-steps", type=int)
            p.add_argument("--batch-size", type=int)

    p = sub.add_parser("gen-corpus", help="write the synthetic corpus to a directory")
    common(p)
    p.add_argument("--n-pairs", type=int)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train one preset")
    common(p, train_like=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="retrieval and zero-shot report for a checkpoint")
    common(p)
    p.add_argument("checkpoint", nargs="?")
    p.add_argument("--corpus")
    p.add_argument("--split", choices=("heldout", "train", "all"), default="heldout")
    p.add_argument("--template", default=evaluation.DEFAULT_TEMPLATE)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("count-params", help="schema-only parameter accounting")
    common(p)
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("analyze", help="layer-norm drift between two checkpoints")
    common(p)
    p.add_argument("before")
    p.add_argument("after")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("lock-sweep", help="progressive LN locking, patterns A and B")
    common(p, train_like=True)
    p.add_argument("--ks", help="comma-separated k values (default 0..depth)")
    p.set_defaults(func=cmd_lock_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (trainer.NumericalError, T.DegenerateEmbeddingError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
