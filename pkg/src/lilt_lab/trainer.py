"""AdamW training loop with linear warmup/decay and freeze-respecting updates."""

from __future__ import annotations

import configparser
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, contrastive, corpus, evaluation, freeze, kernels
from . import tensor as T

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    def __init__(self, step: int, lr: float, max_grad: float, loss: float):
        self.step, self.lr, self.max_grad, self.loss = step, lr, max_grad, loss
        super().__init__(f"non-finite loss {loss} at step {step} (lr={lr:.3g}, max |grad|={max_grad:.3g})")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# optimizer


def decays(path: str) -> bool:
    """Weight decay applies to matrices and embeddings, not LN/bias/temperature."""
    leaf = path.rsplit(".", 1)[-1]
    return leaf not in ("bias", "gamma", "beta", "log_tau")


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.02


def adamw_step(params: dict, state: OptimizerState, lr: float) -> None:
    """One AdamW update of every trainable tensor in ``params``.

    Decay is decoupled and applied first (``p -= lr * wd * p``), then the
    bias-corrected Adam step. Frozen tensors are skipped and keep their
    arrays untouched.
    """
    trainable = {p: t for p, t in params.items() if t.requires_grad}
    for path, t in trainable.items():
        if t.grad is None:
            raise T.GraphError(f"missing gradient for trainable parameter {path}")
    state.t += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for path, t in trainable.items():
        dt = t.dtype.type
        g = t.grad
        m = state.m.get(path)
        v = state.v.get(path)
        m = (1 - b1) * g if m is None else dt(b1) * m + dt(1 - b1) * g
        v = (1 - b2) * g * g if v is None else dt(b2) * v + dt(1 - b2) * g * g
        state.m[path], state.v[path] = m.astype(t.dtype), v.astype(t.dtype)
        p = t.data
        if state.weight_decay and decays(path):
            p = p - dt(lr * state.weight_decay) * p
        mhat = state.m[path] / dt(c1)
        vhat = state.v[path] / dt(c2)
        t.data = (p - dt(lr) * mhat / (np.sqrt(vhat) + dt(state.eps))).astype(t.dtype)
    for path in [p for p in state.m if p not in trainable]:
        del state.m[path], state.v[path]


@dataclass(frozen=True)
class Schedule:
    base_lr: float
    warmup_steps: int
    total_steps: int
    final_lr: float

    def lr_at(self, step: int) -> float:
        """Linear 0 -> base over warmup, then linear base -> final."""
        if step < 0:
            raise ValueError("step must be non-negative")
        if self.warmup_steps > 0 and step <= self.warmup_steps:
            return self.base_lr * step / self.warmup_steps
        span = self.total_steps - self.warmup_steps
        if span <= 0:
            return self.final_lr
        frac = min((step - self.warmup_steps) / span, 1.0)
        return self.base_lr + (self.final_lr - self.base_lr) * frac


def lr_at(schedule: Schedule, step: int) -> float:
    return schedule.lr_at(step)


# ---------------------------------------------------------------------------
# config


@dataclass(frozen=True)
class TrainConfig:
    preset: str = "lilt_lwa"
    size: str = "tiny"
    batch_size: int = 64
    epochs: int = 30
    warmup_epochs: int = 20
    base_lr: float = 1e-3
    final_lr: float = 1e-5
    weight_decay: float = 0.02
    seed: int = 0
    paper_literal: bool = False
    out_dir: str = "runs/default"
    checkpoint_every: int = 10  # epochs; 0 disables periodic checkpoints
    corpus_dir: str = ""  # empty: regenerate from the corpus fields below
    n_pairs: int = 512
    corpus_seed: int = 0
    max_steps: int = 0  # 0: run all epochs
    locked_patterns: tuple = ()

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (the loss needs a negative)")
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError("warmup_epochs must lie in [0, epochs]")
        if self.preset not in freeze.PRESET_NAMES:
            raise ConfigError(f"unknown preset {self.preset!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["locked_patterns"] = list(self.locked_patterns)
        return d

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


_SECTIONS = {
    "model": ("preset", "size", "paper_literal", "locked_patterns"),
    "optim": ("batch_size", "epochs", "warmup_epochs", "base_lr", "final_lr", "weight_decay", "max_steps"),
    "run": ("seed", "out_dir", "checkpoint_every"),
    "corpus": ("corpus_dir", "n_pairs", "corpus_seed"),
}


def config_to_text(cfg: TrainConfig) -> str:
    lines = []
    d = cfg.to_dict()
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        for k in keys:
            v = d[k]
            if isinstance(v, list):
                v = ", ".join(v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)


def load_config(path_or_text: str | Path, **overrides) -> TrainConfig:
    """Parse the sectioned ``key = value`` format written by :func:`config_to_text`."""
    parser = configparser.ConfigParser()
    raw = str(path_or_text)
    is_file = isinstance(path_or_text, Path) or (raw and "\n" not in raw and "=" not in raw and Path(raw).is_file())
    if is_file and not Path(raw).is_file():
        raise ConfigError(f"config file not found: {raw}")
    text = Path(raw).read_text() if is_file else raw
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from None
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values: dict = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r} in [{section}]")
            values[key] = raw
    values.update({k: v for k, v in overrides.items() if v is not None})
    typed = {}
    for key, raw in values.items():
        default = fields[key].default
        try:
            if not isinstance(raw, str):
                typed[key] = tuple(raw) if isinstance(default, tuple) else raw
            elif isinstance(default, bool):
                if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(raw)
                typed[key] = raw.lower() in ("true", "1", "yes")
            elif isinstance(default, int):
                typed[key] = int(raw)
            elif isinstance(default, float):
                typed[key] = float(raw)
            elif isinstance(default, tuple):
                typed[key] = tuple(p.strip() for p in raw.split(",") if p.strip())
            else:
                typed[key] = raw
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return TrainConfig(**typed)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: object
    initial_state: dict
    metrics: list
    out_dir: Path | None
    heldout: dict | None = None


def corpus_for(cfg: TrainConfig):
    if cfg.corpus_dir:
        records, spec = corpus.load_corpus(cfg.corpus_dir)
    else:
        spec = corpus.SyntheticSpec(n_pairs=cfg.n_pairs, seed=cfg.corpus_seed)
        records = corpus.generate(spec)
    return records, spec


def _snapshot(model) -> dict:
    return {p: t.data.copy() for p, t in model.params.items()}


def _write_ckpt(out: Path | None, model, step: int, cfg: TrainConfig) -> None:
    if out is None:
        return
    checkpoint.save_checkpoint(
        out / f"ckpt_step{step:06d}.bin", model, step=step, preset=cfg.preset, kernels=kernels.BACKEND
    )


def train(cfg: TrainConfig, records=None, spec=None, write: bool = True, evaluate: bool = True) -> TrainResult:
    """Train one preset on the synthetic corpus.

    Writes ``config.ini``, ``metrics.jsonl`` (one JSON object per step),
    ``ckpt_step000000.bin`` before any update, periodic checkpoints,
    ``final.bin`` and, with ``evaluate``, ``eval.json`` for the held-out split.
    """
    if records is None:
        records, spec = corpus_for(cfg)
    vocab = corpus.build_vocab(spec)
    train_recs, held_recs = corpus.split(records, spec)
    recipe = freeze.preset(cfg.preset, cfg.size, cfg.paper_literal)
    if cfg.locked_patterns:
        recipe = dataclasses.replace(recipe, plan=recipe.plan.with_locked(cfg.locked_patterns))
    model = freeze.build_model(recipe, seed=cfg.seed, paper_literal=cfg.paper_literal)
    if vocab.size > model.size.text.vocab_size:
        raise ConfigError(f"corpus vocabulary ({vocab.size}) exceeds the text tower's ({model.size.text.vocab_size})")
    accounting = freeze.model_accounting(model)

    pixels = corpus.to_model_input(np.stack([r.pixels for r in train_recs]), T.default_dtype())
    tokens = corpus.tokenize_batch([r.caption for r in train_recs], vocab, model.size.text.max_seq_len)
    steps_per_epoch = len(train_recs) // cfg.batch_size
    if steps_per_epoch == 0:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds training split of {len(train_recs)}")
    total = steps_per_epoch * cfg.epochs
    sched = Schedule(cfg.base_lr, steps_per_epoch * cfg.warmup_epochs, total, cfg.final_lr)
    state = OptimizerState(weight_decay=cfg.weight_decay)

    out = Path(cfg.out_dir) if write else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(config_to_text(cfg))
        metrics_fh = open(out / "metrics.jsonl", "w")
    initial = _snapshot(model)
    _write_ckpt(out, model, 0, cfg)

    metrics = []
    step = 0
    try:
        for epoch in range(cfg.epochs):
            for idx in corpus.batch_iter(len(train_recs), cfg.batch_size, cfg.seed, epoch):
                step += 1
                lr = sched.lr_at(step)
                model.zero_grad()
                s = contrastive.similarity(model.embed_image(pixels[idx]), model.embed_text(tokens[idx]))
                loss = contrastive.total_loss(s, log_tau=model.log_tau())
                loss_val = float(loss.data)
                T.backward(loss)
                grads = [t.grad for t in model.params.values() if t.requires_grad and t.grad is not None]
                if not np.isfinite(loss_val) or not all(np.isfinite(g).all() for g in grads):
                    max_grad = max((float(np.max(np.abs(g))) for g in grads if g.size), default=0.0)
                    raise NumericalError(step, lr, max_grad, loss_val)
                adamw_step(model.params, state, lr)
                rec = {
                    "step": step,
                    "epoch": epoch,
                    "lr": lr,
                    "loss": loss_val,
                    "percent_trained": accounting.percent_trained,
                }
                metrics.append(rec)
                if metrics_fh:
                    metrics_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                if cfg.max_steps and step >= cfg.max_steps:
                    break
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                _write_ckpt(out, model, step, cfg)
            if cfg.max_steps and step >= cfg.max_steps:
                break
    finally:
        if metrics_fh:
            metrics_fh.close()
    model.zero_grad()
    if out is not None:
        checkpoint.save_checkpoint(out / "final.bin", model, step=step, preset=cfg.preset, kernels=kernels.BACKEND)
    heldout = None
    if evaluate and len(held_recs) >= 2:
        res = evaluation.evaluate_records(model, held_recs, vocab)
        heldout = {"preset": cfg.preset, "seed": cfg.seed, "split": "heldout", "n": len(held_recs), **res.to_dict()}
        if out is not None:
            (out / "eval.json").write_text(json.dumps(heldout, sort_keys=True, indent=2) + "\n")
    return TrainResult(model, initial, metrics, out, heldout)
