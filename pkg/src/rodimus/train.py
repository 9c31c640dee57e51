"""Training harness: deterministic loops for the MQAR recall task and
byte-level language modeling, with jsonl+csv metric logs and resumable
checkpoints.

Determinism contract: with a fixed seed, batch order is a pure function of
(seed, epoch), so an interrupted run resumed from its checkpoint reproduces
the uninterrupted metric log exactly (in the deterministic columns: step,
epoch, split, loss, ppl, accuracy, lr).
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .blocks import RodimusBlockParams, RodimusPlusBlockParams, gate_activations
from .checkpoint import load_arrays, save_arrays
from .data import MqarBatch, MqarConfig, byte_corpus_load, mqar_accuracy, mqar_generate
from .errors import ConfigError, NonFiniteError
from .model import ModelConfig, ModelParams, build_model, forward_train
from .optim import AdamW, clip_global_norm, cosine_schedule
from .rng import Rng
from .tensor import Tensor, embedding_lookup, gradients, rmsnorm

METRIC_COLUMNS = (
    "step",
    "epoch",
    "split",
    "loss",
    "ppl",
    "accuracy",
    "lr",
    "wall_clock",
    "tokens_per_sec",
)


@dataclass
class TrainConfig:
    task: str = "mqar"  # mqar | byte_lm
    epochs: int = 8
    batch_size: int = 32
    peak_lr: float = 2e-3
    floor_lr: float = 1e-5
    warmup_frac: float = 0.05
    grad_clip: float = 1.0
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    seed: int = 0
    out_dir: str = "runs/default"
    eval_every_epochs: int = 1
    early_stop_accuracy: float = 0.0  # stop once eval accuracy reaches this (>0)
    stop_after_epochs: int = 0  # interrupt after N completed epochs (0 = run to cfg.epochs)
    # mqar task
    mqar: MqarConfig = field(default_factory=MqarConfig)
    train_instances: int = 2048
    eval_instances: int = 256
    # byte_lm task
    corpus_path: str = ""
    window_len: int = 128

    def validate(self) -> None:
        if self.task not in ("mqar", "byte_lm"):
            raise ConfigError(f"task must be 'mqar' or 'byte_lm', got {self.task!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.task == "byte_lm" and not self.corpus_path:
            raise ConfigError("byte_lm task needs corpus_path")


class MetricsLog:
    """Append-only .jsonl + .csv metric mirror."""

    def __init__(self, out_dir: str, fresh: bool):
        os.makedirs(out_dir, exist_ok=True)
        self.jsonl_path = os.path.join(out_dir, "metrics.jsonl")
        self.csv_path = os.path.join(out_dir, "metrics.csv")
        if fresh:
            for path in (self.jsonl_path, self.csv_path):
                if os.path.exists(path):
                    os.remove(path)
        write_header = not os.path.exists(self.csv_path)
        self._csv_file = open(self.csv_path, "a", newline="")
        self._csv = csv.DictWriter(self._csv_file, fieldnames=METRIC_COLUMNS)
        if write_header:
            self._csv.writeheader()

    def record(self, **fields) -> dict:
        row = {k: fields.get(k) for k in METRIC_COLUMNS}
        with open(self.jsonl_path, "a") as f:
            f.write(json.dumps(row, sort_keys=True) + "\n")
        self._csv.writerow(row)
        self._csv_file.flush()
        return row

    def close(self) -> None:
        self._csv_file.close()


def _gate_diagnostics(params: ModelParams, tokens: np.ndarray) -> list[dict]:
    """Per-layer min/max of g, tau, alpha for the NaN abort message."""
    out = []
    x = embedding_lookup(params.embedding, tokens)
    from .model import _layer_forward

    for i, block in enumerate(params.blocks):
        rb = None
        if isinstance(block, RodimusPlusBlockParams):
            rb = block.rodimus
        elif isinstance(block, RodimusBlockParams):
            rb = block
        if rb is not None:
            acts = gate_activations(rmsnorm(x, rb.in_gain), rb)
            out.append(
                {
                    "layer": i,
                    "g_min": float(np.min(acts.g.data)),
                    "g_max": float(np.max(acts.g.data)),
                    "tau_min": float(np.min(acts.tau.data)),
                    "tau_max": float(np.max(acts.tau.data)),
                    "alpha_min": float(np.min(acts.alpha.data)),
                    "alpha_max": float(np.max(acts.alpha.data)),
                }
            )
        x, _ = _layer_forward(x, block, params.cfg)
    return out


def _load_task(cfg: TrainConfig, model_cfg: ModelConfig):
    """Returns (train_tokens, train_mask_fn, eval_batches) for the task."""
    if cfg.task == "mqar":
        if cfg.mqar.vocab != model_cfg.vocab:
            raise ConfigError(
                f"mqar vocab {cfg.mqar.vocab} must equal model vocab {model_cfg.vocab}"
            )
        train = mqar_generate(cfg.mqar, cfg.train_instances, Rng(cfg.seed, 100))
        evl = mqar_generate(cfg.mqar, cfg.eval_instances, Rng(cfg.seed, 101))
        return train, evl
    train, valid = byte_corpus_load(cfg.corpus_path, cfg.window_len, seed=cfg.seed)
    return train, valid


def _mqar_slice(batch: MqarBatch, idx: np.ndarray) -> MqarBatch:
    return MqarBatch(batch.tokens[idx], batch.answer_positions[idx], batch.answer_ids[idx])


def _eval_pass(params: ModelParams, cfg: TrainConfig, eval_data) -> tuple[float, float | None]:
    """Mean eval loss and (for MQAR) accuracy, computed in eval-sized batches."""
    losses = []
    hits_num, hits_den = 0.0, 0
    bs = cfg.batch_size
    if cfg.task == "mqar":
        n = len(eval_data.tokens)
        for i in range(0, n, bs):
            sub = _mqar_slice(eval_data, np.arange(i, min(i + bs, n)))
            logits, loss = forward_train(sub.tokens, params, sub.loss_mask())
            losses.append((float(loss.data), len(sub.tokens)))
            hits_num += mqar_accuracy(logits.data, sub) * len(sub.tokens)
            hits_den += len(sub.tokens)
        loss = sum(l * w for l, w in losses) / sum(w for _, w in losses)
        return loss, hits_num / hits_den
    n = len(eval_data)
    for i in range(0, n, bs):
        sub = eval_data[i : i + bs]
        _, loss = forward_train(sub, params)
        losses.append((float(loss.data), len(sub)))
    loss = sum(l * w for l, w in losses) / sum(w for _, w in losses)
    return loss, None


def train(model_cfg: ModelConfig, cfg: TrainConfig, resume: str | None = None) -> dict:
    """Run (or resume) a training job; returns a summary dict.

    Files written to cfg.out_dir: metrics.jsonl / metrics.csv, last.ckpt
    (every epoch, resumable), best.ckpt, final.ckpt.
    """
    cfg.validate()
    model_cfg.validate()
    os.makedirs(cfg.out_dir, exist_ok=True)
    train_data, eval_data = _load_task(cfg, model_cfg)
    n_train = len(train_data.tokens) if cfg.task == "mqar" else len(train_data)
    steps_per_epoch = (n_train + cfg.batch_size - 1) // cfg.batch_size
    # the lr schedule always spans the full configured run, so an interrupted
    # and resumed run follows the identical curve
    total_steps = steps_per_epoch * cfg.epochs
    warmup = max(1, int(round(cfg.warmup_frac * total_steps))) if total_steps else 0

    params = build_model(model_cfg)
    named = [(name, t, nd) for name, t, nd in params.named()]
    opt = AdamW(
        named,
        lr=cfg.peak_lr,
        betas=(cfg.beta1, cfg.beta2),
        weight_decay=cfg.weight_decay,
    )
    start_epoch, step, best_loss = 0, 0, float("inf")
    if resume is not None:
        _, arrays, extra = load_arrays(resume)
        for name, t, _ in params.named():
            t.data = arrays[name].astype(t.data.dtype, copy=True)
        opt.load_state_arrays(arrays, extra["opt_t"])
        start_epoch, step, best_loss = extra["epoch"], extra["step"], extra["best_loss"]
    log = MetricsLog(cfg.out_dir, fresh=resume is None)

    def save(tag: str, epoch_done: int) -> str:
        path = os.path.join(cfg.out_dir, f"{tag}.ckpt")
        arrays = {name: t.data for name, t, _ in params.named()}
        arrays.update(opt.state_arrays())
        save_arrays(
            path,
            model_cfg.to_dict(),
            arrays,
            extra={
                "epoch": epoch_done,
                "step": step,
                "best_loss": best_loss,
                "opt_t": opt.t,
                "train": asdict(cfg),
            },
        )
        return path

    t0 = time.monotonic()

    def do_eval(epoch: int):
        nonlocal best_loss
        loss, acc = _eval_pass(params, cfg, eval_data)
        lr_now = cosine_schedule(max(step - 1, 0), cfg.peak_lr, warmup, max(total_steps, 1), cfg.floor_lr)
        log.record(
            step=step,
            epoch=epoch,
            split="valid",
            loss=loss,
            ppl=float(np.exp(loss)),
            accuracy=acc,
            lr=lr_now,
            wall_clock=time.monotonic() - t0,
            tokens_per_sec=None,
        )
        if loss < best_loss:
            best_loss = loss
            save("best", epoch)
        return loss, acc

    if cfg.epochs == 0 or total_steps == 0:
        do_eval(0)
        final = save("final", 0)
        log.close()
        return {"steps": step, "best_loss": best_loss, "final_ckpt": final}

    stop = False
    last_acc = None
    epoch_done = start_epoch
    for epoch in range(start_epoch, cfg.epochs):
        perm = Rng(cfg.seed, 400 + epoch).permutation(n_train)
        for i in range(0, n_train, cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            if cfg.task == "mqar":
                sub = _mqar_slice(train_data, idx)
                tokens, mask = sub.tokens, sub.loss_mask()
            else:
                tokens, mask = train_data[idx], None
            tic = time.monotonic()
            _, loss = forward_train(tokens, params, mask)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                diag = _gate_diagnostics(params, tokens)
                raise NonFiniteError(
                    f"non-finite loss at step {step}; gate stats: {json.dumps(diag)}"
                )
            grads = gradients(loss, [t for _, t, _ in named])
            grads, _ = clip_global_norm(grads, cfg.grad_clip)
            lr = cosine_schedule(step, cfg.peak_lr, warmup, total_steps, cfg.floor_lr)
            opt.step(grads, lr=lr)
            step += 1
            toc = time.monotonic()
            log.record(
                step=step,
                epoch=epoch,
                split="train",
                loss=loss_val,
                ppl=float(np.exp(loss_val)),
                accuracy=None,
                lr=lr,
                wall_clock=toc - t0,
                tokens_per_sec=tokens.size / max(toc - tic, 1e-9),
            )
        epoch_done = epoch + 1
        save("last", epoch_done)
        if cfg.stop_after_epochs and epoch_done >= cfg.stop_after_epochs:
            stop = True
        if epoch_done % cfg.eval_every_epochs == 0:
            _, last_acc = do_eval(epoch_done)
            if (
                cfg.early_stop_accuracy > 0
                and last_acc is not None
                and last_acc >= cfg.early_stop_accuracy
            ):
                stop = True
        if stop:
            break
    final = save("final", epoch_done)
    log.close()
    return {
        "steps": step,
        "best_loss": best_loss,
        "final_ckpt": final,
        "accuracy": last_acc,
    }


def read_metrics(out_dir: str) -> list[dict]:
    path = os.path.join(out_dir, "metrics.jsonl")
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
