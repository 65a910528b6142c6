"""Optimizer, learning-rate schedules, training loop, and split evaluation."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .data import stack_samples
from .metrics import EvalReport, mpjpe, p_mpjpe, pck_auc, per_joint_error_mm, pose_loss
from .model import save_checkpoint
from .tensor import Rng, Tape, Tensor

__all__ = ["Adam", "adam_step", "lr_at", "train", "evaluate", "TrainLog", "NonFiniteLossError"]

STREAM_DROPOUT = 1
STREAM_SHUFFLE = 2


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch, batch_index):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch_index}")
        self.epoch = epoch
        self.batch_index = batch_index


class Adam:
    """Bias-corrected adaptive optimizer with optional decoupled extras."""

    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in named_params}

    def step(self, named_params, lr, weight_decay=0.0, grad_clip=None):
        grads = {}
        for name, p in named_params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in parameter {name!r}; step rejected")
            grads[name] = g
        if grad_clip is not None:
            total = float(np.sqrt(sum(float((g ** 2).sum()) for g in grads.values())))
            if total > grad_clip:
                factor = grad_clip / total
                grads = {name: g * factor for name, g in grads.items()}
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in named_params:
            g = grads[name]
            if weight_decay:
                g = g + weight_decay * p.data
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - update.astype(p.data.dtype)

    def state_tensors(self):
        """Optimizer state as named arrays for checkpointing."""
        out = {"optimizer.step": np.asarray(float(self.step_count))}
        for name in self.m:
            out[f"optimizer.m.{name}"] = self.m[name]
            out[f"optimizer.v.{name}"] = self.v[name]
        return out

    def load_state_tensors(self, tensors, named_params):
        self.step_count = int(tensors["optimizer.step"])
        for name, p in named_params:
            self.m[name] = np.asarray(tensors[f"optimizer.m.{name}"], dtype=p.data.dtype)
            self.v[name] = np.asarray(tensors[f"optimizer.v.{name}"], dtype=p.data.dtype)


def adam_step(named_params, state, lr, **kwargs):
    """Single functional step on an Adam ``state``; reads grads off the tensors."""
    state.step(named_params, lr, **kwargs)
    return state


def lr_at(epoch, cfg: TrainConfig):
    """Learning rate for an epoch under the configured regime.

    Plain regime: initial_lr * decay^(epoch // every). With a first-epochs
    factor (detected-2D regime), the factor multiplies the initial rate for
    the first ``every`` epochs and decay counts from the end of that window.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    every = cfg.decay_every_epochs
    if cfg.first_epochs_factor is None:
        return cfg.initial_lr * cfg.decay_factor ** (epoch // every)
    base = cfg.initial_lr * cfg.first_epochs_factor
    if epoch < every:
        return base
    return base * cfg.decay_factor ** ((epoch - every) // every)


@dataclass
class TrainLog:
    records: list = field(default_factory=list)   # one dict per epoch
    step_losses: list = field(default_factory=list)
    best_mpjpe: float = float("inf")
    best_epoch: int = -1


def _write_log_record(fh, record):
    fh.write(json.dumps(record) + "\n")
    fh.flush()


def train(model, train_samples, cfg: TrainConfig, eval_samples=None,
          out_dir=None, start_epoch=0, optimizer=None, log_stream=None):
    """Run the epoch loop; returns a TrainLog.

    Per-epoch JSON records hold (epoch, lr, train_loss, eval_mpjpe). When
    ``out_dir`` is given, the log is written there as ``log.jsonl`` plus
    ``best.ckpt`` / ``last.ckpt`` checkpoints with optimizer state, so a run
    can resume from any epoch boundary and reproduce the uninterrupted run.
    """
    cfg.validate()
    params = model.named_parameters()
    opt = optimizer or Adam(params)
    x_all, y_all = stack_samples(train_samples, dtype=model.dtype)
    count = x_all.shape[0]
    log = TrainLog()

    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        mode = "a" if start_epoch else "w"
        log_fh = open(os.path.join(out_dir, "log.jsonl"), mode, encoding="utf-8")
    if log_stream is not None:
        log_fh = log_stream

    try:
        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_at(epoch, cfg)
            order = Rng(cfg.seed, STREAM_SHUFFLE, epoch).gen.permutation(count)
            losses = []
            for step, lo in enumerate(range(0, count, cfg.batch_size)):
                idx = order[lo:lo + cfg.batch_size]
                xb = Tensor(x_all[idx], dtype=model.dtype)
                yb = Tensor(y_all[idx], dtype=model.dtype)
                drop_rng = Rng(cfg.seed, STREAM_DROPOUT, epoch, step)
                with Tape() as tp:
                    pred = model.forward(xb, training=True, rng=drop_rng)
                    loss = pose_loss(pred, yb)
                    value = float(loss.data)
                    if not np.isfinite(value):
                        raise NonFiniteLossError(epoch, step)
                    T.zero_grads(params)
                    tp.backward(loss)
                opt.step(params, lr, weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip)
                losses.append(value)
                log.step_losses.append(value)

            record = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses))}
            if eval_samples is not None and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs - 1):
                report = evaluate(model, eval_samples)
                record["eval_mpjpe"] = report.mpjpe_mm
                if report.mpjpe_mm < log.best_mpjpe:
                    log.best_mpjpe = report.mpjpe_mm
                    log.best_epoch = epoch
                    if out_dir is not None:
                        save_checkpoint(os.path.join(out_dir, "best.ckpt"), model, cfg,
                                        extras=_run_state(opt, epoch))
            log.records.append(record)
            if log_fh is not None:
                _write_log_record(log_fh, record)
            if out_dir is not None:
                save_checkpoint(os.path.join(out_dir, "last.ckpt"), model, cfg,
                                extras=_run_state(opt, epoch))
    finally:
        if log_fh is not None and log_stream is None:
            log_fh.close()
    return log


def _run_state(opt, epoch):
    extras = opt.state_tensors()
    extras["trainer.next_epoch"] = np.asarray(float(epoch + 1))
    return extras


def resume_state(extras, model, cfg):
    """Rebuild (optimizer, start_epoch) from checkpoint extras."""
    opt = Adam(model.named_parameters())
    opt.load_state_tensors(extras, model.named_parameters())
    return opt, int(extras["trainer.next_epoch"])


def _eval_threads():
    cap = os.environ.get("HOPFIR_THREADS")
    return max(1, int(cap)) if cap else 1


def evaluate(model, samples, batch_size=256, per_action=True, protocols=("p1", "p2")):
    """Full evaluation report for a split; dropout is off and nothing is taped."""
    if len(samples) == 0:
        raise ValueError("cannot evaluate an empty split")
    x_all, y_all = stack_samples(samples, dtype=model.dtype)
    batches = [(x_all[lo:lo + batch_size], lo) for lo in range(0, x_all.shape[0], batch_size)]

    def run(batch):
        xb, _ = batch
        return model.forward(Tensor(xb, dtype=model.dtype), training=False).data

    threads = _eval_threads()
    if threads > 1 and len(batches) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            preds = list(pool.map(run, batches))
    else:
        preds = [run(b) for b in batches]
    pred = np.concatenate(preds, axis=0).astype(np.float64)
    target = y_all.astype(np.float64)

    pck, auc = pck_auc(pred, target)
    report = EvalReport(
        mpjpe_mm=mpjpe(pred, target),
        p_mpjpe_mm=p_mpjpe(pred, target) if "p2" in protocols else 0.0,
        per_joint_mm=per_joint_error_mm(pred, target),
        pck_150=pck,
        auc=auc,
    )
    if per_action and any(s.action for s in samples):
        groups = {}
        for i, s in enumerate(samples):
            groups.setdefault(s.action, []).append(i)
        report.per_action = {
            action: mpjpe(pred[idx], target[idx]) for action, idx in sorted(groups.items())
        }
    return report.validate()
