"""Cross-entropy training with Adam, warmup/step schedules and the two-stage protocol.

Stage one pre-trains on every window of every subject except the target.
Stage two fine-tunes on the target's sessions 1-5 and reports window-level
accuracy on each of sessions 6-10.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .data import WindowDataset, audit_split, split_sessions
from .model import BioformerConfig, FLOAT_OPS, Params, backward_batch, forward_batch, init_params, predict

log = logging.getLogger(__name__)

DEFAULT_SEED = 0xB10F0


@dataclass(frozen=True)
class TrainConfig:
    pretrain_epochs: int = 100
    finetune_epochs: int = 20
    lr_start: float = 1e-7
    lr_peak: float = 5e-4
    warmup_epochs: int = 10
    finetune_lr: float = 1e-4
    finetune_drop_epoch: int = 10
    finetune_drop_factor: float = 0.1
    batch_size: int = 64
    seed: int = DEFAULT_SEED
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    train_sessions: tuple = (1, 2, 3, 4, 5)
    test_sessions: tuple = (6, 7, 8, 9, 10)
    eval_every: int = 0  # 0: evaluate test sessions after the last epoch only

    def __post_init__(self):
        for f in ("lr_start", "lr_peak", "finetune_lr"):
            if not getattr(self, f) > 0:
                raise ValueError(f"{f} must be positive")
        if self.pretrain_epochs < 0 or self.finetune_epochs <= 0:
            raise ValueError("epochs must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.finetune_drop_epoch >= self.finetune_epochs:
            raise ValueError("finetune_drop_epoch must be < finetune_epochs")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")


@dataclass
class OptimizerState:
    m: Params
    v: Params
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Params) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    B = len(labels)
    loss = float(np.mean(lse - z[np.arange(B), labels]))
    p = np.exp(z - lse[:, None])
    p[np.arange(B), labels] -= 1.0
    return loss, (p / B).astype(np.float32)


def loss_and_grads(windows: np.ndarray, labels: np.ndarray, params: Params, cfg: BioformerConfig,
                   ops=FLOAT_OPS):
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("empty batch")
    if labels.min() < 0 or labels.max() >= cfg.num_classes:
        raise ValueError(f"labels must be in [0, {cfg.num_classes})")
    logits, cache = forward_batch(params, windows, cfg, ops, keep=True)
    loss, dlogits = cross_entropy(logits, labels)
    return loss, backward_batch(params, cache, dlogits, cfg)


def adam_step(params: Params, grads: Params, state: OptimizerState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam. Returns new ``(params, state)``; inputs are not mutated."""
    t = state.step + 1
    c1, c2 = 1.0 - beta1**t, 1.0 - beta2**t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"{k}: grad shape {g.shape} != param shape {p.shape}")
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        new_p[k] = (p - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
        new_m[k], new_v[k] = m.astype(p.dtype), v.astype(p.dtype)
    return new_p, OptimizerState(new_m, new_v, t)


def lr_at(phase: str, epoch: int, step_in_epoch: int, cfg: TrainConfig, steps_per_epoch: int = 1) -> float:
    if phase == "pretrain":
        warm = cfg.warmup_epochs * steps_per_epoch
        step = epoch * steps_per_epoch + step_in_epoch
        if warm == 0 or step >= warm:
            return cfg.lr_peak
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * step / warm
    if phase == "finetune":
        if epoch >= cfg.finetune_drop_epoch:
            return cfg.finetune_lr * cfg.finetune_drop_factor
        return cfg.finetune_lr
    raise ValueError(f"unknown phase {phase!r}")


@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)
    sessions: tuple = (6, 7, 8, 9, 10)

    def add(self, epoch, phase, lr, loss, train_acc, test_acc=None):
        self.rows.append(dict(epoch=epoch, phase=phase, lr=lr, loss=loss, train_acc=train_acc,
                              test_acc=dict(test_acc or {})))

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["epoch", "phase", "lr", "loss", "train_acc"] + [f"test_acc_s{s}" for s in self.sessions])
        for r in self.rows:
            w.writerow([r["epoch"], r["phase"], f"{r['lr']:.9g}", f"{r['loss']:.9g}", f"{r['train_acc']:.6f}"]
                       + [("" if s not in r["test_acc"] else f"{r['test_acc'][s]:.6f}") for s in self.sessions])
        return out.getvalue()


def evaluate(params: Params, ds: WindowDataset, cfg: BioformerConfig, batch_size: int = 256,
             forward=None) -> np.ndarray:
    """Predicted class for every window of ``ds``."""
    preds = np.zeros(len(ds), np.int64)
    for s in range(0, len(ds), batch_size):
        idx = np.arange(s, min(s + batch_size, len(ds)))
        x = ds.get(idx)
        logits = forward(x) if forward is not None else forward_batch(params, x, cfg)[0]
        preds[idx] = predict(logits)
    return preds


def session_accuracies(params: Params, ds: WindowDataset, cfg: BioformerConfig, **kw) -> dict[int, float]:
    preds = evaluate(params, ds, cfg, **kw)
    return {int(s): float(np.mean(preds[ds.sessions == s] == ds.labels[ds.sessions == s]))
            for s in np.unique(ds.sessions)}


def run_epochs(params: Params, ds: WindowDataset, cfg: BioformerConfig, tcfg: TrainConfig, phase: str,
               epochs: int, metrics: MetricsLog | None = None, test: WindowDataset | None = None,
               lr_fn=None, ops=FLOAT_OPS, seen: set | None = None, rng_tag: int = 0) -> Params:
    """Shared epoch loop. ``seen`` collects the dataset indices that produced gradients."""
    if len(ds) == 0:
        raise ValueError(f"no training windows for phase {phase}")
    rng = np.random.default_rng([tcfg.seed, rng_tag])
    state = OptimizerState.zeros_like(params)
    steps = -(-len(ds) // tcfg.batch_size)
    for epoch in range(epochs):
        order = rng.permutation(len(ds))
        tot_loss, correct = 0.0, 0
        for j in range(steps):
            idx = np.sort(order[j * tcfg.batch_size:(j + 1) * tcfg.batch_size])
            x, y = ds.get(idx), ds.labels[idx]
            if seen is not None:
                seen.update(idx.tolist())
            logits, cache = forward_batch(params, x, cfg, ops, keep=True)
            loss, dlogits = cross_entropy(logits, y)
            grads = backward_batch(params, cache, dlogits, cfg)
            lr = lr_fn(epoch, j, steps) if lr_fn else lr_at(phase, epoch, j, tcfg, steps)
            params, state = adam_step(params, grads, state, lr, tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps)
            tot_loss += loss * len(idx)
            correct += int((predict(logits) == y).sum())
        test_acc = None
        last = epoch == epochs - 1
        if test is not None and len(test) and (last or (tcfg.eval_every and (epoch + 1) % tcfg.eval_every == 0)):
            test_acc = session_accuracies(params, test, cfg)
        if metrics is not None:
            metrics.add(epoch, phase, lr, tot_loss / len(ds), correct / len(ds), test_acc)
        log.info("%s epoch %d lr=%.3g loss=%.4f acc=%.4f%s", phase, epoch, lr, tot_loss / len(ds),
                 correct / len(ds), "" if test_acc is None else f" test={test_acc}")
    return params


def pretrain_pool(dataset: WindowDataset, target_subject: int) -> WindowDataset:
    subjects = set(np.unique(dataset.subjects).tolist())
    if target_subject not in subjects:
        raise ValueError(f"target subject {target_subject} not in dataset {sorted(subjects)}")
    if len(subjects) < 2:
        raise ValueError("inter-subject pre-training needs at least two subjects")
    return dataset.subset(dataset.subjects != target_subject)


def pretrain_inter_subject(dataset: WindowDataset, target_subject: int, cfg: BioformerConfig,
                           tcfg: TrainConfig = TrainConfig(), params: Params | None = None,
                           metrics: MetricsLog | None = None) -> Params:
    pool = pretrain_pool(dataset, target_subject)
    if params is None:
        params = init_params(cfg, tcfg.seed)
    return run_epochs(params, pool, cfg, tcfg, "pretrain", tcfg.pretrain_epochs, metrics, rng_tag=1)


@dataclass
class FinetuneResult:
    params: Params
    session_acc: dict
    train_acc: float
    seen_hashes_disjoint: bool


def finetune_subject(init: Params, dataset: WindowDataset, subject: int, cfg: BioformerConfig,
                     tcfg: TrainConfig = TrainConfig(), metrics: MetricsLog | None = None) -> FinetuneResult:
    own = dataset.subset(dataset.subjects == subject)
    if len(own) == 0:
        raise ValueError(f"subject {subject} has no windows")
    present = set(np.unique(own.sessions).tolist())
    missing = (set(tcfg.train_sessions) | set(tcfg.test_sessions)) - present
    if len(present) < 2 or not present & set(tcfg.train_sessions) or not present & set(tcfg.test_sessions):
        raise ValueError(f"subject {subject} is missing sessions {sorted(missing)}")
    if missing:
        log.warning("subject %s is missing sessions %s", subject, sorted(missing))
    train, test = split_sessions(own, tcfg.train_sessions, tcfg.test_sessions)
    audit_split(train, test)
    seen: set = set()
    params = run_epochs(dict(init), train, cfg, tcfg, "finetune", tcfg.finetune_epochs, metrics,
                        test=test, seen=seen, rng_tag=2)
    used = train.subset(np.array(sorted(seen), dtype=np.int64))
    disjoint = not (used.id_hashes() & test.id_hashes())
    if not disjoint:
        raise RuntimeError("test windows reached a gradient computation")
    acc = session_accuracies(params, test, cfg)
    train_acc = float(np.mean(evaluate(params, train, cfg) == train.labels))
    return FinetuneResult(params, acc, train_acc, disjoint)


def two_stage(dataset: WindowDataset, subject: int, cfg: BioformerConfig, tcfg: TrainConfig = TrainConfig(),
              pretrain: bool = True, metrics: MetricsLog | None = None) -> FinetuneResult:
    """Full protocol; ``pretrain=False`` is the subject-only baseline arm."""
    params = init_params(cfg, tcfg.seed)
    if pretrain and tcfg.pretrain_epochs > 0:
        params = pretrain_inter_subject(dataset, subject, cfg, tcfg, params, metrics)
    return finetune_subject(params, dataset, subject, cfg, tcfg, metrics)


def with_epochs(tcfg: TrainConfig, pretrain: int, finetune: int, warmup: int | None = None,
                drop: int | None = None) -> TrainConfig:
    return replace(tcfg, pretrain_epochs=pretrain, finetune_epochs=finetune,
                   warmup_epochs=tcfg.warmup_epochs if warmup is None else warmup,
                   finetune_drop_epoch=(finetune // 2 if drop is None else drop))
