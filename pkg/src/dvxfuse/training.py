"""Loss, AdamW, learning-rate schedule, EMA and the training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .autodiff import apply, backward, forward, register
from .data import SamplePair, stack
from .layers import as_tensors
from .metrics import mean_ap
from .model import Model, forward_pair, save_model
from .ops import Mode
from .tensor import DimensionError, Tensor


class TrainingDivergence(ArithmeticError):
    pass


# -- loss ---------------------------------------------------------------------

def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _mlsm_fwd(x, y):
    # -[y log σ(x) + (1-y) log(1-σ(x))] = y·softplus(-x) + (1-y)·softplus(x)
    per = y * _softplus(-x) + (1.0 - y) * _softplus(x)
    return np.asarray(per.mean()), (x, y)


def _mlsm_bwd(g, saved):
    x, y = saved
    return (g * (_sigmoid(x) - y) / x.size, None)


register("multilabel_soft_margin", backward=_mlsm_bwd,
         flops=lambda ins, out: 4 * ins[0].size)(_mlsm_fwd)


def multilabel_soft_margin_loss(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean over batch and classes of the per-label binary cross-entropy with logits."""
    if logits.ndim != 2 or logits.shape != targets.shape:
        raise DimensionError(f"loss: logits {logits.shape} and targets {targets.shape} must be equal (N, C)")
    t = targets.data
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("loss: targets must be binary")
    return apply("multilabel_soft_margin", logits, targets)


# -- optimizer ----------------------------------------------------------------

def no_decay(name: str) -> bool:
    """Biases and batch-norm affine parameters are excluded from weight decay."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf in ("bias", "gamma", "beta")


@dataclass
class OptimState:
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
               state: OptimState, lr: float) -> Dict[str, np.ndarray]:
    """One decoupled-weight-decay Adam update; returns new parameter arrays."""
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"adamw: gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        new = p if no_decay(name) or state.weight_decay == 0 else p * (1.0 - lr * state.weight_decay)
        out[name] = new - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


# -- schedule -----------------------------------------------------------------

@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float = 1e-3
    warmup_epochs: int = 5
    total_epochs: int = 40
    min_lr: float = 1e-5

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError(f"need 0 <= warmup_epochs ({self.warmup_epochs}) < total_epochs ({self.total_epochs})")


def lr_schedule(epoch: int, cfg: ScheduleConfig) -> float:
    """Linear warmup from base_lr/100, then cosine annealing towards min_lr."""
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    if epoch < cfg.warmup_epochs:
        start = cfg.base_lr / 100.0
        return start + (cfg.base_lr - start) * epoch / cfg.warmup_epochs
    t = epoch - cfg.warmup_epochs
    span = cfg.total_epochs - cfg.warmup_epochs
    return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * t / span))


# -- EMA ------------------------------------------------------------------------

@dataclass
class EmaState:
    decay: float
    shadow: Dict[str, np.ndarray]

    @classmethod
    def of(cls, params: Mapping[str, np.ndarray], decay: float = 0.999) -> "EmaState":
        return cls(decay, {k: np.array(v, dtype=np.float64) for k, v in params.items()})


def ema_update(ema: EmaState, params: Mapping[str, np.ndarray]) -> EmaState:
    d = ema.decay
    for k, s in ema.shadow.items():
        p = params[k]
        if p.shape != s.shape:
            raise DimensionError(f"ema: {k} has shape {p.shape}, shadow {s.shape}")
        s *= d
        s += (1.0 - d) * p
    return ema


# -- loop -----------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 40
    base_lr: float = 1e-3
    warmup_epochs: int = 5
    min_lr: float = 1e-5
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    ema_decay: float = 0.999
    seed: int = 0
    eval_batch_size: int = 100

    @property
    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(self.base_lr, self.warmup_epochs, self.epochs, self.min_lr)


HISTORY_HEADER = "epoch,lr,train_loss,val_mAP_raw,val_mAP_ema"


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_map_raw: float
    val_map_ema: float

    def csv(self) -> str:
        return f"{self.epoch},{self.lr:.10g},{self.train_loss:.10g},{self.val_map_raw:.10g},{self.val_map_ema:.10g}"


@dataclass
class TrainResult:
    history: List[EpochRecord]
    best_epoch: int
    best_val_map: float
    best_arrays: Dict[str, np.ndarray]  # raw params, BN buffers and EMA shadow at the best epoch
    ema: EmaState

    def history_csv(self) -> str:
        return "\n".join([HISTORY_HEADER] + [r.csv() for r in self.history]) + "\n"


def predict(model: Model, ol: np.ndarray, sd: np.ndarray, params: Optional[Mapping[str, np.ndarray]] = None,
            batch_size: int = 100) -> np.ndarray:
    """Eval-mode logits for stacked image arrays."""
    p = as_tensors(model.params if params is None else params)
    outs = []
    for i in range(0, ol.shape[0], batch_size):
        out = forward_pair(model, Tensor._wrap(ol[i:i + batch_size]), Tensor._wrap(sd[i:i + batch_size]),
                           Mode.EVAL, params=p)
        outs.append(out.data)
    return np.concatenate(outs, axis=0)


def evaluate_map(model: Model, samples: Sequence[SamplePair], params=None, batch_size: int = 100) -> float:
    ol, sd, y = stack(samples)
    return mean_ap(predict(model, ol, sd, params, batch_size), y)


def train_step(model: Model, ol: np.ndarray, sd: np.ndarray, y: np.ndarray):
    """Loss and parameter gradients of one Train-mode batch (updates BN running stats)."""
    def graph(p, a, b, t):
        return multilabel_soft_margin_loss(forward_pair(model, a, b, Mode.TRAIN, params=p), t)

    loss, tape = forward(graph, model.params, (Tensor._wrap(ol), Tensor._wrap(sd), Tensor._wrap(y)))
    grads = backward(tape, np.ones(()), output=loss)
    return float(loss.item()), grads


def train(model: Model, train_set: Sequence[SamplePair], val_set: Sequence[SamplePair], cfg: TrainConfig,
          history_path=None, checkpoint_path=None, log=None) -> TrainResult:
    """Train in place; returns the per-epoch history and the best (by EMA val mAP) snapshot.

    Batches are drawn from a shuffling stream seeded by ``cfg.seed`` only, so two
    runs with the same model seed and config produce identical histories.
    """
    if not train_set:
        raise ValueError("train: empty training set")
    ol, sd, y = stack(train_set)
    val = stack(val_set) if val_set else None
    n = ol.shape[0]
    sched = cfg.schedule
    opt = OptimState((cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)
    ema = EmaState.of(model.params, cfg.ema_decay)
    shuffle = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5F1]))
    history: List[EpochRecord] = []
    best = (-1, -math.inf, {})
    if history_path is not None:
        Path(history_path).write_text(HISTORY_HEADER + "\n")

    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, sched)
        order = shuffle.permutation(n)
        total, count = 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            loss, grads = train_step(model, ol[idx], sd[idx], y[idx])
            if not math.isfinite(loss):
                raise TrainingDivergence(f"non-finite loss {loss} at epoch {epoch}, batch {b}")
            model.params = adamw_step(model.params, grads, opt, lr)
            ema_update(ema, model.params)
            total += loss * len(idx)
            count += len(idx)
        train_loss = total / count
        if val is not None:
            raw = mean_ap(predict(model, val[0], val[1], batch_size=cfg.eval_batch_size), val[2])
            ema_map = mean_ap(predict(model, val[0], val[1], ema.shadow, cfg.eval_batch_size), val[2])
        else:
            raw = ema_map = float("nan")
        rec = EpochRecord(epoch, lr, train_loss, raw, ema_map)
        history.append(rec)
        if history_path is not None:
            with open(history_path, "a") as fh:
                fh.write(rec.csv() + "\n")
        if log is not None:
            log(rec)
        score = ema_map if val is not None else -train_loss
        if score > best[1]:
            arrays = {k: v.copy() for k, v in model.state_arrays().items()}
            arrays.update({f"ema/{k}": v.copy() for k, v in ema.shadow.items()})
            best = (epoch, score, arrays)
            if checkpoint_path is not None:
                save_model(checkpoint_path, model, ema.shadow)
    return TrainResult(history, best[0], best[1] if val is not None else float("nan"), best[2], ema)
