"""Adam training loop with plateau LR scheduling, early stopping, and
selection across mapping-family candidates by a training-set metric."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import LogitDataset
from .loss import HCalConfig, LossOutput, frozen_structure, hcal_loss, resolve_loss
from .maps import CalibrationMap, init_map
from .metrics import get_metric

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


@dataclass(frozen=True)
class TrainConfig:
    """Training-loop hyperparameters (defaults match the standard recipe)."""

    max_epochs: int = 2000
    lr: float = 0.005
    scheduler_patience: int = 20
    scheduler_factor: float = 0.5
    early_stop_patience: int = 160
    batch_size: int | None = None  # None = full batch
    monitor_metric: str = "ece_ew"
    selector_metric: str = "dece"
    seed: int = 0
    min_improvement: float = 1e-6  # dead-band so exactly-flat binned metrics
    # do not keep resetting the patience counters

    def __post_init__(self):
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0 < self.scheduler_factor < 1:
            raise ValueError("scheduler_factor must be in (0, 1)")
        if self.scheduler_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patiences must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1 or None")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n))


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> np.ndarray:
    """One bias-corrected Adam update; mutates ``state``, returns new params."""
    if params.shape != grads.shape:
        raise ValueError(f"params shape {params.shape} != grads shape {grads.shape}")
    state.step += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grads
    state.v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = state.m / (1.0 - beta1 ** state.step)
    v_hat = state.v / (1.0 - beta2 ** state.step)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    metric: float
    lr: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1  # index into records; -1 when no epoch ran
    wall_time: float = 0.0

    @property
    def best_metric(self) -> float:
        return self.records[self.best_epoch].metric if self.best_epoch >= 0 else float("nan")

    def to_csv(self, path) -> None:
        lines = ["epoch,loss,metric,lr"]
        for r in self.records:
            lines.append(f"{r.epoch},{r.loss!r},{r.metric!r},{r.lr!r}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def _epoch_pass(
    cal_map: CalibrationMap,
    logits: np.ndarray,
    labels: np.ndarray,
    loss_fn,
    state: AdamState,
    lr: float,
    batch_order: np.ndarray | None,
    batch_size: int | None,
) -> float:
    """Run one epoch of forward/loss/backward/update; returns the mean loss."""
    n = logits.shape[0]
    if batch_size is None or batch_size >= n:
        slices = [np.arange(n)]
    else:
        slices = [batch_order[s:s + batch_size] for s in range(0, n, batch_size)]
    total, seen = 0.0, 0
    for idx in slices:
        try:
            trace = cal_map.forward(logits[idx])
        except FloatingPointError as exc:
            raise TrainingDivergedError(
                f"forward pass diverged at step {state.step + 1} "
                f"(family {cal_map.family}): {exc}"
            ) from exc
        out: LossOutput = loss_fn(trace.probs, labels[idx])
        if not np.isfinite(out.value):
            raise TrainingDivergedError(
                f"non-finite loss at step {state.step + 1} (family {cal_map.family})"
            )
        pgrad, _ = cal_map.backward(trace, out.prob_grad)
        cal_map.params = adam_step(cal_map.params, pgrad, state, lr)
        total += out.value * len(idx)
        seen += len(idx)
    return total / seen


def train_one(
    cal_map: CalibrationMap,
    train: LogitDataset,
    loss_cfg,
    cfg: TrainConfig,
    log_fn=None,
) -> tuple[CalibrationMap, TrainHistory]:
    """Train one map; returns (best-snapshot map, per-epoch history).

    After every epoch the monitor metric is evaluated on the full training
    set; the learning rate halves after ``scheduler_patience`` epochs without
    improvement and training stops after ``early_stop_patience`` of them.
    Both patience counters reference the same global best.  The returned map
    carries the parameters of the best monitored epoch.
    """
    start = time.perf_counter()
    cal_map = cal_map.clone()
    cal_map.n_classes = train.n_classes
    monitor = get_metric(cfg.monitor_metric)
    loss_fn = _make_loss_fn(loss_cfg, cal_map, train)
    state = AdamState.zeros(cal_map.n_params)
    rng = np.random.default_rng(cfg.seed)

    history = TrainHistory()
    best_exact = np.inf  # governs the returned snapshot (true minimum)
    best_banded = np.inf  # governs the patience counters (1e-6 dead-band)
    best_params = cal_map.params.copy()
    lr = cfg.lr
    sched_wait = stop_wait = 0

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(train.n_samples) if cfg.batch_size is not None else None
        mean_loss = _epoch_pass(
            cal_map, train.logits, train.labels, loss_fn, state, lr,
            order, cfg.batch_size,
        )
        probs = cal_map.forward(train.logits).probs
        metric_val = float(monitor(probs, train.labels))
        history.records.append(EpochRecord(epoch, mean_loss, metric_val, lr))
        if log_fn is not None:
            log_fn(f"epoch {epoch} loss {mean_loss:.6g} {cfg.monitor_metric} {metric_val:.6g} lr {lr:.6g}")

        if metric_val < best_exact:
            best_exact = metric_val
            best_params = cal_map.params.copy()
            history.best_epoch = len(history.records) - 1
        if best_banded - metric_val >= cfg.min_improvement:
            best_banded = metric_val
            sched_wait = stop_wait = 0
        else:
            sched_wait += 1
            stop_wait += 1
            if stop_wait >= cfg.early_stop_patience:
                break
            if sched_wait >= cfg.scheduler_patience:
                lr *= cfg.scheduler_factor
                sched_wait = 0

    if history.best_epoch >= 0:
        cal_map.params = best_params
    history.wall_time = time.perf_counter() - start
    return cal_map, history


def _make_loss_fn(loss_cfg, cal_map: CalibrationMap, train: LogitDataset):
    """Resolve the loss spec; honours HCalConfig.cache_weights by freezing
    the first-epoch k-means weights for the rest of the run."""
    if isinstance(loss_cfg, HCalConfig) and loss_cfg.cache_weights:
        if loss_cfg.weighting == "adaptive":
            probs0 = cal_map.forward(train.logits).probs
            _, cached = frozen_structure(probs0, train.labels, loss_cfg)
            return lambda probs, labels: hcal_loss(probs, labels, loss_cfg, weights=cached)
        loss_cfg = replace(loss_cfg, cache_weights=False)
    return resolve_loss(loss_cfg)


@dataclass
class CandidateReport:
    family: str
    hyper: tuple
    selector_value: float
    epochs_run: int
    best_epoch: int
    wall_time: float
    failed: bool = False


def select_model(
    train: LogitDataset,
    families: list[tuple],
    loss_cfg,
    cfg: TrainConfig,
    log_fn=None,
) -> tuple[CalibrationMap, TrainHistory, list[CandidateReport]]:
    """Train every (family, hyper) candidate; return the one minimizing the
    selector metric on the training set (ties broken by declaration order)."""
    if not families:
        raise ValueError("need at least one candidate")
    selector = get_metric(cfg.selector_metric)
    best = None  # (value, map, history)
    reports: list[CandidateReport] = []
    for family, hyper in families:
        candidate = init_map(family, hyper, seed=cfg.seed)
        try:
            trained, history = train_one(candidate, train, loss_cfg, cfg, log_fn=log_fn)
            probs = trained.forward(train.logits).probs
            value = float(selector(probs, train.labels))
        except TrainingDivergedError:
            reports.append(CandidateReport(family, _hyper_tuple(hyper), float("inf"),
                                           0, -1, 0.0, failed=True))
            continue
        reports.append(CandidateReport(
            family, _hyper_tuple(hyper), value,
            len(history.records), history.best_epoch, history.wall_time,
        ))
        if log_fn is not None:
            log_fn(f"candidate {family} {hyper}: {cfg.selector_metric} = {value:.6g}")
        if best is None or value < best[0]:
            best = (value, trained, history)
    if best is None:
        raise TrainingDivergedError("all candidate trainings diverged")
    return best[1], best[2], reports


def _hyper_tuple(hyper) -> tuple:
    return tuple(hyper) if isinstance(hyper, (tuple, list)) else (hyper,)


def standard_grid() -> list[tuple]:
    """The standard 12-candidate family grid."""
    grid: list[tuple] = []
    grid += [("ensemble_temp", m) for m in (16, 32, 64, 128)]
    grid += [("piecewise_linear", z) for z in (1, 10, 100, 500)]
    grid += [("monotonic_net", (w, w)) for w in (2, 10, 20, 50)]
    return grid
