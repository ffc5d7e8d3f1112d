"""Minibatch optimization, RMSE evaluation, and the mean baseline.

Batches are drawn in seeded-shuffle order and per-sample gradients
accumulate in ascending sample-index order, so a (seed, data, config)
triple fully determines the trained parameters, bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import TrainingError


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 25
    batch_size: int = 16
    learning_rate: float = 0.001
    loss: str = "mse"  # mse | mae_sum
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    shuffle: bool = True
    optimizer: str = "adam"  # adam | sgd
    clip: float | None = None  # global gradient-norm cap, off by default

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        # zero is allowed so a frozen run can serve as a determinism probe
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.loss not in ("mse", "mae_sum"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.clip is not None and self.clip <= 0:
            raise ValueError("clip must be positive when set")


@dataclass
class AdamState:
    """First and second moment estimates per parameter name."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params) -> "AdamState":
        state = cls()
        for p in params:
            state.m[p.name] = np.zeros_like(p.values)
            state.v[p.name] = np.zeros_like(p.values)
        return state


def adam_step(params, state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected moment update of every parameter."""
    state.t += 1
    bc1 = 1.0 - config.beta1 ** state.t
    bc2 = 1.0 - config.beta2 ** state.t
    for p in params:
        g = p.grad
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {p.name}")
        m = state.m[p.name]
        v = state.v[p.name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.values -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)


def sgd_step(params, config: TrainConfig) -> None:
    for p in params:
        g = p.grad
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {p.name}")
        p.values -= config.learning_rate * g


def _clip_gradients(params, cap: float) -> None:
    norm_sq = 0.0
    for p in params:
        norm_sq += float((p.grad * p.grad).sum())
    norm = math.sqrt(norm_sq)
    if norm > cap:
        factor = cap / norm
        for p in params:
            p.grad *= factor


def train(model, dataset, config: TrainConfig, epoch_callback=None) -> list[float]:
    """Fit the model in place; returns per-epoch mean training loss.

    ``dataset`` holds ``((fused, emb), target)`` pairs, either input None
    when its branch is disabled.  ``epoch_callback(epoch, model)`` runs
    after each epoch (e.g. to track dev RMSE); it must not mutate the
    model.
    """
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    params = model.parameters()
    state = AdamState.for_params(params) if config.optimizer == "adam" else None
    rng = np.random.default_rng(config.seed)
    n = len(dataset)
    history: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        loss_sum = 0.0
        for batch_no, start in enumerate(range(0, n, config.batch_size)):
            batch = sorted(int(i) for i in order[start:start + config.batch_size])
            model.zero_grad()
            try:
                for idx in batch:
                    (fused, emb), target = dataset[idx]
                    with ad.Tape() as tape:
                        pred = ad.reshape(model.forward(fused=fused, emb=emb), (1,))
                        goal = Tensor([float(target)])
                        if config.loss == "mse":
                            sample_loss = ad.mse_loss(pred, goal)
                            term = ad.scale(sample_loss, 1.0 / len(batch))
                        else:
                            sample_loss = ad.mae_sum_loss(pred, goal)
                            term = sample_loss
                    tape.backward(term)
                    loss_sum += sample_loss.item()
            except ad.NonFiniteError as exc:
                raise TrainingError(
                    f"non-finite loss at epoch {epoch + 1}, batch {batch_no + 1}: {exc}"
                ) from exc
            if config.clip is not None:
                _clip_gradients(params, config.clip)
            if config.optimizer == "adam":
                adam_step(params, state, config)
            else:
                sgd_step(params, config)
        history.append(loss_sum / n)
        if epoch_callback is not None:
            epoch_callback(epoch, model)
    return history


# ---------------------------------------------------------------------------
# evaluation

@dataclass(frozen=True)
class EvalReport:
    rmse: float
    n: int
    rows: tuple  # (id, target, prediction) per record


def evaluate_rmse(predictions, targets) -> float:
    """sqrt of the mean squared difference."""
    preds = np.asarray(list(predictions), dtype=np.float64)
    goals = np.asarray(list(targets), dtype=np.float64)
    if preds.shape != goals.shape:
        raise ValueError(f"{preds.size} predictions vs {goals.size} targets")
    if preds.size == 0:
        raise ValueError("rmse needs at least one prediction")
    return float(np.sqrt(np.mean((preds - goals) ** 2)))


def evaluate_model(model, samples, clamp: bool = False) -> EvalReport:
    """Predict every sample; samples are (id, (fused, emb), target) triples."""
    rows = []
    for sample_id, (fused, emb), target in samples:
        pred = model.predict(fused=fused, emb=emb, clamp=clamp)
        rows.append((sample_id, float(target), pred))
    rmse = evaluate_rmse([r[2] for r in rows], [r[1] for r in rows])
    return EvalReport(rmse=rmse, n=len(rows), rows=tuple(rows))


def mean_baseline(train_records) -> float:
    """Constant predictor: the mean of the training mean grades."""
    records = list(train_records)
    if not records:
        raise ValueError("baseline needs a non-empty training set")
    return sum(r.mean_grade for r in records) / len(records)


def baseline_rmse(train_records, eval_records) -> float:
    constant = mean_baseline(train_records)
    eval_records = list(eval_records)
    return evaluate_rmse([constant] * len(eval_records),
                         [r.mean_grade for r in eval_records])
