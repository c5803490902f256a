"""Supervised training: rolling-origin splits, MSE loss, early stopping.

For a last-observed-day T and horizon j, the split puts the samples whose
target days are {T-1, T-3, T-5, T-7, T-9} (where valid) into validation, every
other target <= T into training, and the anchor-T sample into test.  Training
minimizes the mean squared error over all (region, sample) pairs with Adam and
keeps the parameters with the lowest validation MAE; the patience counter only
runs after a warm-up epoch threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tape as tp
from .dataio import CountryDataset
from .errors import (CheckpointError, ContractError, InsufficientDataError,
                     TrainingDivergedError)
from .graphs import GraphSample, assemble_samples
from .models import ModelState, model_from_spec, model_spec, stack_targets
from .optim import adam_init, adam_step
from .params import load_params, save_params
from .rng import Rng

PROTOCOL_START_DAY = 14
VALIDATION_OFFSETS = (1, 3, 5, 7, 9)


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 500
    patience: int = 50
    patience_start_epoch: int = 100
    batch_size: int = 8
    lr: float = 1e-3
    hidden: int = 64
    dropout: float = 0.5
    d: int = 7
    k_layers: int = 2
    seq_len: int = 7
    feature_mode: str = "last"
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs < 0 or self.patience < 1 or self.patience_start_epoch < 0:
            raise ContractError("epoch/patience settings out of range")
        if self.batch_size < 1 or self.lr <= 0:
            raise ContractError("batch_size must be >= 1 and lr > 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout must be in [0, 1)")
        if min(self.d, self.k_layers, self.hidden, self.seq_len) < 1:
            raise ContractError("architecture sizes must be >= 1")


@dataclass
class SplitSpec:
    t: int
    horizon: int
    train: list
    validation: list
    test: GraphSample

    def validation_targets(self) -> list:
        return sorted(s.target_day for s in self.validation)


@dataclass
class Checkpoint:
    model: object
    state: ModelState
    val_error: float
    epoch: int          # epoch whose parameters are stored (0 = initialization)
    stopped_epoch: int  # epochs the loop actually ran


def mse_loss(predictions, targets) -> float:
    """Mean over all (region, sample) entries of the squared difference."""
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if p.shape != y.shape:
        raise ContractError(f"mse_loss: shapes {p.shape} and {y.shape} differ")
    if p.size == 0:
        raise ContractError("mse_loss of empty arrays")
    return float(np.mean((p - y) ** 2))


def make_splits(dataset: CountryDataset, t: int, j: int, d: int,
                variant: str = "static", s: int = 7) -> SplitSpec:
    """Carve the day-T training universe into train/validation plus the test sample."""
    if t < PROTOCOL_START_DAY:
        raise ContractError(f"protocol requires T >= {PROTOCOL_START_DAY}, got {t}")
    universe = assemble_samples(dataset, d, j, t_end=t, variant=variant, s=s,
                                include_test=True)
    if not universe or universe[-1].anchor != t:
        raise InsufficientDataError(
            f"{dataset.country}: no test anchor at T={t} for d={d}, j={j}")
    test = universe[-1]
    pool = universe[:-1]
    val_days = {t - off for off in VALIDATION_OFFSETS}
    validation = [smp for smp in pool if smp.target_day in val_days]
    train = [smp for smp in pool if smp.target_day not in val_days]
    if not train:
        raise InsufficientDataError(
            f"{dataset.country}: no training samples at T={t}, j={j} (d={d})")
    if not validation:
        raise InsufficientDataError(
            f"{dataset.country}: no validation samples at T={t}, j={j} (d={d})")
    return SplitSpec(t=t, horizon=j, train=train, validation=validation, test=test)


def _predict_batch(model, state: ModelState, samples) -> np.ndarray:
    tape = tp.Tape()
    pvars = tape.bind(state.params)
    out = model.forward(tape, pvars, state.buffers, samples, "eval", None)
    return out.value[:, 0].copy()


def _validation_mae(model, state: ModelState, samples) -> float:
    preds = _predict_batch(model, state, samples)
    targets = stack_targets(samples)[:, 0]
    return float(np.mean(np.abs(preds - targets)))


def _param_norms(params: dict) -> str:
    worst = sorted(params, key=lambda k: -float(np.abs(params[k]).max()))[:3]
    return ", ".join(f"{k}: |max|={np.abs(params[k]).max():.3e}" for k in worst)


def train_model(splits: SplitSpec, model, config: TrainConfig,
                init_state: Optional[ModelState] = None,
                log_fn: Optional[Callable[[dict], None]] = None) -> Checkpoint:
    """Adam training with seeded shuffling and early stopping; returns the best state."""
    if not splits.train or not splits.validation:
        raise InsufficientDataError("train_model needs nonempty train and validation sets")
    rng = Rng(config.seed)
    state = init_state.clone() if init_state is not None else model.init_state(rng.spawn("init"))
    shuffle_rng = rng.spawn("shuffle")
    dropout_rng = rng.spawn("dropout")
    adam = adam_init(state.params)

    best = Checkpoint(model, state.clone(), _validation_mae(model, state, splits.validation),
                      epoch=0, stopped_epoch=0)
    stale = 0
    train = splits.train
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(len(train))
        sq_sum = 0.0
        rows = 0
        for start in range(0, len(order), config.batch_size):
            batch_no = start // config.batch_size
            batch = [train[i] for i in order[start:start + config.batch_size]]
            tape = tp.Tape(check_finite=False)
            pvars = tape.bind(state.params)
            preds = model.forward(tape, pvars, state.buffers, batch, "train", dropout_rng)
            targets = tape.constant(stack_targets(batch))
            loss = tp.mean_all(tp.square(tp.sub(preds, targets)))
            lval = float(loss.value[0, 0])
            if not math.isfinite(lval):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {batch_no}; "
                    f"largest parameters: {_param_norms(state.params)}")
            sq_sum += lval * preds.shape[0]
            rows += preds.shape[0]
            tape.backward(loss)
            grads = {name: tape.grad(var) for name, var in pvars.items()}
            state.params = adam_step(state.params, grads, adam, config.lr)
        val_mae = _validation_mae(model, state, splits.validation)
        if log_fn is not None:
            log_fn({"epoch": epoch, "train_loss": sq_sum / max(rows, 1),
                    "val_mae": val_mae})
        if val_mae < best.val_error:
            best = Checkpoint(model, state.clone(), val_mae, epoch, epoch)
            stale = 0
        elif epoch > config.patience_start_epoch:
            stale += 1
            if stale >= config.patience:
                best.stopped_epoch = epoch
                return best
        best.stopped_epoch = epoch
    best.stopped_epoch = max(best.stopped_epoch, config.max_epochs)
    return best


def predict(checkpoint: Checkpoint, sample: GraphSample) -> np.ndarray:
    """Eval-mode forecast of the checkpointed model on one sample; shape (n,)."""
    return _predict_batch(checkpoint.model, checkpoint.state, [sample])


def save_checkpoint(path: str, checkpoint: Checkpoint, extra_meta: dict | None = None) -> None:
    meta = {
        "kind": "mobicast-checkpoint",
        "model": model_spec(checkpoint.model),
        "val_error": checkpoint.val_error,
        "epoch": checkpoint.epoch,
        "stopped_epoch": checkpoint.stopped_epoch,
    }
    if extra_meta:
        meta["extra"] = extra_meta
    save_params(path, checkpoint.state.params, checkpoint.state.buffers, meta)


def load_checkpoint(path: str) -> Checkpoint:
    params, buffers, meta = load_params(path)
    if meta.get("kind") != "mobicast-checkpoint":
        raise CheckpointError(f"{path!r} is not a model checkpoint")
    model = model_from_spec(meta["model"])
    return Checkpoint(model, ModelState(params, buffers),
                      float(meta["val_error"]), int(meta["epoch"]),
                      int(meta["stopped_epoch"]))


def config_for_variant(config: TrainConfig, variant: str) -> dict:
    """Keyword arguments for assemble/split calls of the given sample variant."""
    if variant not in ("static", "sequence"):
        raise ContractError(f"unknown variant {variant!r}")
    return {"variant": variant, "s": config.seq_len}
