"""Transfer learning across countries: first-order meta-training of a shared
initialization, per-cell fine-tuning, and the pooled-data baseline."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import tape as tp
from .dataio import CountryDataset
from .errors import (
    CheckpointError,
    ContractError,
    InsufficientDataError,
    TrainingDivergedError,
)
from .graphs import GraphSample, assemble_samples
from .models import ModelState, model_from_spec, model_spec, stack_targets
from .params import clone_params
from .optim import sgd_step
from .params import load_params, save_params
from .rng import Rng
from .train import (
    PROTOCOL_START_DAY,
    Checkpoint,
    SplitSpec,
    TrainConfig,
    make_splits,
    predict,
    train_model,
)


@dataclass(frozen=True)
class MetaConfig:
    inner_lr: float = 1e-3   # step size of the per-task adaptation pass
    meta_lr: float = 1e-3    # step size of the shared-parameter update
    dt: int = 14             # horizons 1..dt
    t_start: int = PROTOCOL_START_DAY
    meta_epochs: int = 1
    batch_size: int = 8
    d: int = 7
    seed: int = 0

    def __post_init__(self):
        if self.inner_lr < 0 or self.meta_lr < 0:
            raise ContractError("step sizes must be >= 0")
        if self.dt < 1 or self.batch_size < 1 or self.d < 1 or self.meta_epochs < 0:
            raise ContractError("dt/batch_size/d must be >= 1 and meta_epochs >= 0")
        if self.t_start < PROTOCOL_START_DAY:
            raise ContractError(
                f"t_start must be >= {PROTOCOL_START_DAY}, got {self.t_start}")


@dataclass
class TaskSplit:
    """One adaptation task: all samples with targets inside the first t days,
    plus the single held-out sample whose target falls at day t+horizon."""
    country: str
    t: int
    horizon: int
    train: list
    test: GraphSample


@dataclass
class FineTuneResult:
    checkpoints: dict        # (t, j) -> Checkpoint
    mean_error: float        # mean over cells of the test-day MAE
    skipped: list            # (t, j, reason) cells without enough data


def enumerate_tasks(dataset: CountryDataset, config: MetaConfig) -> list:
    """Task grid over (t, horizon), t ascending then horizon ascending.

    Cells whose held-out target day would fall beyond the data are skipped;
    an empty grid is an error.
    """
    tasks = []
    for t in range(config.t_start, dataset.t_total + 1):
        for j in range(1, config.dt + 1):
            if t + j > dataset.t_total:
                continue
            universe = assemble_samples(dataset, config.d, j, t_end=t,
                                        include_test=True)
            tasks.append(TaskSplit(country=dataset.country, t=t, horizon=j,
                                   train=universe[:-1], test=universe[-1]))
    if not tasks:
        raise InsufficientDataError(
            f"{dataset.country}: no tasks for t_start={config.t_start}, "
            f"dt={config.dt} in {dataset.t_total} days")
    return tasks


def _loss_grads(model, state: ModelState, batch, rng, where: str) -> dict:
    """Squared-error loss gradients for one batch, in training mode."""
    tape = tp.Tape(check_finite=False)
    pvars = tape.bind(state.params)
    preds = model.forward(tape, pvars, state.buffers, batch, "train", rng)
    targets = tape.constant(stack_targets(batch))
    loss = tp.mean_all(tp.square(tp.sub(preds, targets)))
    if not math.isfinite(float(loss.value[0, 0])):
        raise TrainingDivergedError(f"non-finite loss during {where}")
    tape.backward(loss)
    return {name: tape.grad(var) for name, var in pvars.items()}


def meta_task_step(model, state: ModelState, task: TaskSplit, inner_lr: float,
                   meta_step: float, batch_size: int, rng) -> None:
    """One task's contribution to the shared parameters, applied in place.

    Clones the shared parameters, adapts the clone with one pass of batch
    gradient steps over the task's training samples, then moves the shared
    parameters along the adapted clone's held-out gradient (the curvature
    correction of the exact two-level derivative is dropped).  Normalization
    buffers are shared with the clone, so running statistics accumulate into
    `state` and the returned initialization normalizes at the scale its
    weights were trained against.
    """
    inner = ModelState(clone_params(state.params), state.buffers)
    for start in range(0, len(task.train), batch_size):
        batch = task.train[start:start + batch_size]
        grads = _loss_grads(model, inner, batch, rng,
                            f"adaptation for {task.country} t={task.t} j={task.horizon}")
        inner.params = sgd_step(inner.params, grads, inner_lr)
    meta_grads = _loss_grads(model, inner, [task.test], rng,
                             f"meta step for {task.country} t={task.t} j={task.horizon}")
    state.params = sgd_step(state.params, meta_grads, meta_step)


def maml_meta_train(datasets: list, model, config: MetaConfig,
                    init_state: Optional[ModelState] = None) -> ModelState:
    """Learn a shared initialization from several countries' task grids.

    Countries are visited in the given order, tasks in grid order; the shared
    parameters move after every task, scaled by meta_lr over the number of
    countries.  Returns the final shared state.
    """
    if not datasets:
        raise ContractError("meta-training needs at least one country")
    rng = Rng(config.seed)
    if init_state is not None:
        template = model.init_state(rng.spawn("shape-check"))
        if set(template.params) != set(init_state.params) or any(
                template.params[k].shape != init_state.params[k].shape
                for k in template.params):
            raise ContractError("init_state does not match the model's "
                                "parameter layout")
        state = init_state.clone()
    else:
        state = model.init_state(rng.spawn("init"))
    task_lists = [enumerate_tasks(ds, config) for ds in datasets]
    step = config.meta_lr / len(datasets)
    dropout_rng = rng.spawn("dropout")
    for _ in range(config.meta_epochs):
        for tasks in task_lists:
            for task in tasks:
                meta_task_step(model, state, task, config.inner_lr, step,
                               config.batch_size, dropout_rng)
    return state


def fine_tune(state: ModelState, dataset: CountryDataset, model,
              config: MetaConfig, train_config: TrainConfig) -> FineTuneResult:
    """Adapt a shared initialization to one target country, cell by cell.

    Every (t, horizon) cell of the target's task grid gets its own training
    run started from `state`; cells without enough data for a train or
    validation split are recorded as skipped.  The returned mean error
    averages the test-day MAE over the completed cells.
    """
    checkpoints = {}
    errors = []
    skipped = []
    for t in range(config.t_start, dataset.t_total + 1):
        for j in range(1, config.dt + 1):
            if t + j > dataset.t_total:
                continue
            try:
                splits = make_splits(dataset, t, j, config.d)
            except InsufficientDataError as exc:
                skipped.append((t, j, str(exc)))
                continue
            ckpt = train_model(splits, model, train_config, init_state=state)
            forecast = predict(ckpt, splits.test)
            actual = np.asarray(splits.test.target, dtype=np.float64).reshape(-1)
            errors.append(float(np.mean(np.abs(forecast - actual))))
            checkpoints[(t, j)] = ckpt
    if not errors:
        raise InsufficientDataError(
            f"{dataset.country}: every fine-tuning cell was skipped")
    return FineTuneResult(checkpoints=checkpoints,
                          mean_error=float(np.mean(errors)), skipped=skipped)


def tl_base_train(datasets: list, target_country: str, t: int, j: int, model,
                  train_config: TrainConfig) -> Checkpoint:
    """Train one model on every other country's full sample set pooled with
    the target's training split; validation and test stay target-only."""
    matches = [ds for ds in datasets if ds.country == target_country]
    if len(matches) != 1:
        raise ContractError(
            f"target country {target_country!r} must appear exactly once, "
            f"found {len(matches)}")
    target = matches[0]
    splits = make_splits(target, t, j, model.d)
    pooled = []
    for ds in datasets:
        if ds.country != target_country:
            pooled.extend(assemble_samples(ds, model.d, j, t_end=ds.t_total))
    pooled.extend(splits.train)
    full = SplitSpec(t=t, horizon=j, train=pooled,
                     validation=splits.validation, test=splits.test)
    return train_model(full, model, train_config)


def save_meta_state(path: str, state: ModelState, model, countries: list,
                    config: MetaConfig) -> None:
    save_params(path, state.params, state.buffers, {
        "kind": "mobicast-meta",
        "model": model_spec(model),
        "countries": list(countries),
        "config": asdict(config),
    })


def load_meta_state(path: str):
    """Returns (state, model, countries) from a saved shared initialization."""
    params, buffers, meta = load_params(path)
    if meta.get("kind") != "mobicast-meta":
        raise CheckpointError(f"{path!r} is not a meta-training state")
    return (ModelState(params, buffers), model_from_spec(meta["model"]),
            list(meta["countries"]))
