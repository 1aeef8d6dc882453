"""Training loop with live privacy accounting, plus the epsilon/clip sweep.

``train`` runs one configured experiment: split the data, build the model,
calibrate the noise multiplier when a target epsilon is requested, then step
the private optimizer while watching the ledger. When a budget is set the
loop halts *before* the step that would push epsilon past it, so no emitted
report can ever overstate the budget.

``sweep`` runs a grid of (target epsilon, clip norm, freeze prefix) cells,
several seeds per cell, and emits flat CSV rows plus a median row per cell.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .accountant import MechanismSpec, PrivacyLedger, calibrate_sigma
from .config import RunConfig, SweepGrid
from .data import Dataset, load_csv_dataset, synthetic_dataset
from .mechanisms import ClipSpec, NoiseSpec
from .model import Model, accuracy, batch_gradient, build_mlp, validate_model
from .optim import DpAdamState, adam_step, dp_adam_step

__all__ = [
    "EpochRecord",
    "TrainReport",
    "SweepRow",
    "REPORT_COLUMNS",
    "split_dataset",
    "train",
    "sweep",
    "report_row",
    "write_report_csv",
    "write_epochs_csv",
]

STOP_EPOCHS_EXHAUSTED = "epochs-exhausted"
STOP_BUDGET_EXCEEDED = "budget-exceeded"

REPORT_COLUMNS = (
    "run_id",
    "seed",
    "target_eps",
    "sigma",
    "achieved_eps",
    "delta",
    "clip_norm",
    "freeze_prefix",
    "epochs_run",
    "stop_reason",
    "train_loss_final",
    "valid_acc",
    "test_acc",
    "wall_clock_s",
)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    valid_acc: float
    epsilon: float | None


@dataclass
class TrainReport:
    epochs: list[EpochRecord]
    stop_reason: str
    steps_run: int
    sigma: float | None
    target_eps: float | None
    achieved_eps: float | None
    optimal_alpha: float | None
    delta: float | None
    test_acc: float
    wall_clock_s: float
    config: RunConfig

    @property
    def final_train_loss(self) -> float:
        return self.epochs[-1].train_loss if self.epochs else math.nan

    @property
    def final_valid_acc(self) -> float:
        return self.epochs[-1].valid_acc if self.epochs else math.nan

    def numerics(self) -> dict:
        """Everything deterministic about the run (excludes wall clock)."""
        return {
            "epochs": [asdict(e) for e in self.epochs],
            "stop_reason": self.stop_reason,
            "steps_run": self.steps_run,
            "sigma": self.sigma,
            "target_eps": self.target_eps,
            "achieved_eps": self.achieved_eps,
            "optimal_alpha": self.optimal_alpha,
            "delta": self.delta,
            "test_acc": self.test_acc,
        }

    def summary(self) -> dict:
        """JSON-ready summary: config echo, spend, accuracy block."""
        out = self.numerics()
        out["config"] = asdict(self.config)
        out["valid_acc"] = self.final_valid_acc
        out["train_loss_final"] = self.final_train_loss
        out["wall_clock_s"] = self.wall_clock_s
        return out


@dataclass(frozen=True)
class Split:
    train: Dataset
    valid: Dataset
    test: Dataset


def _load_dataset(config: RunConfig) -> tuple[Dataset, Dataset | None]:
    if config.dataset == "csv":
        data = load_csv_dataset(config.csv_path)
        test = load_csv_dataset(config.test_csv_path) if config.test_csv_path else None
        if test is not None and test.dim != data.dim:
            raise ValueError(
                f"test set has {test.dim} features but training data has {data.dim}"
            )
        return data, test
    data = synthetic_dataset(
        config.n, config.dim, config.separation, config.label_noise, config.seed_data
    )
    return data, None


def split_dataset(config: RunConfig) -> Split:
    """Shuffle deterministically, hold out test data, then split train/valid.

    When no separate test set is supplied, ``test_fraction`` of the rows is
    held out first; the remainder is split ``train_fraction`` to train and
    the rest to validation.
    """
    data, explicit_test = _load_dataset(config)
    rng = np.random.Generator(np.random.PCG64(config.seed_data + 1))
    order = rng.permutation(len(data))
    data = data.subset(order)

    if explicit_test is not None:
        test = explicit_test
        remainder = data
    else:
        n_test = int(len(data) * config.test_fraction)
        test = data.subset(np.arange(n_test))
        remainder = data.subset(np.arange(n_test, len(data)))

    n_train = int(len(remainder) * config.train_fraction)
    if n_train < 1 or n_train >= len(remainder):
        raise ValueError(
            f"split leaves no data: {len(remainder)} rows at fraction {config.train_fraction}"
        )
    train_part = remainder.subset(np.arange(n_train))
    valid_part = remainder.subset(np.arange(n_train, len(remainder)))
    return Split(train=train_part, valid=valid_part, test=test)


def _build_model(config: RunConfig, input_dim: int) -> Model:
    widths = [input_dim, *config.widths]
    model = build_mlp(widths, norm=config.norm, seed=config.seed_model)
    if config.freeze_prefix:
        model.set_freeze_prefix(config.freeze_prefix)
    return model


def _train_private(config: RunConfig, split: Split, model: Model):
    n = len(split.train)
    q = config.batch_size / n
    if q > 1.0:
        q = 1.0
    steps_per_epoch = math.ceil(n / config.batch_size)
    planned_steps = config.epochs * steps_per_epoch

    if config.privacy == "target-epsilon":
        sigma = calibrate_sigma(config.target_eps, config.delta, q, planned_steps)
    else:
        sigma = config.sigma

    ledger = PrivacyLedger(MechanismSpec(sigma, q), delta=config.delta)
    clip = ClipSpec(config.clip_norm)
    noise = NoiseSpec(sigma, seed=config.seed_noise)
    poisson_rng = np.random.Generator(np.random.PCG64(config.seed_poisson))
    noise_rng = noise.make_rng()
    state = DpAdamState.for_model(
        model,
        lr=config.lr,
        variant=config.variant,
        bias_correction=config.bias_correction,
    )

    xs, ys = split.train.features, split.train.labels
    epochs: list[EpochRecord] = []
    stop_reason = STOP_EPOCHS_EXHAUSTED
    steps_run = 0
    budget = config.budget_eps

    for epoch in range(1, config.epochs + 1):
        losses: list[float] = []
        stopped = False
        for _ in range(steps_per_epoch):
            if budget is not None and ledger.epsilon_if(steps_run + 1) > budget:
                stop_reason = STOP_BUDGET_EXCEEDED
                stopped = True
                break
            outcome = dp_adam_step(
                model,
                xs,
                ys,
                state,
                clip,
                noise,
                q,
                ledger,
                poisson_rng,
                noise_rng,
                noise_placement=config.noise_placement,
            )
            steps_run += 1
            if outcome.applied:
                losses.append(outcome.mean_loss)
        epochs.append(
            EpochRecord(
                epoch=epoch,
                train_loss=float(np.mean(losses)) if losses else math.nan,
                valid_acc=accuracy(model, split.valid.features, split.valid.labels),
                epsilon=ledger.spent().epsilon,
            )
        )
        if stopped:
            break

    spent = ledger.spent()
    return epochs, stop_reason, steps_run, sigma, spent


def _train_nonprivate(config: RunConfig, split: Split, model: Model):
    state = DpAdamState.for_model(
        model,
        lr=config.lr,
        variant=config.variant,
        bias_correction=config.bias_correction,
    )
    order_rng = np.random.Generator(np.random.PCG64(config.seed_data + 2))
    xs, ys = split.train.features, split.train.labels
    n = len(split.train)
    epochs: list[EpochRecord] = []
    steps_run = 0
    for epoch in range(1, config.epochs + 1):
        order = order_rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            loss, grad = batch_gradient(model, xs[batch], ys[batch])
            adam_step(model, grad, state)
            losses.append(loss)
            steps_run += 1
        epochs.append(
            EpochRecord(
                epoch=epoch,
                train_loss=float(np.mean(losses)),
                valid_acc=accuracy(model, split.valid.features, split.valid.labels),
                epsilon=None,
            )
        )
    return epochs, STOP_EPOCHS_EXHAUSTED, steps_run


def train(config: RunConfig) -> TrainReport:
    """Run one experiment end to end and return its report.

    Privacy off trains plain minibatch Adam; the private modes run the noisy
    optimizer with a live ledger, stopping early if a budget would be
    exceeded. Deterministic: identical configs (seeds included) reproduce
    the report numerics bit-exactly.
    """
    started = time.perf_counter()
    split = split_dataset(config)
    model = _build_model(config, split.train.dim)
    report = validate_model(model)
    if not report.ok:
        raise ValueError("model failed validation: " + "; ".join(v.reason for v in report.violations))

    if config.privacy == "off":
        epochs, stop_reason, steps_run = _train_nonprivate(config, split, model)
        sigma = None
        achieved = None
        optimal_alpha = None
        delta = None
        target = None
    else:
        epochs, stop_reason, steps_run, sigma, spent = _train_private(config, split, model)
        achieved = spent.epsilon
        optimal_alpha = spent.optimal_alpha
        delta = spent.delta
        target = config.target_eps if config.privacy == "target-epsilon" else None

    test_acc = accuracy(model, split.test.features, split.test.labels)
    return TrainReport(
        epochs=epochs,
        stop_reason=stop_reason,
        steps_run=steps_run,
        sigma=sigma,
        target_eps=target,
        achieved_eps=achieved,
        optimal_alpha=optimal_alpha,
        delta=delta,
        test_acc=test_acc,
        wall_clock_s=time.perf_counter() - started,
        config=config,
    )


@dataclass(frozen=True)
class SweepRow:
    """One report CSV row; empty strings stand for not-applicable fields."""

    run_id: str
    seed: str
    target_eps: str
    sigma: str
    achieved_eps: str
    delta: str
    clip_norm: str
    freeze_prefix: str
    epochs_run: str
    stop_reason: str
    train_loss_final: str
    valid_acc: str
    test_acc: str
    wall_clock_s: str

    def as_list(self) -> list[str]:
        return [getattr(self, c) for c in REPORT_COLUMNS]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return repr(value)
    return str(value)


def report_row(report: TrainReport, run_id: str, seed_index) -> SweepRow:
    config = report.config
    return SweepRow(
        run_id=run_id,
        seed=_fmt(seed_index),
        target_eps=_fmt(report.target_eps if report.target_eps is not None
                        else (math.inf if config.privacy == "off" else None)),
        sigma=_fmt(report.sigma),
        achieved_eps=_fmt(report.achieved_eps),
        delta=_fmt(report.delta),
        clip_norm=_fmt(config.clip_norm),
        freeze_prefix=_fmt(config.freeze_prefix),
        epochs_run=_fmt(len(report.epochs)),
        stop_reason=report.stop_reason,
        train_loss_final=_fmt(report.final_train_loss),
        valid_acc=_fmt(report.final_valid_acc),
        test_acc=_fmt(report.test_acc),
        wall_clock_s=_fmt(report.wall_clock_s),
    )


def _cell_config(base: RunConfig, eps: float, clip: float, freeze: int, seed_index: int) -> RunConfig:
    overrides = dict(
        clip_norm=clip,
        freeze_prefix=freeze,
        seed_model=base.seed_model + seed_index,
        seed_data=base.seed_data + seed_index,
        seed_poisson=base.seed_poisson + seed_index,
        seed_noise=base.seed_noise + seed_index,
    )
    if math.isinf(eps):
        overrides.update(privacy="off", target_eps=None, budget_eps=None)
    else:
        overrides.update(privacy="target-epsilon", target_eps=eps)
    return base.with_overrides(**overrides)


def _median_str(values: list[str]) -> str:
    nums = [float(v) for v in values if v not in ("", "nan")]
    if not nums:
        return ""
    return repr(float(np.median(nums)))


def sweep(grid: SweepGrid, base: RunConfig) -> list[SweepRow]:
    """Run every grid cell with every seed; append a median row per cell.

    A failing cell run becomes a row whose stop_reason is ``error`` (with
    empty numerics) and the sweep continues, so one bad configuration cannot
    lose the rest of the grid.
    """
    rows: list[SweepRow] = []
    for eps, clip, freeze in grid.cells():
        cell_id = f"eps{_fmt(eps)}-clip{_fmt(clip)}-freeze{freeze}"
        cell_rows: list[SweepRow] = []
        for seed_index in range(grid.seeds_per_cell):
            run_id = f"{cell_id}-seed{seed_index}"
            config = _cell_config(base, eps, clip, freeze, seed_index)
            try:
                report = train(config)
            except Exception:
                cell_rows.append(
                    SweepRow(
                        run_id=run_id,
                        seed=_fmt(seed_index),
                        target_eps=_fmt(eps),
                        sigma="",
                        achieved_eps="",
                        delta="",
                        clip_norm=_fmt(clip),
                        freeze_prefix=_fmt(freeze),
                        epochs_run="",
                        stop_reason="error",
                        train_loss_final="",
                        valid_acc="",
                        test_acc="",
                        wall_clock_s="",
                    )
                )
                continue
            cell_rows.append(report_row(report, run_id, seed_index))
        rows.extend(cell_rows)
        rows.append(
            SweepRow(
                run_id=f"{cell_id}-median",
                seed="",
                target_eps=_fmt(eps),
                sigma=_median_str([r.sigma for r in cell_rows]),
                achieved_eps=_median_str([r.achieved_eps for r in cell_rows]),
                delta=cell_rows[0].delta,
                clip_norm=_fmt(clip),
                freeze_prefix=_fmt(freeze),
                epochs_run=_median_str([r.epochs_run for r in cell_rows]),
                stop_reason="median",
                train_loss_final=_median_str([r.train_loss_final for r in cell_rows]),
                valid_acc=_median_str([r.valid_acc for r in cell_rows]),
                test_acc=_median_str([r.test_acc for r in cell_rows]),
                wall_clock_s=_median_str([r.wall_clock_s for r in cell_rows]),
            )
        )
    return rows


def write_report_csv(rows: list[SweepRow], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow(row.as_list())


def write_epochs_csv(report: TrainReport, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "valid_acc", "epsilon"])
        for rec in report.epochs:
            writer.writerow(
                [rec.epoch, _fmt(rec.train_loss), _fmt(rec.valid_acc), _fmt(rec.epsilon)]
            )
