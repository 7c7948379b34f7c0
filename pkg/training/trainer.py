"""Alternating generator / discriminator training of the flow model."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Final

import numpy as np
import numpy.typing as npt

from autodiff.rng import RngStream
from autodiff.tensor import Graph, NonFiniteError, Tensor
from flows.checkpoint import Checkpoint, flow_arrays, load_checkpoint, load_flow_arrays, save_checkpoint
from flows.conditions import DOMAIN_SIM, Condition
from flows.model import FlowModel, build_model, proxy_condition
from training.discriminator import Discriminator, DiscriminatorSpec
from training.losses import Batch, LossTermError, LossWeights, total_losses
from training.optim import AdamState, OptimizerConfig, adam_step

LOSS_COLUMNS: Final[tuple[str, ...]] = (
    "ml_real",
    "ml_sim",
    "gen_real",
    "gen_sim",
    "gen_total",
    "dis_real",
    "dis_sim",
    "dis_total",
)
STATS_COLUMNS: Final[tuple[str, ...]] = ("epoch", "step", *LOSS_COLUMNS, "wall_clock_seconds")
FINAL_CHECKPOINT: Final[str] = "model.cinn"


class TrainingDivergedError(NonFiniteError):
    def __init__(self, term: str, epoch: int, step: int, detail: str = "") -> None:
        message = f"training diverged in {term} at epoch={epoch} step={step}"
        super().__init__(f"{message}: {detail}" if detail else message)
        self.term = term
        self.epoch = epoch
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 256
    seed: int = 0
    checkpoint_every: int = 10
    generator: OptimizerConfig = field(default_factory=OptimizerConfig)
    discriminator: OptimizerConfig = field(default_factory=OptimizerConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    discriminator_spec: DiscriminatorSpec = field(default_factory=DiscriminatorSpec)

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.checkpoint_every < 1:
            raise ValueError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class TrainingSet:
    """Spectra of one domain; ``tissue`` is None for unlabeled (real) data."""

    x: npt.NDArray[np.float64]
    tissue: npt.NDArray[np.int64] | None = None

    def __post_init__(self) -> None:
        if len(self.x) == 0:
            raise ValueError("training set is empty")
        if self.tissue is not None and len(self.tissue) != len(self.x):
            raise ValueError(f"{len(self.x)} samples but {len(self.tissue)} tissue labels")

    def __len__(self) -> int:
        return len(self.x)


@dataclass(frozen=True)
class StatsRow:
    epoch: int
    step: int
    ml_real: float
    ml_sim: float
    gen_real: float
    gen_sim: float
    gen_total: float
    dis_real: float
    dis_sim: float
    dis_total: float
    wall_clock_seconds: float

    def losses(self) -> tuple[float, ...]:
        return tuple(getattr(self, name) for name in LOSS_COLUMNS)


@dataclass
class TrainStats:
    rows: list[StatsRow] = field(default_factory=list)

    def column(self, name: str) -> list[float]:
        return [float(getattr(row, name)) for row in self.rows]

    def deterministic_view(self) -> list[tuple[Any, ...]]:
        """Rows without the wall-clock column."""
        return [(row.epoch, row.step, *row.losses()) for row in self.rows]

    def write_csv(self, path: Path, *, append: bool = False) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        write_header = not (append and path.exists())
        with path.open("a" if append else "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            if write_header:
                writer.writerow(STATS_COLUMNS)
            for row in self.rows:
                writer.writerow(
                    [row.epoch, row.step, *(repr(v) for v in row.losses()), f"{row.wall_clock_seconds:.3f}"]
                )
        return path

    @classmethod
    def read_csv(cls, path: Path) -> TrainStats:
        with path.open(newline="", encoding="utf-8") as handle:
            reader = csv.DictReader(handle)
            rows = [
                StatsRow(
                    epoch=int(record["epoch"]),
                    step=int(record["step"]),
                    wall_clock_seconds=float(record["wall_clock_seconds"]),
                    **{name: float(record[name]) for name in LOSS_COLUMNS},
                )
                for record in reader
            ]
        return cls(rows=rows)


@dataclass
class TrainingState:
    model: FlowModel
    dis_sim: Discriminator
    dis_real: Discriminator
    gen_opt: AdamState
    dis_opt: AdamState
    epoch: int = 0
    # pipeline config hash and master seed, carried into every checkpoint
    run: dict[str, Any] = field(default_factory=dict)

    def dis_parameters(self) -> dict[str, Tensor]:
        return {**self.dis_sim.parameters("dis_sim."), **self.dis_real.parameters("dis_real.")}

    def to_checkpoint(self, cfg: TrainConfig) -> Checkpoint:
        arrays = flow_arrays(self.model)
        arrays.update({name: t.data.copy() for name, t in self.dis_parameters().items()})
        arrays.update(self.gen_opt.arrays("opt_gen."))
        arrays.update(self.dis_opt.arrays("opt_dis."))
        return Checkpoint(
            spec=self.model.spec.to_dict(),
            arrays=arrays,
            metadata={"epoch": self.epoch, "train_config": cfg.to_dict(), "run": dict(self.run)},
        )


def new_training_state(model: FlowModel, cfg: TrainConfig) -> TrainingState:
    rng = RngStream(cfg.seed).child("discriminators")
    dim = model.spec.input_dim
    return TrainingState(
        model=model,
        dis_sim=Discriminator.create(dim, cfg.discriminator_spec, rng.child("sim")),
        dis_real=Discriminator.create(dim, cfg.discriminator_spec, rng.child("real")),
        gen_opt=AdamState(config=cfg.generator),
        dis_opt=AdamState(config=cfg.discriminator),
    )


def restore_training_state(checkpoint: Checkpoint, cfg: TrainConfig) -> TrainingState:
    model = build_model(checkpoint.model_spec(), RngStream(0))
    load_flow_arrays(model, checkpoint.section("flow."))
    state = new_training_state(model, cfg)
    for name, tensor in state.dis_parameters().items():
        if name not in checkpoint.arrays:
            raise ValueError(f"checkpoint has no discriminator array {name}")
        tensor.data = np.array(checkpoint.arrays[name], dtype=np.float64)
    state.gen_opt = AdamState.from_arrays(cfg.generator, checkpoint.section("opt_gen."))
    state.dis_opt = AdamState.from_arrays(cfg.discriminator, checkpoint.section("opt_dis."))
    state.epoch = int(checkpoint.metadata.get("epoch", 0))
    state.run = dict(checkpoint.metadata.get("run", {}))
    return state


def _check_gradients(params: dict[str, Tensor], term: str, epoch: int, step: int) -> None:
    for name, param in params.items():
        if param.grad is not None and not np.all(np.isfinite(param.grad)):
            raise TrainingDivergedError(f"{term} gradient of {name}", epoch, step)


def _zero_grads(*groups: dict[str, Tensor]) -> None:
    for group in groups:
        for param in group.values():
            param.zero_grad()


def steps_per_epoch(n_sim: int, n_real: int, batch_size: int) -> int:
    return max(1, math.ceil(min(n_sim, n_real) / batch_size))


def _checkpoint_path(directory: Path, epoch: int) -> Path:
    return directory / f"epoch_{epoch:04d}.cinn"


def train(
    state: TrainingState,
    data_sim: TrainingSet,
    data_real: TrainingSet,
    cfg: TrainConfig,
    *,
    checkpoint_dir: Path | None = None,
) -> TrainStats:
    """Run epochs ``state.epoch .. cfg.epochs - 1``; one generator and one discriminator step per batch.

    Every random draw comes from a stream keyed by (seed, epoch, step), so a
    run resumed from an epoch checkpoint continues bit-identically.
    """
    model = state.model
    spec = model.spec
    sim_tissue = data_sim.tissue
    if sim_tissue is None:
        raise ValueError("simulated training data must carry tissue labels")
    expected = spec.input_shape
    for name, data in (("sim", data_sim), ("real", data_real)):
        if tuple(data.x.shape[1:]) != expected:
            raise ValueError(f"{name} data has sample shape {data.x.shape[1:]}, model expects {expected}")

    gen_params = model.parameters()
    dis_params = state.dis_parameters()
    root = RngStream(cfg.seed).child("train")
    n_steps = steps_per_epoch(len(data_sim), len(data_real), cfg.batch_size)
    stats = TrainStats()
    started = time.perf_counter()

    for epoch in range(state.epoch, cfg.epochs):
        epoch_rng = root.child("epoch", epoch)
        order_sim = epoch_rng.child("shuffle", "sim").permutation(len(data_sim))
        order_real = epoch_rng.child("shuffle", "real").permutation(len(data_real))
        for step in range(n_steps):
            step_rng = epoch_rng.child("step", step)
            idx_sim = order_sim[step * cfg.batch_size : (step + 1) * cfg.batch_size]
            idx_real = order_real[step * cfg.batch_size : (step + 1) * cfg.batch_size]
            batch_sim = Batch(
                Tensor(data_sim.x[idx_sim]),
                Condition.for_domain(DOMAIN_SIM, sim_tissue[idx_sim], spec.n_classes),
            )
            batch_real = Batch(
                Tensor(data_real.x[idx_real]),
                proxy_condition(step_rng.child("proxy"), spec, len(idx_real)),
            )

            with Graph() as graph:
                try:
                    terms = total_losses(
                        batch_sim,
                        batch_real,
                        model,
                        state.dis_sim,
                        state.dis_real,
                        weights=cfg.weights,
                        rng=step_rng.child("dropout"),
                        train=True,
                    )
                except LossTermError as exc:
                    raise TrainingDivergedError(exc.term, epoch, step, str(exc)) from exc

            _zero_grads(gen_params, dis_params)
            graph.backward(terms.gen_total)
            _check_gradients(gen_params, "gen_total", epoch, step)
            adam_step(gen_params, {name: p.grad for name, p in gen_params.items()}, state.gen_opt)

            _zero_grads(gen_params, dis_params)
            graph.backward(terms.dis_total)
            _check_gradients(dis_params, "dis_total", epoch, step)
            adam_step(dis_params, {name: p.grad for name, p in dis_params.items()}, state.dis_opt)
            _zero_grads(gen_params, dis_params)

            values = terms.values()
            stats.rows.append(
                StatsRow(
                    epoch=epoch,
                    step=step,
                    wall_clock_seconds=time.perf_counter() - started,
                    **values,
                )
            )

        state.epoch = epoch + 1
        last = stats.rows[-1]
        logging.info(
            "epoch=%d step=%d ml_sim=%.4f ml_real=%.4f gen_total=%.4f dis_total=%.4f",
            epoch,
            last.step,
            last.ml_sim,
            last.ml_real,
            last.gen_total,
            last.dis_total,
        )
        if checkpoint_dir is not None and (state.epoch % cfg.checkpoint_every == 0):
            save_checkpoint(_checkpoint_path(checkpoint_dir, state.epoch), state.to_checkpoint(cfg))

    if checkpoint_dir is not None:
        save_checkpoint(checkpoint_dir / FINAL_CHECKPOINT, state.to_checkpoint(cfg))
    return stats


def resume(
    checkpoint_path: Path,
    data_sim: TrainingSet,
    data_real: TrainingSet,
    cfg: TrainConfig,
    *,
    checkpoint_dir: Path | None = None,
    run: dict[str, Any] | None = None,
) -> tuple[TrainingState, TrainStats]:
    state = restore_training_state(load_checkpoint(checkpoint_path), cfg)
    if run is not None:
        state.run = dict(run)
    logging.info("resuming training path=%s epoch=%d", checkpoint_path, state.epoch)
    stats = train(state, data_sim, data_real, cfg, checkpoint_dir=checkpoint_dir)
    return state, stats
