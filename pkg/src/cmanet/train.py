"""
Mini-batch Adam training of CMANet on a fixed dataset or on topologies
simulated fresh every epoch.
"""

import logging
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import pandas as pd
from tqdm import tqdm

from cmanet.channel import Scene, simulate_batch
from cmanet.dataio import (
    CHECKPOINT_VERSION,
    Checkpoint,
    Dataset,
    read_checkpoint,
    restore_rng,
    rng_state,
    write_checkpoint,
)
from cmanet.errors import ConfigError, ContractError, NonFiniteGradientError, NonFiniteLossError
from cmanet.models import (
    CheckpointManifest,
    DataMode,
    MetricsRecord,
    ModelConfig,
    Normalization,
    PipelineConfig,
    TrainConfig,
)
from cmanet.model import CMANet, ModelParams
from cmanet.numeric import backward

METRICS_FILE = "metrics.csv"
LAST_CHECKPOINT = "last.cmck"
CALIBRATION_SAMPLES = 256
PREDICT_BATCH = 256

# seed streams for topologies simulated during training
TRAIN_STREAM = 1
VALIDATION_STREAM = 2
CALIBRATION_STREAM = 3

logger = logging.getLogger(__name__)


# optimizer


@dataclass
class OptimizerState:
    first: dict[str, np.ndarray]
    second: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "OptimizerState":
        arrays = params.arrays()
        return cls(
            first={name: np.zeros_like(a) for name, a in arrays.items()},
            second={name: np.zeros_like(a) for name, a in arrays.items()},
        )

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m/{name}": a for name, a in self.first.items()}
        out.update({f"adam.v/{name}": a for name, a in self.second.items()})
        return out


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale all gradients together so their global L2 norm is at most ``max_norm``.

    Returns the (possibly rescaled) gradients and the norm before clipping.
    """
    norm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
    if norm <= max_norm:
        return dict(grads), norm
    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}, norm


def adam_step(
    params: ModelParams, grads: Mapping[str, np.ndarray], state: OptimizerState, config: TrainConfig
) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Every gradient is checked before anything is touched, so a non-finite
    gradient leaves both the parameters and the moments unchanged.
    """
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradientError(name)
        if grad.shape != params[name].shape:
            raise ContractError(
                f"gradient for {name} has shape {grad.shape}, parameter has {params[name].shape}"
            )
    if config.clip_norm is not None:
        grads, norm = clip_grad_norm(grads, config.clip_norm)
        if norm > config.clip_norm:
            logger.debug(f"Clipped gradient norm {norm:.4f} to {config.clip_norm}")

    beta1, beta2 = config.betas
    state.step += 1
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    for name, grad in grads.items():
        m = state.first[name] = beta1 * state.first[name] + (1.0 - beta1) * grad
        v = state.second[name] = beta2 * state.second[name] + (1.0 - beta2) * grad * grad
        params[name].data -= config.learning_rate * (m / correction1) / (
            np.sqrt(v / correction2) + config.adam_eps
        )


class Adam:
    def __init__(self, params: ModelParams, config: TrainConfig, state: OptimizerState | None = None):
        self.params = params
        self.config = config
        self.state = state if state is not None else OptimizerState.zeros(params)

    def step(self) -> None:
        adam_step(self.params, self.params.gradients(), self.state, self.config)

    def zero_grad(self) -> None:
        self.params.zero_grad()


# data sources


class TrainingData(Protocol):
    def n_batches(self, batch_size: int) -> int: ...

    def batches(
        self, epoch: int, rng: np.random.Generator, batch_size: int
    ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield (raw CSI B×L×M×N, positions B×3 in meters)."""
        ...


@dataclass
class FixedData:
    """A stored dataset, reshuffled every epoch."""

    dataset: Dataset

    def n_batches(self, batch_size: int) -> int:
        return -(-len(self.dataset) // batch_size)

    def batches(self, epoch, rng, batch_size):
        order = rng.permutation(len(self.dataset))
        positions = self.dataset.positions
        for start in range(0, len(order), batch_size):
            # memmap reads are cheaper in file order
            indices = np.sort(order[start : start + batch_size])
            yield self.dataset.csi(indices), positions[indices]


@dataclass
class FreshData:
    """``samples`` new topologies per epoch, simulated batch by batch."""

    scene: Scene
    seed: int
    samples: int
    workers: int = 1

    def n_batches(self, batch_size: int) -> int:
        return -(-self.samples // batch_size)

    def batches(self, epoch, rng, batch_size):
        for start in range(0, self.samples, batch_size):
            indices = range(start, min(start + batch_size, self.samples))
            positions, csi = simulate_batch(
                self.scene, self.seed, indices, stream=(TRAIN_STREAM, epoch), workers=self.workers
            )
            yield csi, positions


def fresh_normalization(scene: Scene, seed: int, workers: int = 1) -> Normalization:
    """CSI scale from a calibration draw that never overlaps training or validation."""
    _, csi = simulate_batch(
        scene, seed, range(CALIBRATION_SAMPLES), stream=(CALIBRATION_STREAM,), workers=workers
    )
    scale = float(np.sqrt(np.mean(np.abs(csi) ** 2)))
    return Normalization(
        csi_scale=scale if scale > 0 else 1.0,
        box_lower=tuple(scene.ue_lower.tolist()),
        box_upper=tuple(scene.ue_upper.tolist()),
    )


def validation_errors(model: CMANet, csi: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Per-sample Euclidean error (meters) of the final-subcarrier estimate."""
    estimates = model.predict(csi)[:, -1, :]
    return np.linalg.norm(estimates - positions, axis=1)


# training loop


def train_epoch(
    model: CMANet,
    data: TrainingData,
    optimizer: Adam,
    rng: np.random.Generator,
    epoch: int = 1,
    progress: bool = False,
) -> float:
    """Run one pass over ``data`` and return the sample-weighted mean batch loss.

    Raises:
        NonFiniteLossError: a batch produced a NaN or infinite loss.
        NonFiniteGradientError: a gradient was non-finite, nothing was updated.
    """
    batch_size = optimizer.config.batch_size
    total, seen = 0.0, 0
    batches = tqdm(
        data.batches(epoch, rng, batch_size),
        total=data.n_batches(batch_size),
        desc=f"Epoch {epoch}",
        disable=not progress,
        leave=False,
    )
    for batch_index, (csi, positions) in enumerate(batches):
        optimizer.zero_grad()
        loss = model.loss(csi, positions)
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteLossError(batch_index, value)
        logger.debug(f"Epoch {epoch}, batch {batch_index}: loss {value:.6f}")
        backward(loss)
        optimizer.step()
        total += value * len(positions)
        seen += len(positions)
    if seen == 0:
        raise ContractError("training data is empty")
    return total / seen


@dataclass
class FitResult:
    model: CMANet
    metrics: list[MetricsRecord]
    checkpoints: list[Path] = field(default_factory=list)
    initial_val_median_m: float | None = None

    @property
    def last_checkpoint(self) -> Path | None:
        return self.checkpoints[-1] if self.checkpoints else None


def checkpoint_name(epoch: int) -> str:
    return f"epoch-{epoch:04d}.cmck"


def _write_metrics_header(path: Path, config: PipelineConfig, model_config: ModelConfig) -> None:
    with open(path, "w") as f:
        f.write(f"# train: {config.train.model_dump_json()}\n")
        f.write(f"# model: {model_config.model_dump_json()}\n")
        f.write(f"# seed: {config.seed}\n")
        f.write(",".join(MetricsRecord.model_fields) + "\n")


def _append_metrics(path: Path, record: MetricsRecord) -> None:
    pd.DataFrame([record.model_dump()]).to_csv(path, mode="a", header=False, index=False)


def read_metrics(path: str | Path) -> list[MetricsRecord]:
    frame = pd.read_csv(path, comment="#")
    return [
        MetricsRecord(**{k: None if pd.isna(v) else v for k, v in row.items()})
        for row in frame.to_dict(orient="records")
    ]


def _truncate_metrics(path: Path, last_epoch: int) -> list[MetricsRecord]:
    """Drop rows logged after ``last_epoch`` so a resumed run continues the same file."""
    with open(path) as f:
        comments = [line for line in f if line.startswith("#")]
    kept = [r for r in read_metrics(path) if r.epoch <= last_epoch]
    with open(path, "w") as f:
        f.writelines(comments)
        f.write(",".join(MetricsRecord.model_fields) + "\n")
    for record in kept:
        _append_metrics(path, record)
    return kept


@dataclass
class _Validation:
    """Validation inputs: a stored dataset, or a fresh draw per round."""

    dataset: Dataset | None = None
    scene: Scene | None = None
    seed: int = 0
    samples: int = 0
    workers: int = 1

    def errors(self, model: CMANet, round_index: int) -> np.ndarray:
        """Final-subcarrier errors in meters, predicted batch by batch."""
        count = len(self.dataset) if self.dataset is not None else self.samples
        errors = []
        for start in range(0, count, PREDICT_BATCH):
            stop = min(start + PREDICT_BATCH, count)
            if self.dataset is not None:
                csi = self.dataset.csi(slice(start, stop))
                positions = self.dataset.positions[start:stop]
            else:
                positions, csi = simulate_batch(
                    self.scene,
                    self.seed,
                    range(start, stop),
                    stream=(VALIDATION_STREAM, round_index),
                    workers=self.workers,
                )
            errors.append(validation_errors(model, csi, positions))
        return np.concatenate(errors)


def _bind(model_config: ModelConfig, shape: tuple[int, int, int]) -> ModelConfig:
    try:
        return model_config.bind(*shape)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def fit(
    config: PipelineConfig,
    out_dir: str | Path,
    train_data: Dataset | None = None,
    val_data: Dataset | None = None,
    resume: str | Path | None = None,
    progress: bool = False,
) -> FitResult:
    """Train a model from ``config`` and write checkpoints plus ``metrics.csv`` into ``out_dir``.

    In fixed-dataset mode ``train_data`` is required. Without ``val_data`` the
    last ``val_fraction`` of it is held out for validation. In fresh-per-epoch
    mode the scene from ``config`` is simulated on the fly and every validation
    round draws its own topologies.

    ``last.cmck`` is rewritten after every epoch and ``epoch-NNNN.cmck`` after
    every validation round. ``resume`` continues from a checkpoint written by
    an earlier run with the same data and seed.
    """
    train_config = config.train
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset_checksum = None

    if train_config.data_mode is DataMode.FIXED:
        if train_data is None:
            raise ConfigError("fixed-dataset mode needs a training dataset")
        if val_data is None and train_config.val_fraction > 0:
            n_val = max(1, int(round(len(train_data) * train_config.val_fraction)))
            if n_val >= len(train_data):
                raise ConfigError(
                    f"val_fraction={train_config.val_fraction} leaves no training samples "
                    f"out of {len(train_data)}"
                )
            val_data = train_data.subset(slice(len(train_data) - n_val, None))
            train_data = train_data.subset(slice(0, len(train_data) - n_val))
        if val_data is not None and val_data.header.shape != train_data.header.shape:
            raise ConfigError(
                f"validation data shape {val_data.header.shape} differs from "
                f"training data shape {train_data.header.shape}"
            )
        shape = train_data.header.shape
        normalization = train_data.header.normalization()
        source: TrainingData = FixedData(train_data)
        validation = (
            _Validation(dataset=val_data)
            if val_data is not None
            else None
        )
        dataset_checksum = train_data.checksum
    else:
        scene = Scene.from_config(config)
        shape = scene.shape
        normalization = fresh_normalization(scene, config.seed, train_config.workers)
        source = FreshData(scene, config.seed, train_config.samples_per_epoch, train_config.workers)
        validation = _Validation(
            scene=scene,
            seed=config.seed,
            samples=train_config.val_samples,
            workers=train_config.workers,
        )

    model_config = _bind(config.model, shape)
    metrics_path = out_dir / METRICS_FILE
    checkpoints: list[Path] = []

    if resume is not None:
        checkpoint = read_checkpoint(resume)
        model, state, rng, start_epoch = _restore(checkpoint, model_config)
        normalization = model.normalization
        metrics = _truncate_metrics(metrics_path, start_epoch - 1) if metrics_path.exists() else []
        if not metrics_path.exists():
            _write_metrics_header(metrics_path, config, model_config)
        logger.info(f"Resuming from {resume} at epoch {start_epoch}")
    else:
        rng = np.random.default_rng(train_config.seed)
        model = CMANet.initialize(model_config, normalization, rng)
        state = OptimizerState.zeros(model.params)
        start_epoch = 1
        metrics = []
        _write_metrics_header(metrics_path, config, model_config)

    optimizer = Adam(model.params, train_config, state)
    logger.info(
        f"Training {model_config.variant} model on L={shape[0]}, M={shape[1]}, N={shape[2]} "
        f"({train_config.data_mode}) for epochs {start_epoch}..{train_config.epochs}"
    )

    initial_median = None
    if validation is not None and start_epoch == 1:
        initial_median = float(np.median(validation.errors(model, 0)))
        logger.info(f"Untrained validation median error: {initial_median:.3f} m")

    for epoch in range(start_epoch, train_config.epochs + 1):
        loss = train_epoch(model, source, optimizer, rng, epoch=epoch, progress=progress)
        record = MetricsRecord(epoch=epoch, train_loss=loss)
        validated = validation is not None and epoch % train_config.val_every == 0
        if validated:
            errors = validation.errors(model, epoch // train_config.val_every)
            record = record.model_copy(
                update={
                    "val_median_m": float(np.percentile(errors, 50, method="linear")),
                    "val_p90_m": float(np.percentile(errors, 90, method="linear")),
                    "val_mean_m": float(np.mean(errors)),
                }
            )
            logger.info(
                f"Epoch {epoch}: loss {loss:.6f}, validation median {record.val_median_m:.3f} m, "
                f"p90 {record.val_p90_m:.3f} m"
            )
        else:
            logger.info(f"Epoch {epoch}: loss {loss:.6f}")
        metrics.append(record)
        _append_metrics(metrics_path, record)

        manifest = CheckpointManifest(
            format_version=CHECKPOINT_VERSION,
            epoch=epoch,
            model=model_config,
            train=train_config,
            normalization=model.normalization,
            parameters=[],
            optimizer_step=state.step,
            rng_state=rng_state(rng),
            dataset_checksum=dataset_checksum,
        )
        arrays = {**model.params.arrays(), **state.arrays()}
        if validated:
            path = out_dir / checkpoint_name(epoch)
            write_checkpoint(path, manifest, arrays)
            checkpoints.append(path)
        write_checkpoint(out_dir / LAST_CHECKPOINT, manifest, arrays)

    checkpoints.append(out_dir / LAST_CHECKPOINT)
    return FitResult(
        model=model,
        metrics=metrics,
        checkpoints=checkpoints,
        initial_val_median_m=initial_median,
    )


def _restore(
    checkpoint: Checkpoint, model_config: ModelConfig
) -> tuple[CMANet, OptimizerState, np.random.Generator, int]:
    manifest = checkpoint.manifest
    saved = manifest.model
    if (saved.n_base_stations, saved.n_antennas, saved.n_subcarriers) != (
        model_config.n_base_stations,
        model_config.n_antennas,
        model_config.n_subcarriers,
    ):
        raise ConfigError(
            f"checkpoint was trained on L={saved.n_base_stations}, M={saved.n_antennas}, "
            f"N={saved.n_subcarriers}, which does not match the training data"
        )
    if manifest.rng_state is None:
        raise ConfigError("checkpoint carries no RNG state and cannot be resumed")
    params = ModelParams.from_arrays(saved, checkpoint.parameters())
    first, second = checkpoint.optimizer_moments()
    if set(first) != set(params) or set(second) != set(params):
        raise ConfigError("checkpoint optimizer moments do not cover every parameter")
    state = OptimizerState(first=first, second=second, step=manifest.optimizer_step)
    model = CMANet(saved, params, manifest.normalization)
    return model, state, restore_rng(manifest.rng_state), manifest.epoch + 1


def load_model(path: str | Path) -> tuple[CMANet, CheckpointManifest]:
    """Rebuild a trained model from a checkpoint file."""
    checkpoint = read_checkpoint(path)
    manifest = checkpoint.manifest
    params = ModelParams.from_arrays(manifest.model, checkpoint.parameters())
    return CMANet(manifest.model, params, manifest.normalization), manifest

