"""
Positioning-error statistics for trained models: per-sample errors, the
empirical CDF, the per-subcarrier accumulation curve and the hotspot grid.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.stats import spearmanr

from cmanet.dataio import Dataset, file_checksum
from cmanet.errors import ContractError, DimensionError
from cmanet.models import AccumulationCurve, CheckpointManifest, EvalReport
from cmanet.model import CMANet
from cmanet.parallel import run_ordered

PERCENTILE_METHOD = "linear"
PERCENTILE_CONVENTION = "linear interpolation between closest ranks (inclusive)"
PREDICT_BATCH = 256

logger = logging.getLogger(__name__)


# error statistics


def euclidean_error(estimates: np.ndarray, truths: np.ndarray) -> np.ndarray:
    """3D Euclidean distance in meters along the last axis."""
    estimates = np.asarray(estimates, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if estimates.shape != truths.shape or estimates.shape[-1] != 3:
        raise DimensionError("euclidean_error", estimates.shape, truths.shape)
    return np.linalg.norm(estimates - truths, axis=-1)


def _nonempty(errors) -> np.ndarray:
    errors = np.asarray(errors, dtype=np.float64).ravel()
    if errors.size == 0:
        raise ContractError("error statistics need at least one sample")
    return errors


def error_cdf(errors) -> tuple[np.ndarray, np.ndarray]:
    """Empirical CDF: sorted errors and P(error <= value) at each of them."""
    errors = np.sort(_nonempty(errors))
    return errors, np.arange(1, errors.size + 1) / errors.size


def percentile(errors, q: float) -> float:
    if not 0 <= q <= 100:
        raise ContractError(f"percentile must lie in [0, 100], got {q}")
    return float(np.percentile(_nonempty(errors), q, method=PERCENTILE_METHOD))


# inference


@dataclass
class Predictions:
    """Per-subcarrier estimates for every sample of a dataset."""

    estimates: np.ndarray  # B×N×3, meters
    positions: np.ndarray  # B×3, meters

    @property
    def n_subcarriers(self) -> int:
        return self.estimates.shape[1]

    def errors(self, k: int | None = None) -> np.ndarray:
        """Errors of the estimate after accumulating ``k`` subcarriers (1-based, default N)."""
        k = self.n_subcarriers if k is None else k
        if not 1 <= k <= self.n_subcarriers:
            raise ContractError(f"subcarrier index must lie in 1..{self.n_subcarriers}, got {k}")
        return euclidean_error(self.estimates[:, k - 1, :], self.positions)


def predict_dataset(
    model: CMANet, dataset: Dataset, workers: int = 1, progress: bool = False
) -> Predictions:
    """Run the model over ``dataset`` in fixed-size batches.

    With ``workers > 1`` batches run concurrently; results keep dataset order.
    """
    if len(dataset) == 0:
        raise ContractError("cannot evaluate an empty dataset")
    if dataset.header.shape != (
        model.config.n_base_stations,
        model.config.n_antennas,
        model.config.n_subcarriers,
    ):
        raise DimensionError(
            "predict_dataset",
            dataset.header.shape,
            (model.config.n_base_stations, model.config.n_antennas, model.config.n_subcarriers),
        )
    starts = range(0, len(dataset), PREDICT_BATCH)

    def run(start: int) -> np.ndarray:
        return model.predict(dataset.csi(slice(start, start + PREDICT_BATCH)))

    chunks: list[np.ndarray] = []
    run_ordered(
        run,
        starts,
        lambda _, chunk: chunks.append(chunk),
        workers=workers,
        progress=progress,
        desc="Predicting",
    )
    return Predictions(estimates=np.concatenate(chunks), positions=dataset.positions)


# reports


def error_report(
    errors: np.ndarray,
    variant=None,
    checkpoint_id: str | None = None,
    dataset_checksum: str | None = None,
    config: dict | None = None,
) -> EvalReport:
    cdf_errors, cdf_probabilities = error_cdf(errors)
    return EvalReport(
        variant=variant,
        checkpoint_id=checkpoint_id,
        dataset_checksum=dataset_checksum,
        n_samples=int(errors.size),
        percentile_convention=PERCENTILE_CONVENTION,
        errors_m=errors.tolist(),
        cdf_errors_m=cdf_errors.tolist(),
        cdf_probabilities=cdf_probabilities.tolist(),
        median_m=percentile(errors, 50),
        p90_m=percentile(errors, 90),
        mean_m=float(np.mean(errors)),
        config=config or {},
    )


def centroid_errors(dataset: Dataset) -> np.ndarray:
    """Errors of always answering the centre of the UE box."""
    normalization = dataset.header.normalization()
    centroid = (np.asarray(normalization.box_lower) + np.asarray(normalization.box_upper)) / 2
    positions = dataset.positions
    return euclidean_error(np.broadcast_to(centroid, positions.shape), positions)


def centroid_report(dataset: Dataset) -> EvalReport:
    """Report for the constant box-centroid predictor."""
    report = error_report(centroid_errors(dataset), dataset_checksum=dataset.checksum)
    return report.model_copy(update={"centroid_median_m": report.median_m})


def checkpoint_id(path: str | Path) -> str:
    return f"{Path(path).name}@sha256:{file_checksum(path)}"


def untrained_median(manifest: CheckpointManifest, dataset: Dataset, workers: int = 1) -> float:
    """Median error of a model initialised exactly like the checkpoint's run, before training."""
    rng = np.random.default_rng(manifest.train.seed)
    model = CMANet.initialize(manifest.model, manifest.normalization, rng)
    return percentile(predict_dataset(model, dataset, workers).errors(), 50)


def evaluate_model(
    model: CMANet,
    dataset: Dataset,
    checkpoint: str | None = None,
    manifest: CheckpointManifest | None = None,
    predictions: Predictions | None = None,
    workers: int = 1,
    progress: bool = False,
) -> EvalReport:
    """Final-subcarrier error statistics of ``model`` on ``dataset``.

    The report always carries the centroid-predictor median for comparison.
    """
    predictions = predictions or predict_dataset(model, dataset, workers, progress)
    errors = predictions.errors()
    config = {"model": model.config.model_dump(mode="json")}
    if manifest is not None:
        config["train"] = manifest.train.model_dump(mode="json")
        config["epoch"] = manifest.epoch
    config["normalization"] = model.normalization.model_dump(mode="json")
    report = error_report(
        errors,
        variant=model.config.variant,
        checkpoint_id=checkpoint,
        dataset_checksum=dataset.checksum,
        config=config,
    )
    report = report.model_copy(update={"centroid_median_m": percentile(centroid_errors(dataset), 50)})
    logger.info(
        f"Evaluated {report.n_samples} samples: median {report.median_m:.3f} m, "
        f"p90 {report.p90_m:.3f} m, mean {report.mean_m:.3f} m "
        f"(centroid median {report.centroid_median_m:.3f} m)"
    )
    return report


def write_report(report: EvalReport, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2))


# accumulation curve


def curve_points(n_subcarriers: int, stride: int) -> list[int]:
    """Recorded k values: every ``stride`` subcarriers, always ending at N."""
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    points = list(range(stride, n_subcarriers + 1, stride))
    if not points or points[-1] != n_subcarriers:
        points.append(n_subcarriers)
    return points


def accumulation_curve(
    model: CMANet,
    dataset: Dataset,
    stride: int = 12,
    predictions: Predictions | None = None,
    workers: int = 1,
) -> AccumulationCurve:
    """Mean error of the decoder's running estimate after every ``stride`` subcarriers.

    Reads the intermediate estimates of a single forward pass, so the k=N
    point is the report's mean error.
    """
    predictions = predictions or predict_dataset(model, dataset, workers)
    points = curve_points(predictions.n_subcarriers, stride)
    means = [float(np.mean(predictions.errors(k))) for k in points]

    rho = None
    if len(points) > 1 and np.ptp(means) > 0:
        value = float(spearmanr(points, means).statistic)
        rho = None if math.isnan(value) else value
    ratio = means[-1] / means[0] if means[0] > 0 else math.nan
    logger.info(
        f"Accumulation curve over {len(points)} points: first {means[0]:.3f} m, "
        f"last {means[-1]:.3f} m, spearman {rho}"
    )
    return AccumulationCurve(
        stride=stride,
        subcarriers=points,
        mean_errors_m=means,
        spearman_rho=rho,
        final_to_first_ratio=ratio,
    )


def write_curve(curve: AccumulationCurve, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(f"# stride: {curve.stride}\n")
        f.write(f"# spearman_rho: {curve.spearman_rho}\n")
        f.write(f"# final_to_first_ratio: {curve.final_to_first_ratio}\n")
    frame = pd.DataFrame({"k": curve.subcarriers, "mean_error_m": curve.mean_errors_m})
    frame.to_csv(path, mode="a", index=False)


# hotspot grid


@dataclass
class HotspotGrid:
    """Mean error per horizontal cell; rows follow y, columns follow x."""

    x_edges: np.ndarray
    y_edges: np.ndarray
    mean_error_m: np.ndarray  # ny×nx, NaN where a cell holds no sample
    counts: np.ndarray  # ny×nx

    @property
    def occupancy(self) -> float:
        return float(np.count_nonzero(self.counts) / self.counts.size)

    def weighted_mean(self) -> float:
        filled = self.counts > 0
        return float(np.sum(self.mean_error_m[filled] * self.counts[filled]) / np.sum(self.counts))

    def _frame(self, values: np.ndarray) -> pd.DataFrame:
        x_centres = (self.x_edges[:-1] + self.x_edges[1:]) / 2
        y_centres = (self.y_edges[:-1] + self.y_edges[1:]) / 2
        return pd.DataFrame(
            values,
            index=pd.Index(y_centres, name="y_m/x_m"),
            columns=x_centres,
        )

    def write(self, path: str | Path) -> Path:
        """Write the mean-error matrix to ``path`` and the counts next to it.

        Returns the counts file path.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self._frame(self.mean_error_m).to_csv(path, na_rep="")
        counts_path = path.with_name(f"{path.stem}.counts{path.suffix or '.csv'}")
        self._frame(self.counts.astype(np.int64)).to_csv(counts_path)
        return counts_path


def grid_edges(lower: float, upper: float, cells: int | None, cell_size: float | None) -> np.ndarray:
    if cell_size is not None:
        cells = max(1, math.ceil((upper - lower) / cell_size - 1e-9))
        return lower + cell_size * np.arange(cells + 1)
    if cells is None or cells < 1:
        raise ContractError(f"grid needs a positive cell count, got {cells}")
    return np.linspace(lower, upper, cells + 1)


def hotspot_grid(
    model: CMANet,
    dataset: Dataset,
    cells: int | None = 20,
    cell_size: float | None = None,
    predictions: Predictions | None = None,
    workers: int = 1,
) -> HotspotGrid:
    """Partition the UE box horizontally and average the error of the samples in each cell.

    ``cell_size`` gives square cells of that side in meters; otherwise the box
    is split into ``cells`` × ``cells``.
    """
    predictions = predictions or predict_dataset(model, dataset, workers)
    errors = predictions.errors()
    normalization = dataset.header.normalization()
    (x_lo, y_lo, _), (x_hi, y_hi, _) = normalization.box_lower, normalization.box_upper
    x_edges = grid_edges(x_lo, x_hi, cells, cell_size)
    y_edges = grid_edges(y_lo, y_hi, cells, cell_size)

    # boundary samples land in the outermost cells
    x = np.clip(predictions.positions[:, 0], x_edges[0], x_edges[-1])
    y = np.clip(predictions.positions[:, 1], y_edges[0], y_edges[-1])
    sums, _, _ = np.histogram2d(y, x, bins=[y_edges, x_edges], weights=errors)
    counts, _, _ = np.histogram2d(y, x, bins=[y_edges, x_edges])
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, sums / counts, np.nan)
    grid = HotspotGrid(x_edges=x_edges, y_edges=y_edges, mean_error_m=means, counts=counts)
    logger.info(
        f"Hotspot grid {means.shape[1]}x{means.shape[0]}: {grid.occupancy:.1%} cells occupied, "
        f"worst cell mean {np.nanmax(means):.3f} m"
    )
    return grid
