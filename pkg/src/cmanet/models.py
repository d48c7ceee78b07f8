from enum import StrEnum
from typing import Any, Self

from pydantic import BaseModel, ConfigDict, Field, model_validator

Vec3 = tuple[float, float, float]


class Variant(StrEnum):
    CMA = "cma"
    PLAIN = "plain"


class DataMode(StrEnum):
    FIXED = "fixed-dataset"
    FRESH = "fresh-per-epoch"


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


# configuration


class BaseStationSpec(StrictModel):
    position: Vec3
    # azimuth of the array boresight in radians, None faces the UE box centre
    yaw: float | None = None


class UeVolume(StrictModel):
    x_range: tuple[float, float] = (0.0, 220.0)
    y_range: tuple[float, float] = (0.0, 300.0)
    height_range: tuple[float, float] = (0.0, 30.0)

    @model_validator(mode="after")
    def non_degenerate(self) -> Self:
        for name in ("x_range", "y_range", "height_range"):
            lo, hi = getattr(self, name)
            if not hi > lo:
                raise ValueError(f"{name} must satisfy low < high, got ({lo}, {hi})")
        return self

    @property
    def lower(self) -> Vec3:
        return (self.x_range[0], self.y_range[0], self.height_range[0])

    @property
    def upper(self) -> Vec3:
        return (self.x_range[1], self.y_range[1], self.height_range[1])


class SceneConfig(StrictModel):
    n_base_stations: int = Field(default=6, ge=1)
    base_stations: list[BaseStationSpec] | None = None
    bs_height: float = 25.0
    ue_volume: UeVolume = UeVolume()

    @model_validator(mode="after")
    def stations_match_count(self) -> Self:
        if self.base_stations is not None:
            if not self.base_stations:
                raise ValueError("base_stations must not be empty")
            self.n_base_stations = len(self.base_stations)
        return self


class ArraySpec(StrictModel):
    rows: int = Field(default=2, ge=1)
    cols: int = Field(default=4, ge=1)
    spacing_wavelengths: float = Field(default=0.5, gt=0)

    @property
    def n_antennas(self) -> int:
        return self.rows * self.cols


class OfdmConfig(StrictModel):
    carrier_hz: float = Field(default=3.5e9, gt=0)
    bandwidth_hz: float = Field(default=20e6, gt=0)
    n_subcarriers: int = Field(default=288, ge=2)
    # None spreads the subcarriers over the bandwidth: bandwidth / N
    subcarrier_spacing_hz: float | None = Field(default=None, gt=0)

    @property
    def delta_f(self) -> float:
        if self.subcarrier_spacing_hz is not None:
            return self.subcarrier_spacing_hz
        return self.bandwidth_hz / self.n_subcarriers


class PathsConfig(StrictModel):
    n_paths: int = Field(default=6, ge=1)
    los_enabled: bool = True
    reflection_range: tuple[float, float] = (0.1, 0.6)
    scatter_margin_m: float = Field(default=50.0, ge=0)

    @model_validator(mode="after")
    def reflection_in_unit_interval(self) -> Self:
        lo, hi = self.reflection_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"reflection_range must lie in (0, 1], got ({lo}, {hi})")
        return self


class ModelConfig(StrictModel):
    # filled from the dataset header by bind()
    n_base_stations: int | None = Field(default=None, ge=1)
    n_antennas: int | None = Field(default=None, ge=1)
    n_subcarriers: int | None = Field(default=None, ge=1)
    d_k: int | None = Field(default=None, ge=1)
    lstm_hidden: int = Field(default=64, ge=1)
    mlp_hidden: int = Field(default=64, ge=1)
    variant: Variant = Variant.CMA

    def bind(self, n_base_stations: int, n_antennas: int, n_subcarriers: int) -> "ModelConfig":
        """Return a copy matched to a dataset shape with ``d_k`` resolved."""
        for name, value in (
            ("n_base_stations", n_base_stations),
            ("n_antennas", n_antennas),
            ("n_subcarriers", n_subcarriers),
        ):
            declared = getattr(self, name)
            if declared is not None and declared != value:
                raise ValueError(f"model {name}={declared} but the data has {value}")
        d_k = self.d_k if self.d_k is not None else min(2 * n_antennas * n_subcarriers, 128)
        return self.model_copy(
            update={
                "n_base_stations": n_base_stations,
                "n_antennas": n_antennas,
                "n_subcarriers": n_subcarriers,
                "d_k": d_k,
            }
        )

    @property
    def is_bound(self) -> bool:
        return None not in (self.n_base_stations, self.n_antennas, self.n_subcarriers, self.d_k)


class TrainConfig(StrictModel):
    epochs: int = Field(default=140, ge=1)
    samples_per_epoch: int = Field(default=10_000, ge=1)
    val_every: int = Field(default=20, ge=1)
    val_samples: int = Field(default=1_000, ge=1)
    val_fraction: float = Field(default=0.2, ge=0, lt=1)
    batch_size: int = Field(default=32, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0)
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(default=1e-8, gt=0)
    clip_norm: float | None = Field(default=5.0, gt=0)
    data_mode: DataMode = DataMode.FIXED
    workers: int = Field(default=1, ge=1)
    seed: int = Field(default=0, ge=0)


class EvalConfig(StrictModel):
    test_samples: int = Field(default=20_000, ge=1)
    stride: int = Field(default=12, ge=1)
    grid: int = Field(default=20, ge=1)
    cell_size: float | None = Field(default=None, gt=0)


class PipelineConfig(StrictModel):
    seed: int = Field(default=0, ge=0)
    scene: SceneConfig = SceneConfig()
    array: ArraySpec = ArraySpec()
    ofdm: OfdmConfig = OfdmConfig()
    paths: PathsConfig = PathsConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()


# persisted metadata


class Normalization(StrictModel):
    """How raw CSI and positions map to the network's input and output scale."""

    csi_scale: float = Field(gt=0)
    box_lower: Vec3
    box_upper: Vec3


class ParameterEntry(StrictModel):
    name: str
    shape: list[int]
    offset: int
    nbytes: int


class CheckpointManifest(StrictModel):
    format_version: int
    epoch: int
    model: ModelConfig
    train: TrainConfig
    normalization: Normalization
    parameters: list[ParameterEntry]
    optimizer_step: int = 0
    rng_state: dict[str, Any] | None = None
    dataset_checksum: str | None = None


# reports


class MetricsRecord(StrictModel):
    epoch: int
    train_loss: float
    # None on epochs without a validation round
    val_median_m: float | None = None
    val_p90_m: float | None = None
    val_mean_m: float | None = None


class EvalReport(StrictModel):
    variant: Variant | None
    checkpoint_id: str | None
    dataset_checksum: str | None
    n_samples: int
    percentile_convention: str = "linear interpolation between closest ranks (inclusive)"
    errors_m: list[float]
    cdf_errors_m: list[float]
    cdf_probabilities: list[float]
    median_m: float
    p90_m: float
    mean_m: float
    centroid_median_m: float | None = None
    untrained_median_m: float | None = None
    config: dict[str, Any] = {}


class AccumulationCurve(StrictModel):
    stride: int
    subcarriers: list[int]
    mean_errors_m: list[float]
    spearman_rho: float | None
    final_to_first_ratio: float


class AblationReport(StrictModel):
    cma: EvalReport
    plain: EvalReport
    centroid_median_m: float
    median_delta_m: float
    p90_delta_m: float
    mean_delta_m: float
    cma_better: bool
