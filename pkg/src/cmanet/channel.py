"""
Parametric multipath channel for L cooperating base stations.

Each UE/BS pair gets one line-of-sight path (optional) plus single-bounce
paths through random scatterers. Path amplitudes follow the free-space Friis
law, phases follow the path delay at every subcarrier, and the receive array
contributes a per-element geometric phase.
"""

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cmanet.dataio import DatasetHeader, DatasetWriter
from cmanet.errors import ContractError
from cmanet.models import ArraySpec, BaseStationSpec, PipelineConfig, SceneConfig
from cmanet.parallel import run_ordered

SPEED_OF_LIGHT = 299_792_458.0
UNIT_TOLERANCE = 1e-9
MIN_SEGMENT_M = 1e-6

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Scene:
    """Immutable simulation geometry, shareable across threads."""

    bs_positions: np.ndarray  # L×3, meters
    element_offsets: np.ndarray  # L×M×3, meters, relative to each array origin
    ue_lower: np.ndarray  # 3
    ue_upper: np.ndarray  # 3
    carrier_hz: float
    delta_f: float
    n_subcarriers: int
    n_paths: int
    los_enabled: bool
    reflection_range: tuple[float, float]
    scatter_margin_m: float
    seed: int = 0

    def __post_init__(self):
        if self.bs_positions.ndim != 2 or self.bs_positions.shape[1] != 3:
            raise ContractError(f"bs_positions must be L×3, got {self.bs_positions.shape}")
        if self.n_base_stations < 1 or self.n_subcarriers < 2 or self.n_paths < 1:
            raise ContractError("scene needs L >= 1, N >= 2 and P >= 1")
        if self.delta_f <= 0:
            raise ContractError(f"subcarrier spacing must be positive, got {self.delta_f}")
        if not np.all(self.ue_upper > self.ue_lower):
            raise ContractError("UE volume is degenerate")

    @property
    def n_base_stations(self) -> int:
        return self.bs_positions.shape[0]

    @property
    def n_antennas(self) -> int:
        return self.element_offsets.shape[1]

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_hz

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.n_base_stations, self.n_antennas, self.n_subcarriers

    def frequencies(self) -> np.ndarray:
        return subcarrier_frequencies(self.carrier_hz, self.delta_f, self.n_subcarriers)

    def contains(self, point: np.ndarray) -> bool:
        return bool(np.all(point >= self.ue_lower) and np.all(point <= self.ue_upper))

    def scatter_box(self) -> tuple[np.ndarray, np.ndarray]:
        margin = np.array([self.scatter_margin_m, self.scatter_margin_m, 0.0])
        return self.ue_lower - margin, self.ue_upper + margin

    @classmethod
    def from_config(cls, config: PipelineConfig) -> "Scene":
        volume = config.scene.ue_volume
        lower = np.array(volume.lower, dtype=np.float64)
        upper = np.array(volume.upper, dtype=np.float64)
        stations = config.scene.base_stations or default_bs_layout(config.scene)

        wavelength = SPEED_OF_LIGHT / config.ofdm.carrier_hz
        centre = 0.5 * (lower + upper)
        positions = np.array([s.position for s in stations], dtype=np.float64)
        offsets = np.stack(
            [
                upa_offsets(
                    config.array,
                    wavelength,
                    s.yaw if s.yaw is not None else _facing(positions[i], centre),
                )
                for i, s in enumerate(stations)
            ]
        )
        return cls(
            bs_positions=positions,
            element_offsets=offsets,
            ue_lower=lower,
            ue_upper=upper,
            carrier_hz=config.ofdm.carrier_hz,
            delta_f=config.ofdm.delta_f,
            n_subcarriers=config.ofdm.n_subcarriers,
            n_paths=config.paths.n_paths,
            los_enabled=config.paths.los_enabled,
            reflection_range=config.paths.reflection_range,
            scatter_margin_m=config.paths.scatter_margin_m,
            seed=config.seed,
        )


@dataclass(frozen=True)
class PathSet:
    gains: np.ndarray  # P, unitless amplitude
    delays: np.ndarray  # P, seconds
    directions: np.ndarray  # P×3, unit vectors from the array toward the arrival

    @property
    def n_paths(self) -> int:
        return self.gains.shape[0]


def _facing(position: np.ndarray, target: np.ndarray) -> float:
    return float(np.arctan2(target[1] - position[1], target[0] - position[0]))


def default_bs_layout(scene: SceneConfig) -> list[BaseStationSpec]:
    """Spread ``n_base_stations`` evenly on a circle around the UE box centre."""
    volume = scene.ue_volume
    cx = 0.5 * (volume.x_range[0] + volume.x_range[1])
    cy = 0.5 * (volume.y_range[0] + volume.y_range[1])
    radius = 0.3 * max(
        volume.x_range[1] - volume.x_range[0], volume.y_range[1] - volume.y_range[0]
    )
    stations = []
    for i in range(scene.n_base_stations):
        angle = 2.0 * np.pi * i / scene.n_base_stations + np.pi / 4.0
        stations.append(
            BaseStationSpec(
                position=(
                    cx + radius * float(np.cos(angle)),
                    cy + radius * float(np.sin(angle)),
                    scene.bs_height,
                )
            )
        )
    return stations


def upa_offsets(array: ArraySpec, wavelength: float, yaw: float) -> np.ndarray:
    """Element positions (M×3) of a vertical planar array facing azimuth ``yaw``.

    Rows stack along z, columns run horizontally across the boresight.
    Element m = row * cols + col; element 0 sits at the array origin.
    """
    d = array.spacing_wavelengths * wavelength
    across = np.array([-np.sin(yaw), np.cos(yaw), 0.0])
    up = np.array([0.0, 0.0, 1.0])
    rows, cols = np.meshgrid(np.arange(array.rows), np.arange(array.cols), indexing="ij")
    return (
        cols.reshape(-1, 1) * d * across[None, :] + rows.reshape(-1, 1) * d * up[None, :]
    )


def subcarrier_frequencies(carrier_hz: float, delta_f: float, n_subcarriers: int) -> np.ndarray:
    """f_k = f_c + (k - N/2) * delta_f for k = 1..N (stored at index k - 1)."""
    if n_subcarriers < 2:
        raise ContractError(f"need at least 2 subcarriers, got {n_subcarriers}")
    k = np.arange(1, n_subcarriers + 1, dtype=np.float64)
    return carrier_hz + (k - n_subcarriers / 2.0) * delta_f


def steering_vector(
    element_offsets: np.ndarray, direction: np.ndarray, wavelength: float
) -> np.ndarray:
    """exp(-j 2π <offset_m, direction> / λ) for every element."""
    direction = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(direction)
    if norm == 0.0:
        raise ContractError("steering_vector: zero direction")
    if abs(norm - 1.0) > UNIT_TOLERANCE:
        raise ContractError(f"steering_vector: direction norm is {norm}, expected 1")
    projection = np.asarray(element_offsets, dtype=np.float64) @ direction
    return np.exp(-2j * np.pi * (projection / wavelength))


def sample_ue(scene: Scene, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(scene.ue_lower, scene.ue_upper)


def generate_paths(
    scene: Scene, ue: np.ndarray, bs_index: int, rng: np.random.Generator
) -> PathSet:
    """Draw the propagation paths between ``ue`` and base station ``bs_index``.

    With LOS enabled the set holds the direct path plus P - 1 single-bounce
    paths; without LOS all P paths are single-bounce.
    """
    ue = np.asarray(ue, dtype=np.float64)
    if not scene.contains(ue):
        raise ContractError(f"UE position {ue.tolist()} is outside the UE volume")

    bs = scene.bs_positions[bs_index]
    wavelength = scene.wavelength
    gains, lengths, directions = [], [], []

    if scene.los_enabled:
        offset = ue - bs
        distance = float(np.linalg.norm(offset))
        if distance < MIN_SEGMENT_M:
            raise ContractError(f"UE coincides with base station {bs_index}")
        gains.append(wavelength / (4.0 * np.pi * distance))
        lengths.append(distance)
        directions.append(offset / distance)

    n_scattered = scene.n_paths - 1 if scene.los_enabled else scene.n_paths
    lower, upper = scene.scatter_box()
    lo_rho, hi_rho = scene.reflection_range
    for _ in range(n_scattered):
        while True:
            scatterer = rng.uniform(lower, upper)
            rho = rng.uniform(lo_rho, hi_rho)
            to_bs = float(np.linalg.norm(scatterer - bs))
            to_ue = float(np.linalg.norm(ue - scatterer))
            if to_bs >= MIN_SEGMENT_M and to_ue >= MIN_SEGMENT_M:
                break
        total = to_ue + to_bs
        gains.append(wavelength / (4.0 * np.pi * total) * rho)
        lengths.append(total)
        directions.append((scatterer - bs) / to_bs)

    return PathSet(
        gains=np.array(gains),
        delays=np.array(lengths) / SPEED_OF_LIGHT,
        directions=np.array(directions),
    )


def synthesize_csi(scene: Scene, paths: Sequence[PathSet]) -> np.ndarray:
    """Frequency response H (L×M×N complex) for one UE.

    H[l, m, k] = Σ_p a_p exp(-j2π f_k τ_p) · steering(offsets_l, dir_p, c / f_k)[m]
    """
    if len(paths) != scene.n_base_stations:
        raise ContractError(
            f"need path sets for {scene.n_base_stations} base stations, got {len(paths)}"
        )
    freqs = scene.frequencies()
    wavelengths = SPEED_OF_LIGHT / freqs
    csi = np.empty(scene.shape, dtype=np.complex128)
    for l, path_set in enumerate(paths):
        delay = np.exp(-2j * np.pi * (freqs[None, :] * path_set.delays[:, None]))
        projection = scene.element_offsets[l] @ path_set.directions.T  # M×P
        steering = np.exp(-2j * np.pi * (projection[:, :, None] / wavelengths[None, None, :]))
        csi[l] = np.einsum("p,pn,mpn->mn", path_set.gains, delay, steering)
    return csi


def sample_rng(seed: int, index: int, stream: Sequence[int] = ()) -> np.random.Generator:
    """Independent generator for sample ``index``, so generation order never matters.

    ``stream`` separates draws that share a seed, such as per-epoch training
    topologies and validation rounds.
    """
    return np.random.default_rng([seed, *stream, index])


def simulate_sample(
    scene: Scene, seed: int, index: int, stream: Sequence[int] = ()
) -> tuple[np.ndarray, np.ndarray]:
    """One topology: (true UE position in meters, CSI tensor)."""
    rng = sample_rng(seed, index, stream)
    ue = sample_ue(scene, rng)
    paths = [generate_paths(scene, ue, l, rng) for l in range(scene.n_base_stations)]
    return ue, synthesize_csi(scene, paths)


Sink = Callable[[int, np.ndarray, np.ndarray], None]


def simulate_indices(
    scene: Scene,
    seed: int,
    indices: Sequence[int],
    sink: Sink,
    workers: int = 1,
    progress: bool = False,
    stream: Sequence[int] = (),
) -> None:
    if len(indices) < 1:
        raise ContractError("sample count must be >= 1, got 0")
    stream = tuple(stream)
    run_ordered(
        lambda index: simulate_sample(scene, seed, index, stream),
        indices,
        lambda index, sample: sink(index, *sample),
        workers=workers,
        progress=progress,
        desc="Simulating topologies",
    )


def simulate_many(
    scene: Scene,
    seed: int,
    count: int,
    sink: Sink,
    workers: int = 1,
    progress: bool = False,
    stream: Sequence[int] = (),
) -> None:
    if count < 1:
        raise ContractError(f"sample count must be >= 1, got {count}")
    simulate_indices(scene, seed, range(count), sink, workers, progress, stream)


def simulate_batch(
    scene: Scene,
    seed: int,
    indices: Sequence[int],
    stream: Sequence[int] = (),
    workers: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Simulate ``indices`` into stacked (B×3 positions, B×L×M×N CSI) arrays."""
    positions = np.empty((len(indices), 3))
    csi = np.empty((len(indices), *scene.shape), dtype=np.complex128)
    slots = {index: slot for slot, index in enumerate(indices)}

    def store(index: int, position: np.ndarray, h: np.ndarray) -> None:
        positions[slots[index]] = position
        csi[slots[index]] = h

    simulate_indices(scene, seed, indices, store, workers=workers, stream=stream)
    return positions, csi


def dataset_header(scene: Scene, count: int, seed: int) -> DatasetHeader:
    """Header for a dataset of this scene; ``csi_scale`` is filled in by the writer."""
    return DatasetHeader(
        n_base_stations=scene.n_base_stations,
        n_antennas=scene.n_antennas,
        n_subcarriers=scene.n_subcarriers,
        count=count,
        carrier_hz=scene.carrier_hz,
        delta_f=scene.delta_f,
        csi_scale=1.0,
        seed=seed,
        ue_lower=tuple(scene.ue_lower.tolist()),
        ue_upper=tuple(scene.ue_upper.tolist()),
        bs_positions=scene.bs_positions.copy(),
    )


def build_dataset(
    scene: Scene,
    count: int,
    seed: int,
    path: str | Path,
    workers: int = 1,
    progress: bool = False,
) -> DatasetHeader:
    """Simulate ``count`` topologies and write them in the dataset format.

    Returns the header of the written file.
    """
    if count < 1:
        raise ContractError(f"sample count must be >= 1, got {count}")
    logger.info(
        f"Generating {count} samples (L={scene.n_base_stations}, M={scene.n_antennas}, "
        f"N={scene.n_subcarriers}, P={scene.n_paths}) with seed {seed} into {path}"
    )
    with DatasetWriter(path, dataset_header(scene, count, seed)) as writer:
        simulate_many(
            scene,
            seed,
            count,
            lambda _, position, csi: writer.append(position, csi),
            workers=workers,
            progress=progress,
        )
    logger.info(f"Dataset written: {path} (csi_scale={writer.header.csi_scale:.6e})")
    return writer.header
