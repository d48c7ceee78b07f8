"""
Bit-exact persistence for datasets, checkpoints and configuration.

Dataset file (little-endian):

    magic "CSID" | version u16 | reserved u16 | L, M, N u32 | count u64
    | f_c f64 | delta_f f64 | csi_scale f64 | seed u64
    | ue_lower 3×f64 | ue_upper 3×f64 | bs_positions L×3×f64
    | count × (position 3×f64, csi L×M×N×(re, im) f32)

Checkpoint file (little-endian):

    magic "CMCK" | version u16 | reserved u16 | manifest length u64
    | manifest JSON (utf-8) | f64 blobs at the manifest's offsets
"""

import hashlib
import logging
import struct
import tomllib
from collections.abc import Generator, Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import ValidationError

from cmanet.errors import (
    BadMagicError,
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    ShapeInconsistencyError,
    TruncatedFileError,
    VersionMismatchError,
)
from cmanet.model import parameter_shapes
from cmanet.models import CheckpointManifest, Normalization, ParameterEntry, PipelineConfig

DATASET_MAGIC = b"CSID"
DATASET_VERSION = 1
PARTIAL_SUFFIX = ".partial"
CHECKPOINT_MAGIC = b"CMCK"
CHECKPOINT_VERSION = 1
OPTIMIZER_PREFIXES = ("adam.m/", "adam.v/")

CHUNK_SIZE = 1024 * 1024

_DATASET_FIXED = struct.Struct("<4sHHIIIQdddQ6d")
_CHECKPOINT_FIXED = struct.Struct("<4sHHQ")

logger = logging.getLogger(__name__)


class ChunkedBinaryReader:
    """
    Read binary files in chunks.

    Example:
        with ChunkedBinaryReader(filename) as reader:
            for chunk in reader.read_chunks():
                digest.update(chunk)
    """

    def __init__(self, filename: str | Path, chunk_size: int = CHUNK_SIZE):
        self.filename = filename
        self.chunk_size = chunk_size
        self.file = None

    def __enter__(self):
        self.file = open(self.filename, "rb")
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if self.file:
            self.file.close()

    def read_chunks(self) -> Generator[bytes, None, None]:
        if self.file is None:
            raise RuntimeError("File not opened. Use this class with a 'with' statement.")
        while chunk := self.file.read(self.chunk_size):
            yield chunk


def file_checksum(path: str | Path) -> str:
    digest = hashlib.sha256()
    with ChunkedBinaryReader(path) as reader:
        for chunk in reader.read_chunks():
            digest.update(chunk)
    return digest.hexdigest()


# datasets


@dataclass
class DatasetHeader:
    n_base_stations: int
    n_antennas: int
    n_subcarriers: int
    count: int
    carrier_hz: float
    delta_f: float
    csi_scale: float
    seed: int
    ue_lower: tuple[float, float, float]
    ue_upper: tuple[float, float, float]
    bs_positions: np.ndarray = field(repr=False)
    version: int = DATASET_VERSION

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.n_base_stations, self.n_antennas, self.n_subcarriers

    @property
    def record_dtype(self) -> np.dtype:
        return np.dtype([("position", "<f8", (3,)), ("csi", "<f4", (*self.shape, 2))])

    @property
    def header_nbytes(self) -> int:
        return _DATASET_FIXED.size + 8 * 3 * self.n_base_stations

    @property
    def expected_nbytes(self) -> int:
        return self.header_nbytes + self.count * self.record_dtype.itemsize

    def normalization(self) -> Normalization:
        return Normalization(
            csi_scale=self.csi_scale, box_lower=self.ue_lower, box_upper=self.ue_upper
        )

    def pack(self) -> bytes:
        fixed = _DATASET_FIXED.pack(
            DATASET_MAGIC,
            self.version,
            0,
            self.n_base_stations,
            self.n_antennas,
            self.n_subcarriers,
            self.count,
            self.carrier_hz,
            self.delta_f,
            self.csi_scale,
            self.seed,
            *self.ue_lower,
            *self.ue_upper,
        )
        stations = np.asarray(self.bs_positions, dtype="<f8").reshape(self.n_base_stations, 3)
        return fixed + stations.tobytes()

    @classmethod
    def unpack(cls, path: str, data: bytes) -> "DatasetHeader":
        if len(data) < 4:
            raise TruncatedFileError(path, _DATASET_FIXED.size, len(data))
        if data[:4] != DATASET_MAGIC:
            raise BadMagicError(path, DATASET_MAGIC, data[:4])
        if len(data) < _DATASET_FIXED.size:
            raise TruncatedFileError(path, _DATASET_FIXED.size, len(data))

        (_, version, _, n_bs, n_ant, n_sub, count, f_c, delta_f, scale, seed, *box) = (
            _DATASET_FIXED.unpack_from(data)
        )
        if version != DATASET_VERSION:
            raise VersionMismatchError(path, DATASET_VERSION, version)
        if n_bs < 1 or n_ant < 1 or n_sub < 2:
            raise ShapeInconsistencyError(path, f"invalid shape L={n_bs}, M={n_ant}, N={n_sub}")
        if not (delta_f > 0 and scale > 0 and np.isfinite(scale)):
            raise ShapeInconsistencyError(path, f"invalid delta_f={delta_f} or csi_scale={scale}")

        stations_end = _DATASET_FIXED.size + 8 * 3 * n_bs
        if len(data) < stations_end:
            raise TruncatedFileError(path, stations_end, len(data))
        stations = np.frombuffer(data, dtype="<f8", count=3 * n_bs, offset=_DATASET_FIXED.size)

        return cls(
            n_base_stations=n_bs,
            n_antennas=n_ant,
            n_subcarriers=n_sub,
            count=count,
            carrier_hz=f_c,
            delta_f=delta_f,
            csi_scale=scale,
            seed=seed,
            ue_lower=tuple(box[:3]),
            ue_upper=tuple(box[3:]),
            bs_positions=stations.reshape(n_bs, 3).astype(np.float64),
            version=version,
        )


class DatasetWriter:
    """
    Stream records into a dataset file.

    The header is written first with a placeholder scale and rewritten on a
    clean exit, once the RMS of all stored CSI entries is known. Passing
    ``csi_scale`` pins the scale instead.

    Records go to ``<filename>.partial``, renamed to ``filename`` only after a
    clean exit; on any error the partial file is removed.

    Example:
        with DatasetWriter(path, header) as writer:
            writer.append(position, csi)
    """

    def __init__(self, filename: str | Path, header: DatasetHeader, csi_scale: float | None = None):
        self.filename = Path(filename)
        self.partial = self.filename.with_name(self.filename.name + PARTIAL_SUFFIX)
        self.header = header
        self.csi_scale = csi_scale
        self.file = None
        self.written = 0
        self._sum_squares = 0.0

    def __enter__(self):
        self.filename.parent.mkdir(parents=True, exist_ok=True)
        self.file = open(self.partial, "wb")
        self.file.write(self.header.pack())
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if self.file is None:
            return
        complete = False
        try:
            if exc_type is None:
                if self.written != self.header.count:
                    raise ContractError(
                        f"{self.filename}: header declares {self.header.count} records, "
                        f"{self.written} were written"
                    )
                self.header = replace(self.header, csi_scale=self._final_scale())
                self.file.seek(0)
                self.file.write(self.header.pack())
                complete = True
        finally:
            self.file.close()
            self.file = None
            if complete:
                self.partial.replace(self.filename)
            else:
                self.partial.unlink(missing_ok=True)

    def _final_scale(self) -> float:
        if self.csi_scale is not None:
            return self.csi_scale
        entries = self.written * int(np.prod(self.header.shape))
        rms = float(np.sqrt(self._sum_squares / entries)) if entries else 0.0
        return rms if rms > 0 and np.isfinite(rms) else 1.0

    def append(self, position: np.ndarray, csi: np.ndarray) -> None:
        if self.file is None:
            raise RuntimeError("File not opened. Use this class with a 'with' statement.")
        if csi.shape != self.header.shape:
            raise DimensionError("DatasetWriter.append", self.header.shape, csi.shape)
        record = np.zeros(1, dtype=self.header.record_dtype)
        record["position"][0] = position
        record["csi"][0, ..., 0] = csi.real
        record["csi"][0, ..., 1] = csi.imag
        stored = record["csi"].astype(np.float64)
        self._sum_squares += float(np.sum(stored * stored))
        self.file.write(record.tobytes())
        self.written += 1


@dataclass
class Dataset:
    """Records of a dataset file: true positions (meters) and CSI tensors."""

    header: DatasetHeader
    records: np.ndarray
    checksum: str | None = None
    path: Path | None = None

    def __len__(self) -> int:
        return self.records.shape[0]

    @property
    def positions(self) -> np.ndarray:
        return np.asarray(self.records["position"], dtype=np.float64)

    def csi(self, indices: Any = slice(None)) -> np.ndarray:
        """Complex128 CSI of the selected records, shape B×L×M×N."""
        raw = np.asarray(self.records["csi"][indices], dtype=np.float64)
        return raw[..., 0] + 1j * raw[..., 1]

    def subset(self, indices: Any) -> "Dataset":
        records = self.records[indices]
        header = replace(self.header, count=records.shape[0])
        return Dataset(header=header, records=records, checksum=self.checksum, path=self.path)


def read_dataset(path: str | Path, mmap: bool = True) -> Dataset:
    """Open a dataset file after validating magic, version and byte length."""
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as f:
        head = f.read(_DATASET_FIXED.size)
        if len(head) >= _DATASET_FIXED.size:
            n_bs = _DATASET_FIXED.unpack_from(head)[3] if head[:4] == DATASET_MAGIC else 0
            head += f.read(8 * 3 * n_bs)
    header = DatasetHeader.unpack(str(path), head)

    expected = header.expected_nbytes
    if size < expected:
        raise TruncatedFileError(str(path), expected, size)
    if size > expected:
        raise ShapeInconsistencyError(
            str(path), f"{size - expected} trailing bytes beyond {header.count} records"
        )

    if header.count == 0:
        records = np.zeros(0, dtype=header.record_dtype)
    elif mmap:
        records = np.memmap(
            path, dtype=header.record_dtype, mode="r", offset=header.header_nbytes, shape=(header.count,)
        )
    else:
        records = np.fromfile(path, dtype=header.record_dtype, count=header.count, offset=header.header_nbytes)

    logger.debug(f"Opened dataset {path}: {header.count} records of shape {header.shape}")
    return Dataset(header=header, records=records, checksum=file_checksum(path), path=path)


def write_dataset(path: str | Path, dataset: Dataset) -> DatasetHeader:
    """Rewrite a dataset; the stored scale is kept as is."""
    header = replace(dataset.header, count=len(dataset))
    with DatasetWriter(path, header, csi_scale=header.csi_scale) as writer:
        positions = dataset.positions
        for i in range(len(dataset)):
            writer.append(positions[i], dataset.csi(i))
    return writer.header


# checkpoints


@dataclass
class Checkpoint:
    manifest: CheckpointManifest
    arrays: dict[str, np.ndarray]

    def parameters(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if not k.startswith(OPTIMIZER_PREFIXES)}

    def optimizer_moments(self) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
        first = {k.removeprefix("adam.m/"): v for k, v in self.arrays.items() if k.startswith("adam.m/")}
        second = {k.removeprefix("adam.v/"): v for k, v in self.arrays.items() if k.startswith("adam.v/")}
        return first, second


def rng_state(rng: np.random.Generator) -> dict[str, Any]:
    """JSON-safe snapshot of a PCG64 generator (128-bit integers as strings)."""
    state = rng.bit_generator.state
    return {
        "bit_generator": state["bit_generator"],
        "state": str(state["state"]["state"]),
        "inc": str(state["state"]["inc"]),
        "has_uint32": int(state["has_uint32"]),
        "uinteger": int(state["uinteger"]),
    }


def restore_rng(snapshot: Mapping[str, Any]) -> np.random.Generator:
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = {
        "bit_generator": snapshot["bit_generator"],
        "state": {"state": int(snapshot["state"]), "inc": int(snapshot["inc"])},
        "has_uint32": snapshot["has_uint32"],
        "uinteger": snapshot["uinteger"],
    }
    return rng


def write_checkpoint(
    path: str | Path, manifest: CheckpointManifest, arrays: Mapping[str, np.ndarray]
) -> CheckpointManifest:
    """Write ``arrays`` (parameters first, then optimizer moments) as f64 blobs.

    The manifest's ``parameters`` list is rebuilt from ``arrays``.
    """
    entries, blobs, offset = [], [], 0
    for name, array in arrays.items():
        blob = np.ascontiguousarray(array, dtype="<f8").tobytes()
        entries.append(ParameterEntry(name=name, shape=list(np.shape(array)), offset=offset, nbytes=len(blob)))
        blobs.append(blob)
        offset += len(blob)
    manifest = manifest.model_copy(update={"parameters": entries})
    raw = manifest.model_dump_json().encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_CHECKPOINT_FIXED.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, 0, len(raw)))
        f.write(raw)
        for blob in blobs:
            f.write(blob)
    logger.debug(f"Wrote checkpoint {path} ({len(entries)} arrays, epoch {manifest.epoch})")
    return manifest


def _validate_entries(path: str, manifest: CheckpointManifest, blob_nbytes: int) -> None:
    seen: set[str] = set()
    end = 0
    for entry in sorted(manifest.parameters, key=lambda e: e.offset):
        if entry.name in seen:
            raise ShapeInconsistencyError(path, f"array '{entry.name}' appears twice")
        seen.add(entry.name)
        if entry.nbytes != 8 * int(np.prod(entry.shape, dtype=np.int64)):
            raise ShapeInconsistencyError(path, f"array '{entry.name}' size does not match its shape")
        if entry.offset < end:
            raise ShapeInconsistencyError(path, f"array '{entry.name}' overlaps its predecessor")
        end = entry.offset + entry.nbytes
    if end > blob_nbytes:
        raise TruncatedFileError(path, end, blob_nbytes)
    if end < blob_nbytes:
        raise ShapeInconsistencyError(path, f"{blob_nbytes - end} unreferenced trailing bytes")

    if manifest.model.is_bound:
        expected = parameter_shapes(manifest.model)
        params = {e.name: tuple(e.shape) for e in manifest.parameters if not e.name.startswith(OPTIMIZER_PREFIXES)}
        if params != expected:
            raise ShapeInconsistencyError(path, "parameter set or shapes do not match the model config")


def read_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    data = path.read_bytes()
    if len(data) >= 4 and data[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(str(path), CHECKPOINT_MAGIC, data[:4])
    if len(data) < _CHECKPOINT_FIXED.size:
        raise TruncatedFileError(str(path), _CHECKPOINT_FIXED.size, len(data))
    _, version, _, manifest_len = _CHECKPOINT_FIXED.unpack_from(data)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(str(path), CHECKPOINT_VERSION, version)

    blob_start = _CHECKPOINT_FIXED.size + manifest_len
    if len(data) < blob_start:
        raise TruncatedFileError(str(path), blob_start, len(data))
    try:
        manifest = CheckpointManifest.model_validate_json(data[_CHECKPOINT_FIXED.size : blob_start])
    except ValidationError as e:
        raise FormatError(str(path), f"unreadable manifest ({e.error_count()} errors)") from e

    _validate_entries(str(path), manifest, len(data) - blob_start)
    arrays = {
        entry.name: np.frombuffer(data, dtype="<f8", count=entry.nbytes // 8, offset=blob_start + entry.offset)
        .reshape(entry.shape)
        .astype(np.float64)
        for entry in manifest.parameters
    }
    return Checkpoint(manifest=manifest, arrays=arrays)


# configuration


def read_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    return validate_config(raw, str(path))


def validate_config(raw: Mapping[str, Any], source: str) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        raise ConfigError(f"{source}: {location}: {first['msg']}") from e


def describe_file(path: str | Path) -> dict[str, Any]:
    """Header summary of a dataset or checkpoint file, dispatched on its magic."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == DATASET_MAGIC:
        header = read_dataset(path).header
        return {
            "kind": "dataset",
            "version": header.version,
            "shape": list(header.shape),
            "count": header.count,
            "carrier_hz": header.carrier_hz,
            "delta_f": header.delta_f,
            "csi_scale": header.csi_scale,
            "seed": header.seed,
            "ue_lower": list(header.ue_lower),
            "ue_upper": list(header.ue_upper),
            "bs_positions": header.bs_positions.tolist(),
            "sha256": file_checksum(path),
        }
    if magic == CHECKPOINT_MAGIC:
        manifest = read_checkpoint(path).manifest
        return {"kind": "checkpoint", **manifest.model_dump(mode="json", exclude={"rng_state"})}
    raise BadMagicError(str(path), DATASET_MAGIC + b"|" + CHECKPOINT_MAGIC, magic)
