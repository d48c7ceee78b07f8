from pathlib import Path

import numpy as np
import pytest

from cmanet.channel import build_dataset, simulate_sample
from cmanet.dataio import (
    CHECKPOINT_VERSION,
    PARTIAL_SUFFIX,
    DatasetWriter,
    describe_file,
    file_checksum,
    read_checkpoint,
    read_config,
    read_dataset,
    restore_rng,
    rng_state,
    write_checkpoint,
    write_dataset,
)
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
from cmanet.model import CMANet, ModelParams
from cmanet.models import CheckpointManifest, TrainConfig

CONFIG_DIR = Path(__file__).parents[1] / "configs"


@pytest.fixture
def model(dataset, config):
    model_config = config.model.bind(*dataset.header.shape)
    return CMANet.initialize(model_config, dataset.header.normalization(), np.random.default_rng(0))


@pytest.fixture
def checkpoint_path(tmp_path, model):
    manifest = CheckpointManifest(
        format_version=CHECKPOINT_VERSION,
        epoch=3,
        model=model.config,
        train=TrainConfig(),
        normalization=model.normalization,
        parameters=[],
    )
    path = tmp_path / "model.cmck"
    write_checkpoint(path, manifest, model.params.arrays())
    return path


def rewrite(path: Path, data: bytes) -> Path:
    path.write_bytes(data)
    return path


class TestDataset:
    def test_header_matches_the_scene(self, dataset, scene):
        header = dataset.header
        assert header.shape == scene.shape
        assert header.count == len(dataset) == 24
        assert header.seed == 3
        np.testing.assert_array_equal(header.bs_positions, scene.bs_positions)

    def test_scale_is_the_rms_of_stored_entries(self, dataset):
        rms = np.sqrt(np.mean(np.abs(dataset.csi()) ** 2))
        assert dataset.header.csi_scale == pytest.approx(rms, rel=1e-9)

    def test_records_are_single_precision(self, dataset, scene):
        position, csi = simulate_sample(scene, 3, 0)
        np.testing.assert_array_equal(dataset.positions[0], position)
        np.testing.assert_array_equal(dataset.csi(0), csi.astype(np.complex64))

    def test_rewrite_keeps_the_scale(self, tmp_path, dataset):
        subset = dataset.subset(slice(0, 5))
        header = write_dataset(tmp_path / "subset.bin", subset)
        again = read_dataset(tmp_path / "subset.bin")
        assert header.csi_scale == again.header.csi_scale == dataset.header.csi_scale
        assert len(again) == 5
        np.testing.assert_array_equal(again.csi(), dataset.csi(slice(0, 5)))

    def test_bad_magic(self, tmp_path, dataset_path):
        data = dataset_path.read_bytes()
        with pytest.raises(BadMagicError):
            read_dataset(rewrite(tmp_path / "bad.bin", b"XXXX" + data[4:]))

    def test_version_mismatch(self, tmp_path, dataset_path):
        data = bytearray(dataset_path.read_bytes())
        data[4:6] = (2).to_bytes(2, "little")
        with pytest.raises(VersionMismatchError) as info:
            read_dataset(rewrite(tmp_path / "v2.bin", bytes(data)))
        assert info.value.found == 2

    def test_truncated(self, tmp_path, dataset_path):
        data = dataset_path.read_bytes()
        with pytest.raises(TruncatedFileError):
            read_dataset(rewrite(tmp_path / "short.bin", data[:-10]))
        with pytest.raises(TruncatedFileError):
            read_dataset(rewrite(tmp_path / "stub.bin", data[:20]))

    def test_trailing_bytes(self, tmp_path, dataset_path):
        with pytest.raises(ShapeInconsistencyError):
            read_dataset(rewrite(tmp_path / "long.bin", dataset_path.read_bytes() + b"\0" * 8))

    def test_writer_checks_the_declared_count(self, tmp_path, dataset):
        with pytest.raises(ContractError):
            with DatasetWriter(tmp_path / "out" / "partial.bin", dataset.header) as writer:
                writer.append(dataset.positions[0], dataset.csi(0))
        assert list((tmp_path / "out").iterdir()) == []

    def test_failed_write_leaves_no_file(self, tmp_path, dataset):
        path = tmp_path / "out" / "interrupted.bin"
        with pytest.raises(RuntimeError, match="simulation died"):
            with DatasetWriter(path, dataset.header) as writer:
                writer.append(dataset.positions[0], dataset.csi(0))
                assert path.with_name(path.name + PARTIAL_SUFFIX).exists()
                raise RuntimeError("simulation died")
        assert list(path.parent.iterdir()) == []

    def test_failed_rewrite_keeps_the_previous_file(self, tmp_path, dataset, dataset_path):
        before = dataset_path.read_bytes()
        with pytest.raises(DimensionError):
            with DatasetWriter(dataset_path, dataset.header) as writer:
                writer.append(dataset.positions[0], np.zeros((1, 1, 1), dtype=complex))
        assert dataset_path.read_bytes() == before
        assert not dataset_path.with_name(dataset_path.name + PARTIAL_SUFFIX).exists()

    def test_same_seed_gives_identical_bytes(self, tmp_path, scene):
        build_dataset(scene, 10, seed=7, path=tmp_path / "a.bin")
        build_dataset(scene, 10, seed=7, path=tmp_path / "b.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_rewrite_is_byte_identical(self, tmp_path, scene):
        build_dataset(scene, 3, seed=11, path=tmp_path / "three.bin")
        write_dataset(tmp_path / "again.bin", read_dataset(tmp_path / "three.bin"))
        assert (tmp_path / "again.bin").read_bytes() == (tmp_path / "three.bin").read_bytes()

    def test_writer_checks_the_shape(self, tmp_path, dataset):
        with pytest.raises(DimensionError):
            with DatasetWriter(tmp_path / "wrong.bin", dataset.header) as writer:
                writer.append(dataset.positions[0], np.zeros((1, 1, 1), dtype=complex))

    def test_checksum_is_stable(self, dataset_path, dataset):
        assert dataset.checksum == file_checksum(dataset_path)
        assert len(dataset.checksum) == 64


class TestCheckpoint:
    def test_round_trip_is_bit_identical(self, checkpoint_path, model, dataset):
        checkpoint = read_checkpoint(checkpoint_path)
        assert checkpoint.manifest.epoch == 3
        assert [e.name for e in checkpoint.manifest.parameters] == list(model.params)
        for name, value in checkpoint.parameters().items():
            np.testing.assert_array_equal(value, model.params[name].data)

        restored = CMANet(
            checkpoint.manifest.model,
            ModelParams.from_arrays(checkpoint.manifest.model, checkpoint.parameters()),
            checkpoint.manifest.normalization,
        )
        csi = dataset.csi(slice(0, 3))
        np.testing.assert_array_equal(restored.predict(csi), model.predict(csi))

    def test_arrays_are_writable_copies(self, checkpoint_path):
        arrays = read_checkpoint(checkpoint_path).parameters()
        arrays["mlp.b2"] += 1.0
        assert arrays["mlp.b2"].flags.writeable

    def test_optimizer_moments_are_split_off(self, tmp_path, model):
        manifest = CheckpointManifest(
            format_version=CHECKPOINT_VERSION,
            epoch=1,
            model=model.config,
            train=TrainConfig(),
            normalization=model.normalization,
            parameters=[],
            optimizer_step=7,
        )
        arrays = dict(model.params.arrays())
        arrays.update({f"adam.m/{n}": np.ones_like(a) for n, a in model.params.arrays().items()})
        arrays.update({f"adam.v/{n}": np.full_like(a, 2.0) for n, a in model.params.arrays().items()})
        write_checkpoint(tmp_path / "opt.cmck", manifest, arrays)
        checkpoint = read_checkpoint(tmp_path / "opt.cmck")
        first, second = checkpoint.optimizer_moments()
        assert set(checkpoint.parameters()) == set(first) == set(second) == set(model.params)
        assert checkpoint.manifest.optimizer_step == 7
        assert all(np.all(v == 2.0) for v in second.values())

    def test_bad_magic(self, tmp_path, checkpoint_path):
        data = checkpoint_path.read_bytes()
        with pytest.raises(BadMagicError):
            read_checkpoint(rewrite(tmp_path / "bad.cmck", b"CSID" + data[4:]))

    def test_version_mismatch(self, tmp_path, checkpoint_path):
        data = bytearray(checkpoint_path.read_bytes())
        data[4:6] = (9).to_bytes(2, "little")
        with pytest.raises(VersionMismatchError):
            read_checkpoint(rewrite(tmp_path / "v9.cmck", bytes(data)))

    def test_truncated_blob(self, tmp_path, checkpoint_path):
        data = checkpoint_path.read_bytes()
        with pytest.raises(TruncatedFileError):
            read_checkpoint(rewrite(tmp_path / "short.cmck", data[:-8]))

    def test_trailing_bytes(self, tmp_path, checkpoint_path):
        with pytest.raises(ShapeInconsistencyError):
            read_checkpoint(rewrite(tmp_path / "long.cmck", checkpoint_path.read_bytes() + b"\0" * 8))

    def test_missing_parameter(self, tmp_path, model):
        manifest = CheckpointManifest(
            format_version=CHECKPOINT_VERSION,
            epoch=1,
            model=model.config,
            train=TrainConfig(),
            normalization=model.normalization,
            parameters=[],
        )
        arrays = model.params.arrays()
        del arrays["attn.w_o"]
        write_checkpoint(tmp_path / "partial.cmck", manifest, arrays)
        with pytest.raises(ShapeInconsistencyError):
            read_checkpoint(tmp_path / "partial.cmck")

    def test_corrupted_manifest(self, tmp_path, checkpoint_path):
        data = bytearray(checkpoint_path.read_bytes())
        start = data.index(b'"epoch"')
        data[start : start + 7] = b'"epocX"'
        with pytest.raises(FormatError):
            read_checkpoint(rewrite(tmp_path / "corrupt.cmck", bytes(data)))

    def test_rng_state_round_trip(self):
        rng = np.random.default_rng(42)
        rng.normal(size=17)
        restored = restore_rng(rng_state(rng))
        np.testing.assert_array_equal(restored.normal(size=5), rng.normal(size=5))


class TestConfig:
    @pytest.mark.parametrize("name", ["desk.toml", "large.toml", "tiny.toml"])
    def test_shipped_configs_load(self, name):
        config = read_config(CONFIG_DIR / name)
        assert config.ofdm.n_subcarriers >= 2

    def test_desk_values(self):
        config = read_config(CONFIG_DIR / "desk.toml")
        assert config.scene.n_base_stations == 4
        assert config.array.n_antennas == 4
        assert config.ofdm.n_subcarriers == 64
        assert config.train.epochs == 60

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "extra.toml"
        path.write_text("[scene]\nn_base_stations = 3\ncolour = 'blue'\n")
        with pytest.raises(ConfigError, match="scene.colour"):
            read_config(path)

    def test_invalid_value(self, tmp_path):
        path = tmp_path / "invalid.toml"
        path.write_text("[ofdm]\nn_subcarriers = 0\n")
        with pytest.raises(ConfigError, match="ofdm.n_subcarriers"):
            read_config(path)

    def test_not_toml(self, tmp_path):
        path = tmp_path / "broken.toml"
        path.write_text("[scene\n")
        with pytest.raises(ConfigError):
            read_config(path)


class TestDescribeFile:
    def test_dataset(self, dataset_path):
        info = describe_file(dataset_path)
        assert info["kind"] == "dataset"
        assert info["count"] == 24
        assert info["sha256"] == file_checksum(dataset_path)

    def test_checkpoint(self, checkpoint_path):
        info = describe_file(checkpoint_path)
        assert info["kind"] == "checkpoint"
        assert info["epoch"] == 3
        assert "rng_state" not in info

    def test_unknown_file(self, tmp_path):
        with pytest.raises(BadMagicError):
            describe_file(rewrite(tmp_path / "notes.txt", b"hello"))
