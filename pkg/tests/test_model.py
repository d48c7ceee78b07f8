import numpy as np
import pytest

from cmanet.errors import ContractError, DimensionError
from cmanet.model import (
    CMANet,
    ModelParams,
    channel_gain,
    channel_mask,
    cma_forward,
    decoder_forward,
    forward,
    full_model_grad_check,
    inverse_reshape_for_decoder,
    parameter_shapes,
    positions_to_unit,
    reshape_for_decoder,
    self_attention,
    space_domain_format,
    space_domain_unformat,
    unit_to_positions,
    wmse_loss,
)
from cmanet.models import ModelConfig, Normalization, Variant
from cmanet.numeric import Tensor, grad_check, mul, total

TINY = ModelConfig(d_k=8, lstm_hidden=8, mlp_hidden=8).bind(3, 2, 8)
PROPERTY_SEEDS = range(100)


def random_csi(rng, *shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


def random_config(rng) -> ModelConfig:
    """A small model bound to random L in 1..5, M in 1..3, N in 1..8."""
    n_bs, n_ant, n_sub = (int(v) for v in rng.integers(1, (6, 4, 9)))
    return ModelConfig(
        d_k=int(rng.integers(1, 9)),
        lstm_hidden=int(rng.integers(1, 9)),
        mlp_hidden=int(rng.integers(1, 9)),
    ).bind(n_bs, n_ant, n_sub)


@pytest.fixture
def params(rng):
    return ModelParams.initialize(TINY, rng)


class TestSpaceDomainFormat:
    def test_single_entry(self):
        np.testing.assert_array_equal(space_domain_format(np.array([[[1 + 2j]]])), [[1.0, 2.0]])

    def test_real_input_leaves_imaginary_rows_zero(self, rng):
        formatted = space_domain_format(rng.normal(size=(2, 3, 4)) + 0j).reshape(2, 6, 4)
        assert np.all(formatted[:, 1::2, :] == 0)

    def test_index_mapping(self, rng):
        csi = random_csi(rng, 2, 3, 4)
        formatted = space_domain_format(csi)
        for l in range(2):
            for m in range(3):
                for n in range(4):
                    assert formatted[l, (2 * m) * 4 + n] == csi[l, m, n].real
                    assert formatted[l, (2 * m + 1) * 4 + n] == csi[l, m, n].imag

    def test_round_trip_is_exact(self, rng):
        for _ in range(100):
            shape = tuple(rng.integers(1, 5, size=3))
            csi = random_csi(rng, *shape)
            np.testing.assert_array_equal(space_domain_unformat(space_domain_format(csi), shape[1], shape[2]), csi)

    def test_rejects_flat_input(self):
        with pytest.raises(DimensionError):
            space_domain_format(np.ones((2, 2)))


class TestEncoder:
    def test_channel_gain(self, rng):
        assert channel_gain(Tensor([[3.0, 4.0]])).data[0] == 5.0
        h2 = rng.normal(size=(3, 16))
        np.testing.assert_allclose(channel_gain(Tensor(2.5 * h2)).data, 2.5 * channel_gain(Tensor(h2)).data)

    def test_channel_gain_is_the_complex_frobenius_norm(self, rng):
        csi = random_csi(rng, 3, 2, 8)
        gains = channel_gain(Tensor(space_domain_format(csi))).data
        np.testing.assert_allclose(gains, np.linalg.norm(csi.reshape(3, -1), axis=1), rtol=1e-12)

    def test_mask_of_known_gains(self):
        h2 = Tensor([[3.0, 0.0], [0.0, 4.0]])
        np.testing.assert_allclose(channel_mask(h2).data, [-1.0, 1.0], atol=1e-3)

    def test_mask_is_scale_invariant(self, rng):
        for _ in range(100):
            h2 = rng.normal(size=(4, 16))
            for c in (0.5, 3.0):
                np.testing.assert_allclose(
                    channel_mask(Tensor(c * h2)).data, channel_mask(Tensor(h2)).data, rtol=0, atol=1e-12
                )

    def test_equal_gains_zero_the_output(self, rng, params):
        # two identical rows: their mean is exact, so the mask is exactly zero
        h2 = np.tile(rng.normal(size=(1, 32)), (2, 1))
        out = cma_forward(Tensor(h2), params, Variant.CMA)
        np.testing.assert_array_equal(out.data, np.zeros_like(h2))

    def test_single_station_attention(self, rng):
        config = ModelConfig(d_k=4).bind(1, 2, 8)
        p = ModelParams.initialize(config, rng)
        h2 = rng.normal(size=(1, 32))
        expected = h2 @ p["attn.w_v"].data @ p["attn.w_o"].data
        np.testing.assert_allclose(self_attention(Tensor(h2), p).data, expected, rtol=1e-12)

    @pytest.mark.parametrize("seed", PROPERTY_SEEDS)
    def test_station_permutation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        config = random_config(rng)
        params = ModelParams.initialize(config, rng)
        csi = random_csi(rng, config.n_base_stations, config.n_antennas, config.n_subcarriers)
        h2 = space_domain_format(csi) * rng.uniform(0.1, 10.0)
        perm = rng.permutation(config.n_base_stations)
        for variant in Variant:
            out = cma_forward(Tensor(h2), params, variant).data
            permuted = cma_forward(Tensor(h2[perm]), params, variant).data
            np.testing.assert_allclose(permuted, out[perm], rtol=1e-12, atol=1e-12)

    def test_attention_projection_gradients(self, rng, params):
        h2 = Tensor(rng.normal(size=(3, 32)))
        weights = Tensor(rng.normal(size=(3, 32)))
        leaves = [params[name] for name in ("attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o")]
        assert grad_check(lambda: total(mul(cma_forward(h2, params), weights)), leaves) < 1e-5

    def test_plain_equals_cma_with_unit_mask(self, rng, params):
        h2 = Tensor(rng.normal(size=(3, 32)))
        ones = Tensor(np.ones(3))
        masked = cma_forward(h2, params, Variant.CMA, mask=ones).data
        plain = cma_forward(h2, params, Variant.PLAIN).data
        np.testing.assert_array_equal(masked, plain * 1.0)


class TestReshape:
    def test_single_element_is_identity(self):
        h3 = Tensor([[7.0, 8.0]])
        np.testing.assert_array_equal(reshape_for_decoder(h3, 1, 1).data, [[7.0, 8.0]])

    @pytest.mark.parametrize("seed", PROPERTY_SEEDS)
    def test_index_identity(self, seed):
        rng = np.random.default_rng(seed)
        n_bs, n_ant, n_sub = (int(v) for v in rng.integers(1, (7, 5, 13)))
        h3 = rng.normal(size=(n_bs, 2 * n_ant * n_sub))
        h6 = reshape_for_decoder(Tensor(h3), n_ant, n_sub).data
        assert h6.shape == (n_sub, 2 * n_ant * n_bs)
        l, a, n = np.meshgrid(np.arange(n_bs), np.arange(2 * n_ant), np.arange(n_sub), indexing="ij")
        np.testing.assert_array_equal(h6[n, a * n_bs + l], h3[l, a * n_sub + n])

    @pytest.mark.parametrize("seed", PROPERTY_SEEDS)
    def test_inverse_recovers_input(self, seed):
        rng = np.random.default_rng(seed)
        n_bs, n_ant, n_sub = (int(v) for v in rng.integers(1, (7, 5, 13)))
        h3 = rng.normal(size=(n_bs, 2 * n_ant * n_sub))
        h6 = reshape_for_decoder(Tensor(h3), n_ant, n_sub)
        np.testing.assert_array_equal(inverse_reshape_for_decoder(h6, n_bs, n_ant).data, h3)


class TestDecoder:
    def test_zero_params_and_input_give_zero(self):
        zeros = ModelParams({name: Tensor(np.zeros(shape)) for name, shape in parameter_shapes(TINY).items()})
        out = decoder_forward(Tensor(np.zeros((8, 12))), zeros)
        np.testing.assert_array_equal(out.data, np.zeros((8, 3)))

    @pytest.mark.parametrize("seed", PROPERTY_SEEDS)
    def test_causality(self, seed):
        rng = np.random.default_rng(seed)
        config = random_config(rng)
        params = ModelParams.initialize(config, rng)
        batch = int(rng.integers(1, 5))
        n_sub = config.n_subcarriers
        h6 = rng.normal(size=(batch, n_sub, 2 * config.n_antennas * config.n_base_stations))
        base = decoder_forward(Tensor(h6), params).data
        for k in range(n_sub - 1):
            perturbed = h6.copy()
            perturbed[:, k + 1 :] += rng.normal(size=perturbed[:, k + 1 :].shape)
            out = decoder_forward(Tensor(perturbed), params).data
            np.testing.assert_array_equal(out[:, : k + 1], base[:, : k + 1])

    def test_gradient_through_eight_steps(self, rng, params):
        h6 = Tensor(rng.normal(size=(8, 12)))
        leaves = [params[name] for name in params if name.startswith(("lstm.", "mlp."))]
        assert grad_check(lambda: total(decoder_forward(h6, params)), leaves) < 1e-4


class TestLoss:
    def test_exact_estimates_give_zero(self, rng):
        truth = rng.normal(size=3)
        assert wmse_loss(Tensor(np.tile(truth, (5, 1))), truth).item() == 0.0

    def test_by_hand(self):
        estimates = Tensor([[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]])
        assert wmse_loss(estimates, np.zeros(3)).item() == pytest.approx(5.0)

    def test_non_negative(self, rng):
        for _ in range(100):
            assert wmse_loss(Tensor(rng.normal(size=(2, 6, 3))), rng.normal(size=(2, 3))).item() >= 0

    def test_target_shape(self):
        with pytest.raises(DimensionError):
            wmse_loss(Tensor(np.zeros((2, 4, 3))), np.zeros((3, 3)))


class TestModel:
    def test_output_shapes(self, rng, params):
        estimates, final = forward(random_csi(rng, 3, 2, 8), params, TINY)
        assert estimates.shape == (8, 3) and final.shape == (3,)
        estimates, final = forward(random_csi(rng, 4, 3, 2, 8), params, TINY)
        assert estimates.shape == (4, 8, 3) and final.shape == (4, 3)

    def test_wrong_sample_shape(self, rng, params):
        with pytest.raises(DimensionError):
            forward(random_csi(rng, 3, 2, 7), params, TINY)

    def test_unbound_config(self):
        with pytest.raises(ContractError):
            parameter_shapes(ModelConfig())

    def test_bind_resolves_d_k(self):
        assert ModelConfig().bind(6, 8, 288).d_k == 128
        assert ModelConfig().bind(1, 1, 4).d_k == 8
        with pytest.raises(ValueError):
            ModelConfig(n_subcarriers=64).bind(4, 4, 32)

    def test_initialization(self, params):
        for name, shape in parameter_shapes(TINY).items():
            assert params[name].shape == shape
            assert np.all(np.isfinite(params[name].data))
        np.testing.assert_array_equal(params["lstm.b"].data[8:16], 1.0)
        np.testing.assert_array_equal(params["mlp.b2"].data, 0.0)

    def test_from_arrays_validates(self, params):
        arrays = params.arrays()
        arrays["mlp.b2"] = np.zeros(4)
        with pytest.raises(DimensionError):
            ModelParams.from_arrays(TINY, arrays)
        del arrays["mlp.b2"]
        with pytest.raises(ContractError):
            ModelParams.from_arrays(TINY, arrays)

    def test_unit_mapping_round_trip(self, rng):
        normalization = Normalization(csi_scale=1.0, box_lower=(0.0, -10.0, 0.0), box_upper=(200.0, 190.0, 30.0))
        positions = rng.uniform((0, -10, 0), (200, 190, 30), size=(50, 3))
        np.testing.assert_allclose(unit_to_positions(positions_to_unit(positions, normalization), normalization), positions)

    def test_predict_is_in_meters(self, rng):
        normalization = Normalization(csi_scale=2.0, box_lower=(0.0, 0.0, 0.0), box_upper=(100.0, 100.0, 10.0))
        model = CMANet.initialize(TINY, normalization, rng)
        csi = random_csi(rng, 2, 3, 2, 8)
        estimates, _ = forward(csi / 2.0, model.params, TINY)
        np.testing.assert_allclose(model.predict(csi), unit_to_positions(estimates.data, normalization))

    @pytest.mark.parametrize("variant", list(Variant))
    def test_full_model_gradient_check(self, rng, variant):
        config = TINY.model_copy(update={"variant": variant})
        csi = random_csi(rng, 2, 3, 2, 8)
        targets = rng.uniform(size=(2, 3))
        assert full_model_grad_check(config, csi, targets, rng) < 1e-4
