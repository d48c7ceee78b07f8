"""
CMANet forward computation on top of ``cmanet.numeric``.

Pipeline for one sample (L base stations, M antennas, N subcarriers):

    H (L×M×N complex) -> space_domain_format -> H_2 (L×2MN)
    -> cma_forward -> H_3 (L×2MN) -> reshape_for_decoder -> H_6 (N×2ML)
    -> decoder_forward -> x̂ (N×3), x̂_final = x̂[N-1]

A batch runs the encoder per sample and the decoder on all samples at once.
"""

import logging
from collections.abc import Iterator, Mapping
from dataclasses import dataclass

import numpy as np

from cmanet.errors import ContractError, DimensionError
from cmanet.models import ModelConfig, Normalization, Variant
from cmanet.numeric import (
    LAYER_NORM_EPS,
    Tensor,
    add,
    add_bias,
    columns,
    grad_check,
    layer_norm,
    matmul,
    mul,
    permute,
    relu,
    reshape,
    row_l2_norm,
    scale,
    scale_rows,
    sigmoid,
    softmax_rows,
    stack,
    sub,
    tanh,
    total,
    transpose,
)

FORGET_BIAS = 1.0

logger = logging.getLogger(__name__)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every learnable tensor, in storage order."""
    if not config.is_bound:
        raise ContractError("model config is not bound to a dataset shape")
    embed = 2 * config.n_antennas * config.n_subcarriers
    spatial = 2 * config.n_antennas * config.n_base_stations
    hidden = config.lstm_hidden
    return {
        "attn.w_q": (embed, config.d_k),
        "attn.w_k": (embed, config.d_k),
        "attn.w_v": (embed, config.d_k),
        "attn.w_o": (config.d_k, embed),
        # gate blocks along columns: input, forget, cell, output
        "lstm.w_x": (spatial, 4 * hidden),
        "lstm.w_h": (hidden, 4 * hidden),
        "lstm.b": (4 * hidden,),
        "mlp.w1": (hidden, config.mlp_hidden),
        "mlp.b1": (config.mlp_hidden,),
        "mlp.w2": (config.mlp_hidden, 3),
        "mlp.b2": (3,),
    }


@dataclass
class ModelParams:
    """All learnable tensors of the network, keyed by name."""

    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {
            name: t.grad if t.grad is not None else np.zeros_like(t.data)
            for name, t in self.tensors.items()
        }

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def detached(self) -> "ModelParams":
        """Same values without gradient tracking, for inference."""
        return ModelParams({name: Tensor(t.data) for name, t in self.tensors.items()})

    def copy(self) -> "ModelParams":
        return ModelParams(
            {name: Tensor(t.data.copy(), requires_grad=t.requires_grad) for name, t in self.tensors.items()}
        )

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: Mapping[str, np.ndarray]) -> "ModelParams":
        shapes = parameter_shapes(config)
        if set(arrays) != set(shapes):
            raise ContractError(
                f"parameter names {sorted(arrays)} do not match the model's {sorted(shapes)}"
            )
        tensors = {}
        for name, shape in shapes.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != shape:
                raise DimensionError(f"parameter {name}", shape, value.shape)
            if not np.isfinite(value).all():
                raise ContractError(f"parameter {name} has non-finite entries")
            tensors[name] = Tensor(value.copy(), requires_grad=True)
        return cls(tensors)

    @classmethod
    def initialize(cls, config: ModelConfig, rng: np.random.Generator) -> "ModelParams":
        """Glorot-uniform weights, zero biases, forget-gate bias 1."""
        tensors = {}
        hidden = config.lstm_hidden
        for name, shape in parameter_shapes(config).items():
            if len(shape) == 1:
                value = np.zeros(shape)
                if name == "lstm.b":
                    value[hidden : 2 * hidden] = FORGET_BIAS
            else:
                fan_in, fan_out = shape
                if name.startswith("lstm."):
                    fan_out = hidden
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                value = rng.uniform(-limit, limit, size=shape)
            tensors[name] = Tensor(value, requires_grad=True)
        return cls(tensors)


# space-domain format


def space_domain_format(csi: np.ndarray) -> np.ndarray:
    """L×M×N complex -> L×2MN real; works on any leading batch axes.

    Rows 2m / 2m+1 of the intermediate L×2M×N tensor hold Re / Im of antenna
    m, then antenna-major flattening puts entry (a, n) at column a·N + n.
    """
    csi = np.asarray(csi)
    if csi.ndim < 3:
        raise DimensionError("space_domain_format", csi.shape)
    *lead, n_bs, n_ant, n_sub = csi.shape
    interleaved = np.empty((*lead, n_bs, 2 * n_ant, n_sub), dtype=np.float64)
    interleaved[..., 0::2, :] = csi.real
    interleaved[..., 1::2, :] = csi.imag
    return interleaved.reshape(*lead, n_bs, 2 * n_ant * n_sub)


def space_domain_unformat(formatted: np.ndarray, n_antennas: int, n_subcarriers: int) -> np.ndarray:
    """Inverse of :func:`space_domain_format`."""
    formatted = np.asarray(formatted, dtype=np.float64)
    *lead, n_bs, width = formatted.shape
    if width != 2 * n_antennas * n_subcarriers:
        raise DimensionError("space_domain_unformat", formatted.shape, (n_bs, 2 * n_antennas * n_subcarriers))
    interleaved = formatted.reshape(*lead, n_bs, 2 * n_antennas, n_subcarriers)
    return interleaved[..., 0::2, :] + 1j * interleaved[..., 1::2, :]


# encoder


def channel_gain(h2: Tensor) -> Tensor:
    return row_l2_norm(h2)


def channel_mask(h2: Tensor) -> Tensor:
    """W = layer_norm(C_gain): one weight per base station.

    The epsilon is taken relative to the gains' mean square, so scaling the
    CSI by any c > 0 leaves the mask unchanged up to rounding.
    """
    gains = channel_gain(h2)
    mean_square = float(np.mean(gains.data * gains.data))
    return layer_norm(gains, eps=LAYER_NORM_EPS * mean_square if mean_square > 0 else LAYER_NORM_EPS)


def self_attention(h2: Tensor, params: ModelParams) -> Tensor:
    """Single-head scaled dot-product attention over the base-station axis."""
    d_k = params["attn.w_q"].shape[1]
    queries = matmul(h2, params["attn.w_q"])
    keys = matmul(h2, params["attn.w_k"])
    values = matmul(h2, params["attn.w_v"])
    scores = scale(matmul(queries, transpose(keys)), 1.0 / np.sqrt(d_k))
    weights = softmax_rows(scores)
    return matmul(matmul(weights, values), params["attn.w_o"])


def cma_forward(
    h2: Tensor, params: ModelParams, variant: Variant = Variant.CMA, mask: Tensor | None = None
) -> Tensor:
    """Channel masked attention.

    ``mask`` overrides the computed channel mask (and applies it for the
    plain variant too).
    """
    attended = self_attention(h2, params)
    if mask is None:
        if variant == Variant.PLAIN:
            return attended
        mask = channel_mask(h2)
    return scale_rows(attended, mask)


def reshape_for_decoder(h3: Tensor, n_antennas: int, n_subcarriers: int) -> Tensor:
    """L×2MN -> N×2ML with H_6[n, a·L + l] = H_3[l, a·N + n]."""
    n_bs = h3.shape[0]
    unflat = reshape(h3, (n_bs, 2 * n_antennas, n_subcarriers))
    permuted = permute(unflat, (2, 1, 0))
    return reshape(permuted, (n_subcarriers, 2 * n_antennas * n_bs))


def inverse_reshape_for_decoder(h6: Tensor, n_base_stations: int, n_antennas: int) -> Tensor:
    n_sub = h6.shape[0]
    unflat = reshape(h6, (n_sub, 2 * n_antennas, n_base_stations))
    permuted = permute(unflat, (2, 1, 0))
    return reshape(permuted, (n_base_stations, 2 * n_antennas * n_sub))


# decoder


def _mlp(hidden: Tensor, params: ModelParams) -> Tensor:
    inner = relu(add_bias(matmul(hidden, params["mlp.w1"]), params["mlp.b1"]))
    return add_bias(matmul(inner, params["mlp.w2"]), params["mlp.b2"])


def decoder_forward(h6: Tensor, params: ModelParams) -> Tensor:
    """LSTM over subcarriers with the shared MLP read out at every step.

    Takes N×2ML (one sample) or B×N×2ML; returns N×3 or B×N×3.
    Row k only depends on input rows 0..k.
    """
    single = len(h6.shape) == 2
    if single:
        h6 = reshape(h6, (1, *h6.shape))
    if len(h6.shape) != 3:
        raise DimensionError("decoder_forward", h6.shape)
    batch, n_sub, _ = h6.shape
    hidden_size = params["lstm.w_h"].shape[0]

    hidden = Tensor(np.zeros((batch, hidden_size)))
    cell = Tensor(np.zeros((batch, hidden_size)))
    estimates = []
    for k in range(n_sub):
        step = h6[:, k, :]
        gates = add_bias(
            add(matmul(step, params["lstm.w_x"]), matmul(hidden, params["lstm.w_h"])),
            params["lstm.b"],
        )
        input_gate = sigmoid(columns(gates, 0, hidden_size))
        forget_gate = sigmoid(columns(gates, hidden_size, 2 * hidden_size))
        candidate = tanh(columns(gates, 2 * hidden_size, 3 * hidden_size))
        output_gate = sigmoid(columns(gates, 3 * hidden_size, 4 * hidden_size))
        cell = add(mul(forget_gate, cell), mul(input_gate, candidate))
        hidden = mul(output_gate, tanh(cell))
        estimates.append(_mlp(hidden, params))

    out = stack(estimates, axis=1)
    return reshape(out, (n_sub, 3)) if single else out


# loss


def subcarrier_weights(n_subcarriers: int) -> np.ndarray:
    return np.arange(1, n_subcarriers + 1, dtype=np.float64) / n_subcarriers


def wmse_loss(estimates: Tensor, targets: np.ndarray) -> Tensor:
    """Σ_k (k/N)·‖x_true − x̂[k]‖₂, averaged over the batch.

    ``estimates`` is N×3 or B×N×3, ``targets`` 3 or B×3.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if len(estimates.shape) == 2:
        estimates = reshape(estimates, (1, *estimates.shape))
        targets = targets.reshape(1, 3)
    batch, n_sub, _ = estimates.shape
    if targets.shape != (batch, 3):
        raise DimensionError("wmse_loss", estimates.shape, targets.shape)

    expanded = Tensor(np.broadcast_to(targets[:, None, :], (batch, n_sub, 3)).copy())
    distances = row_l2_norm(reshape(sub(expanded, estimates), (batch * n_sub, 3)))
    weights = Tensor(np.tile(subcarrier_weights(n_sub), batch))
    return scale(total(mul(distances, weights)), 1.0 / batch)


# whole network


def standardize(csi: np.ndarray, normalization: Normalization) -> np.ndarray:
    return np.asarray(csi) / normalization.csi_scale


def positions_to_unit(positions: np.ndarray, normalization: Normalization) -> np.ndarray:
    lower = np.asarray(normalization.box_lower)
    upper = np.asarray(normalization.box_upper)
    return (np.asarray(positions, dtype=np.float64) - lower) / (upper - lower)


def unit_to_positions(unit: np.ndarray, normalization: Normalization) -> np.ndarray:
    lower = np.asarray(normalization.box_lower)
    upper = np.asarray(normalization.box_upper)
    return lower + np.asarray(unit, dtype=np.float64) * (upper - lower)


def encode(csi: np.ndarray, params: ModelParams, config: ModelConfig) -> Tensor:
    """One standardized L×M×N sample -> decoder input N×2ML."""
    expected = (config.n_base_stations, config.n_antennas, config.n_subcarriers)
    if csi.shape != expected:
        raise DimensionError("forward", expected, csi.shape)
    h2 = Tensor(space_domain_format(csi))
    h3 = cma_forward(h2, params, config.variant)
    return reshape_for_decoder(h3, config.n_antennas, config.n_subcarriers)


def forward(csi: np.ndarray, params: ModelParams, config: ModelConfig) -> tuple[Tensor, Tensor]:
    """Standardized CSI (L×M×N or B×L×M×N) -> (x̂ per subcarrier, x̂ at the last subcarrier).

    Shapes are (N×3, 3) for one sample and (B×N×3, B×3) for a batch, in unit
    box coordinates.
    """
    csi = np.asarray(csi)
    single = csi.ndim == 3
    batch = csi[None] if single else csi
    encoded = [encode(sample, params, config) for sample in batch]
    estimates = decoder_forward(stack(encoded, axis=0), params)
    if single:
        estimates = reshape(estimates, (config.n_subcarriers, 3))
        return estimates, estimates[-1, :]
    return estimates, estimates[:, -1, :]


@dataclass
class CMANet:
    """A bound config, its parameters and the normalization they were trained with."""

    config: ModelConfig
    params: ModelParams
    normalization: Normalization

    @classmethod
    def initialize(
        cls, config: ModelConfig, normalization: Normalization, rng: np.random.Generator
    ) -> "CMANet":
        return cls(config, ModelParams.initialize(config, rng), normalization)

    def loss(self, csi: np.ndarray, positions: np.ndarray) -> Tensor:
        """Batch W-MSE on raw CSI and positions in meters."""
        estimates, _ = forward(standardize(csi, self.normalization), self.params, self.config)
        return wmse_loss(estimates, positions_to_unit(positions, self.normalization))

    def predict(self, csi: np.ndarray) -> np.ndarray:
        """Per-subcarrier position estimates in meters, B×N×3, without gradient tracking."""
        estimates, _ = forward(
            standardize(csi, self.normalization), self.params.detached(), self.config
        )
        return unit_to_positions(estimates.data, self.normalization)


def full_model_grad_check(
    config: ModelConfig, csi: np.ndarray, targets: np.ndarray, rng: np.random.Generator, h: float = 1e-5
) -> float:
    """Finite-difference check of every parameter gradient of the batch loss.

    ``csi`` is already standardized and ``targets`` in unit coordinates.
    """
    params = ModelParams.initialize(config, rng)
    leaves = [params[name] for name in params]

    def loss() -> Tensor:
        estimates, _ = forward(csi, params, config)
        return wmse_loss(estimates, targets)

    error = grad_check(loss, leaves, h=h)
    logger.info(f"Full-model gradient check over {sum(t.data.size for t in leaves)} entries: {error:.3e}")
    return error


__all__ = [
    "CMANet",
    "ModelParams",
    "channel_gain",
    "channel_mask",
    "cma_forward",
    "decoder_forward",
    "encode",
    "forward",
    "full_model_grad_check",
    "inverse_reshape_for_decoder",
    "parameter_shapes",
    "positions_to_unit",
    "reshape_for_decoder",
    "self_attention",
    "space_domain_format",
    "space_domain_unformat",
    "standardize",
    "subcarrier_weights",
    "unit_to_positions",
    "wmse_loss",
]
