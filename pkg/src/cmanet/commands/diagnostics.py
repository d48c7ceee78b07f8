import argparse
import logging

import numpy as np

from cmanet.channel import Scene, simulate_batch
from cmanet.commands import add_command, echo_config
from cmanet.errors import ConfigError, GradientCheckFailed
from cmanet.model import full_model_grad_check, positions_to_unit, standardize
from cmanet.models import (
    ArraySpec,
    ModelConfig,
    Normalization,
    OfdmConfig,
    PathsConfig,
    PipelineConfig,
    SceneConfig,
    UeVolume,
    Variant,
)
from cmanet.setup import load_config

GRADCHECK_SAMPLES = 2

logger = logging.getLogger(__name__)


def tiny_config(seed: int = 0) -> PipelineConfig:
    """Smallest scene that still exercises every model component."""
    return PipelineConfig(
        seed=seed,
        scene=SceneConfig(
            n_base_stations=3,
            ue_volume=UeVolume(x_range=(0.0, 50.0), y_range=(0.0, 50.0), height_range=(0.0, 10.0)),
        ),
        array=ArraySpec(rows=1, cols=2),
        ofdm=OfdmConfig(n_subcarriers=8),
        paths=PathsConfig(n_paths=3),
        model=ModelConfig(d_k=8, lstm_hidden=8, mlp_hidden=8),
    )


def check_gradients(
    config: PipelineConfig, variant: Variant, tolerance: float, h: float = 1e-5
) -> float:
    """Finite-difference check of the full model on a few simulated samples.

    Raises:
        GradientCheckFailed: the worst relative error is not below ``tolerance``.
    """
    scene = Scene.from_config(config)
    positions, csi = simulate_batch(scene, config.seed, range(GRADCHECK_SAMPLES))
    normalization = Normalization(
        csi_scale=float(np.sqrt(np.mean(np.abs(csi) ** 2))),
        box_lower=tuple(scene.ue_lower.tolist()),
        box_upper=tuple(scene.ue_upper.tolist()),
    )
    try:
        model_config = config.model.model_copy(update={"variant": variant}).bind(*scene.shape)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    error = full_model_grad_check(
        model_config,
        standardize(csi, normalization),
        positions_to_unit(positions, normalization),
        np.random.default_rng(config.train.seed),
        h=h,
    )
    logger.info(f"Gradient check ({variant}): max relative error {error:.3e}, tolerance {tolerance:.1e}")
    if not error < tolerance:
        raise GradientCheckFailed(error, tolerance)
    return error


def gradcheck(args: argparse.Namespace) -> None:
    if args.tiny or args.config is None:
        config = tiny_config(args.seed or 0)
    else:
        config = load_config(args.config, {"seed": args.seed})
    echo_config(config)
    for variant in Variant:
        check_gradients(config, variant, args.tol)
    logger.info("Gradient check passed")


def register(subparsers, common: argparse.ArgumentParser) -> None:
    parser = add_command(
        subparsers, common, "gradcheck", "Compare analytic and finite-difference gradients"
    )
    parser.add_argument("--tiny", action="store_true", help="Use the built-in tiny configuration")
    parser.add_argument("--config", default=None, help="Configuration file or name")
    parser.add_argument("--tol", type=float, default=1e-4, help="Maximum relative error")
    parser.add_argument("--seed", type=int, default=None, help="Override the configured seed")
    parser.set_defaults(handler=gradcheck)
