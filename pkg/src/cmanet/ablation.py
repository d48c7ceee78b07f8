"""Paired training of the masked and unmasked attention variants."""

import logging
from pathlib import Path

from cmanet.dataio import Dataset
from cmanet.evaluate import centroid_errors, checkpoint_id, evaluate_model, percentile, write_report
from cmanet.models import AblationReport, PipelineConfig, Variant
from cmanet.train import LAST_CHECKPOINT, fit, load_model

REPORT_FILE = "ablation.json"

logger = logging.getLogger(__name__)


def ablate(
    config: PipelineConfig,
    test_data: Dataset,
    out_dir: str | Path,
    train_data: Dataset | None = None,
    val_data: Dataset | None = None,
    workers: int = 1,
    progress: bool = False,
) -> AblationReport:
    """Train the cma and plain variants under identical seeds, data and
    hyperparameters, evaluate both on ``test_data`` and write
    ``<out>/<variant>/`` runs plus ``<out>/ablation.json``.

    Which variant wins is reported, never enforced.
    """
    out_dir = Path(out_dir)
    reports = {}
    for variant in (Variant.CMA, Variant.PLAIN):
        run_dir = out_dir / variant.value
        variant_config = config.model_copy(
            update={"model": config.model.model_copy(update={"variant": variant})}
        )
        logger.info(f"Ablation: training the {variant} variant into {run_dir}")
        fit(variant_config, run_dir, train_data=train_data, val_data=val_data, progress=progress)
        checkpoint = run_dir / LAST_CHECKPOINT
        model, manifest = load_model(checkpoint)
        report = evaluate_model(
            model,
            test_data,
            checkpoint=checkpoint_id(checkpoint),
            manifest=manifest,
            workers=workers,
            progress=progress,
        )
        write_report(report, run_dir / "report.json")
        reports[variant] = report

    cma, plain = reports[Variant.CMA], reports[Variant.PLAIN]
    summary = AblationReport(
        cma=cma,
        plain=plain,
        centroid_median_m=percentile(centroid_errors(test_data), 50),
        median_delta_m=plain.median_m - cma.median_m,
        p90_delta_m=plain.p90_m - cma.p90_m,
        mean_delta_m=plain.mean_m - cma.mean_m,
        cma_better=cma.median_m < plain.median_m,
    )
    (out_dir / REPORT_FILE).write_text(summary.model_dump_json(indent=2))
    logger.info(
        f"Ablation: cma median {cma.median_m:.3f} m, plain median {plain.median_m:.3f} m, "
        f"delta {summary.median_delta_m:+.3f} m (centroid {summary.centroid_median_m:.3f} m)"
    )
    return summary
