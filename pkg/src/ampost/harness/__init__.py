"""Metrics, oracles, evaluation and result emission."""

from .config import load_config, parse_config
from .evaluate import (
    DPSReconstructor,
    FlowReconstructor,
    MetricReport,
    evaluate,
    median_wall_time,
    posterior_stats,
    write_reports_csv,
)
from .images import emit_image, quantize, read_image
from .metrics import PSNR_IDENTICAL, mse, psnr, ssim
from .oracle import ConjugatePosterior, conjugate_posterior

__all__ = [
    "ConjugatePosterior", "DPSReconstructor", "FlowReconstructor", "MetricReport",
    "PSNR_IDENTICAL", "conjugate_posterior", "emit_image", "evaluate", "load_config",
    "median_wall_time", "mse", "parse_config", "posterior_stats", "psnr", "quantize",
    "read_image", "ssim", "write_reports_csv",
]
