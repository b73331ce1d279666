"""Training sweeps: pseudo-supervision weight and long-step comparisons."""
import copy
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .data import EvalClip
from .metrics import evaluate
from .model import InterpolationModel
from .trainer import TrainConfig, finetune, train

LONG_STEP_MODES = ("cc_only", "long_step", "cc_plus_long_step")


def _row(report) -> dict:
    return {k: report.means[k] for k in ("psnr", "ssim", "ie")}


def _sub(out_dir, name) -> Optional[Path]:
    return Path(out_dir) / name if out_dir is not None else None


def lambda_rp_sweep(teacher: InterpolationModel, train_arr: np.ndarray,
                    eval_clips: Sequence[EvalClip], config: TrainConfig,
                    grid: Sequence[float], out_dir=None) -> List[dict]:
    """Fine-tune from ``teacher`` once per weight; zero means CC-only."""
    rows = []
    for lam in grid:
        if lam < 0:
            raise ValueError(f"lambda_rp must be non-negative, got {lam}")
        mode = "cc_only" if lam == 0 else "cc_plus_ps"
        cfg = replace(config, mode=mode,
                      loss_weights=replace(config.loss_weights, lambda_rp=float(lam)))
        trainer = finetune(teacher, train_arr, cfg, out_dir=_sub(out_dir, f"lambda_rp_{lam:g}"))
        rows.append({"lambda_rp": float(lam), **_row(evaluate(trainer.model, eval_clips))})
    return rows


def long_step_comparison(base: InterpolationModel, train_arr: np.ndarray,
                         eval_clips: Sequence[EvalClip], config: TrainConfig,
                         out_dir=None) -> List[dict]:
    """Train the same initialization under CC, long-step, and both."""
    rows = []
    for mode in LONG_STEP_MODES:
        cfg = replace(config, mode=mode)
        trainer = train(copy.deepcopy(base), train_arr, cfg, out_dir=_sub(out_dir, mode))
        rows.append({"loss": mode, **_row(evaluate(trainer.model, eval_clips))})
    return rows
