"""PSNR, SSIM, interpolation error, baselines and evaluation reports."""
import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import correlate1d

from .data import EvalClip

PSNR_CAP = 99.99
METRICS = ("psnr", "ssim", "ie")


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def interpolation_error(a, b) -> float:
    """Root mean squared error on the 0-255 scale."""
    a, b = _pair(a, b)
    return float(np.sqrt(np.mean((255.0 * a - 255.0 * b) ** 2)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean SSIM over all fully-covered window positions, averaged over channels.

    Frames are ``(H, W)`` or ``(H, W, C)``.
    """
    a, b = _pair(a, b)
    if min(a.shape[:2]) < window:
        raise ValueError(f"SSIM needs frames of at least {window}x{window}, got {a.shape[:2]}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    g = gaussian_window(window, sigma)
    r = window // 2
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def filt(x):
        y = correlate1d(x, g, axis=0, mode="constant")
        y = correlate1d(y, g, axis=1, mode="constant")
        return y[r:x.shape[0] - r, r:x.shape[1] - r]

    scores = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx * mx
        syy = filt(y * y) - my * my
        sxy = filt(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        scores.append(s.mean())
    return float(np.mean(scores))


def frame_metrics(pred, gt) -> Dict[str, float]:
    return {"psnr": psnr(pred, gt), "ssim": ssim(pred, gt), "ie": interpolation_error(pred, gt)}


def trivial_copy_predict(eval_clip: EvalClip) -> List[np.ndarray]:
    """Copy the temporally nearer input; ties go to the first input."""
    n = eval_clip.n
    return [eval_clip.input_first if i / (n + 1) <= 0.5 else eval_clip.input_last
            for i in range(1, n + 1)]


@dataclass
class EvalReport:
    per_clip: List[dict] = field(default_factory=list)
    means: Dict[str, float] = field(default_factory=dict)
    per_time_psnr: List[float] = field(default_factory=list)
    seeds: List[Dict[str, float]] = field(default_factory=list)
    mean_std: Dict[str, Tuple[float, Optional[float]]] = field(default_factory=dict)
    name: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), indent=2, **kwargs)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["mean_std"] = {k: tuple(v) for k, v in d.get("mean_std", {}).items()}
        return cls(**d)

    def per_time_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "t", "psnr"])
        n = len(self.per_time_psnr)
        for i, v in enumerate(self.per_time_psnr, start=1):
            w.writerow([i, f"{i / (n + 1):.6f}", f"{v:.6f}"])
        return buf.getvalue()

    def formatted(self, metric: str) -> str:
        if metric in self.mean_std:
            mean, std = self.mean_std[metric]
            return f"{mean:.3f}" if std is None else f"{mean:.3f}±{std:.3f}"
        return f"{self.means[metric]:.3f}"


Predictor = Callable[[np.ndarray, np.ndarray, int], Sequence[np.ndarray]]


def as_predictor(model) -> Union[Predictor, str]:
    """Normalize what ``evaluate`` accepts into ``f(first, last, n) -> frames``.

    Accepts ``"trivial_copy"``, an object with ``interpolate(i0, i1, n)`` (the
    estimator), an :class:`~cycle_vfi.model.InterpolationModel`, or a plain callable.
    """
    if isinstance(model, str):
        if model != "trivial_copy":
            raise ValueError(f"unknown baseline {model!r}")
        return model
    if hasattr(model, "interpolate"):
        return model.interpolate
    from .model import InterpolationModel
    if isinstance(model, InterpolationModel):
        from .estimator import interpolate_frames
        return lambda i0, i1, n: interpolate_frames(model, i0, i1, n)
    if callable(model):
        return model
    raise TypeError(f"cannot evaluate {type(model).__name__}")


def evaluate(model, eval_clips: Sequence[EvalClip], n: Optional[int] = None,
             name: str = "") -> EvalReport:
    if not eval_clips:
        raise ValueError("no evaluation clips")
    n = eval_clips[0].n if n is None else n
    if any(c.n != n for c in eval_clips):
        raise ValueError(f"every evaluation clip must hold {n} ground-truth frames")
    predictor = as_predictor(model)
    rows = []
    per_time = np.zeros(n)
    for clip in eval_clips:
        if predictor == "trivial_copy":
            preds = trivial_copy_predict(clip)
        else:
            preds = predictor(clip.input_first, clip.input_last, n)
        if len(preds) != n:
            raise ValueError(f"predictor returned {len(preds)} frames, expected {n}")
        scores = [frame_metrics(p, g) for p, g in zip(preds, clip.ground_truth)]
        per_time += [s["psnr"] for s in scores]
        row = {"clip_id": clip.clip_id}
        row.update({m: float(np.mean([s[m] for s in scores])) for m in METRICS})
        rows.append(row)
    means = {m: float(np.mean([r[m] for r in rows])) for m in METRICS}
    return EvalReport(per_clip=rows, means=means,
                      per_time_psnr=[float(v) for v in per_time / len(eval_clips)],
                      seeds=[means], name=name)


def aggregate_seeds(reports: Sequence[EvalReport]) -> EvalReport:
    """Mean and sample standard deviation of each metric across runs."""
    if not reports:
        raise ValueError("no reports")
    seeds = [dict(r.means) for r in reports]
    mean_std = {}
    for m in METRICS:
        vals = np.array([s[m] for s in seeds])
        mean_std[m] = (float(vals.mean()),
                       float(vals.std(ddof=1)) if len(vals) >= 2 else None)
    per_clip = []
    for rows in zip(*(r.per_clip for r in reports)):
        row = {"clip_id": rows[0]["clip_id"]}
        row.update({m: float(np.mean([x[m] for x in rows])) for m in METRICS})
        per_clip.append(row)
    means = ({m: float(np.mean([r[m] for r in per_clip])) for m in METRICS}
             if per_clip else {m: mean_std[m][0] for m in METRICS})
    per_time = np.mean([r.per_time_psnr for r in reports], axis=0) if reports[0].per_time_psnr else []
    return EvalReport(per_clip=per_clip, means=means, per_time_psnr=[float(v) for v in per_time],
                      seeds=seeds, mean_std=mean_std, name=reports[0].name)


def comparison_table(reports: Sequence[EvalReport]) -> str:
    """Plain-text table with one row per report."""
    lines = [f"{'method':<24} {'PSNR':>16} {'SSIM':>16} {'IE':>16}"]
    for r in reports:
        lines.append(f"{r.name:<24} " + " ".join(f"{r.formatted(m):>16}" for m in METRICS))
    return "\n".join(lines)
