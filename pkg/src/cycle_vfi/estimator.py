"""scikit-learn style front end for training and applying an interpolator."""
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .losses import LossWeights
from .model import InterpolationModel, ModelConfig, load_checkpoint, save_checkpoint
from .trainer import TEACHER_MODES, TrainConfig, Trainer, frozen_copy, init_model
from .validation import as_triplet_array, check_frame, check_frame_stack, check_time_value


def _to_nchw(frames: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32)).permute(0, 3, 1, 2)


def _to_nhwc(x: torch.Tensor) -> np.ndarray:
    return x.permute(0, 2, 3, 1).contiguous().numpy()


@torch.no_grad()
def interpolate_frames(model: InterpolationModel, i0, i1, n: int) -> List[np.ndarray]:
    """``n`` clamped frames at ``t = i / (n + 1)`` between two ``(H, W, 3)`` frames."""
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return []
    model.eval()
    a = _to_nchw(check_frame(i0, "i0")[None]).expand(n, -1, -1, -1)
    b = _to_nchw(check_frame(i1, "i1")[None]).expand(n, -1, -1, -1)
    t = torch.arange(1, n + 1, dtype=torch.float32) / (n + 1)
    return list(_to_nhwc(model(a, b, t, clamp=True)))


class CycleInterpolator(BaseEstimator):
    """Video frame interpolator trained without intermediate ground truth.

    ``fit`` takes clips, :class:`~cycle_vfi.data.Triplet` objects or an
    ``(N, 3, H, W, 3)`` array of consecutive frames (for ``mode="supervised"``
    an ``(N, L, H, W, 3)`` array of full windows). ``predict`` takes
    ``(N, 2, H, W, 3)`` frame pairs and returns the frames at time ``t``.

    ``teacher`` is needed by the pseudo-supervised modes: a fitted
    ``CycleInterpolator``, an ``InterpolationModel``, a checkpoint path, or
    ``"self"`` for a frozen copy of the starting weights (fine-tuning).
    """

    def __init__(self, mode="cc_only", epochs=60, batch_size=8, lr=1e-4,
                 lr_decay_epochs=(30, 54), lr_decay_factor=10.0,
                 lambda_rc=0.8, lambda_rp=0.8, lambda_p=0.05, lambda_w=0.4, lambda_s=1.0,
                 base_width=16, depth=4, max_width=128, convs_per_level=2, downsample=1,
                 intensity_scale=255.0, crop_size=64, flip=True, teacher=None, init_checkpoint=None,
                 warm_start=False, seed=0, out_dir=None):
        self.mode = mode
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_decay_epochs = lr_decay_epochs
        self.lr_decay_factor = lr_decay_factor
        self.lambda_rc = lambda_rc
        self.lambda_rp = lambda_rp
        self.lambda_p = lambda_p
        self.lambda_w = lambda_w
        self.lambda_s = lambda_s
        self.base_width = base_width
        self.depth = depth
        self.max_width = max_width
        self.convs_per_level = convs_per_level
        self.downsample = downsample
        self.intensity_scale = intensity_scale
        self.crop_size = crop_size
        self.flip = flip
        self.teacher = teacher
        self.init_checkpoint = init_checkpoint
        self.warm_start = warm_start
        self.seed = seed
        self.out_dir = out_dir

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.base_width, self.depth, self.max_width,
                           self.convs_per_level, self.downsample)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr_initial=self.lr,
            lr_decay_epochs=tuple(self.lr_decay_epochs), lr_decay_factor=self.lr_decay_factor,
            seed=self.seed, mode=self.mode, crop_size=self.crop_size, flip=self.flip,
            intensity_scale=self.intensity_scale,
            loss_weights=LossWeights(self.lambda_rc, self.lambda_rp, self.lambda_p,
                                     self.lambda_w, self.lambda_s))

    def _initial_model(self) -> InterpolationModel:
        if self.warm_start and hasattr(self, "model_"):
            return self.model_
        if self.init_checkpoint is not None:
            return load_checkpoint(self.init_checkpoint, expected=self.model_config())
        return init_model(self.model_config(), self.seed)

    def _resolve_teacher(self, start: InterpolationModel) -> Optional[InterpolationModel]:
        teacher = self.teacher
        if teacher is None:
            return None
        if isinstance(teacher, str) and teacher == "self":
            return frozen_copy(start)
        if isinstance(teacher, CycleInterpolator):
            check_is_fitted(teacher, "model_")
            return teacher.model_
        if isinstance(teacher, InterpolationModel):
            return teacher
        return load_checkpoint(teacher)

    def fit(self, X, y=None, validation=None):
        config = self.train_config()
        if config.mode == "supervised" and isinstance(X, np.ndarray):
            data = check_frame_stack(X)
            if data.shape[1] < 3:
                raise ValueError("supervised windows need at least 3 frames")
        else:
            data = as_triplet_array(X)
        model = self._initial_model()
        teacher = self._resolve_teacher(model)
        if config.mode in TEACHER_MODES and teacher is None:
            raise ValueError(f"mode {config.mode!r} needs a teacher")
        trainer = Trainer(model, config, teacher=teacher, out_dir=self.out_dir,
                          validation=validation)
        trainer.fit(data)
        self.model_ = model
        self.history_ = trainer.state.history
        self.n_steps_ = trainer.state.step
        return self

    def predict(self, X, t=0.5, batch_size=32) -> np.ndarray:
        check_is_fitted(self, "model_")
        pairs = check_frame_stack(X, 2)
        t = check_time_value(t)
        self.model_.eval()
        out = []
        with torch.no_grad():
            for s in range(0, len(pairs), batch_size):
                chunk = pairs[s:s + batch_size]
                out.append(_to_nhwc(self.model_(_to_nchw(chunk[:, 0]), _to_nchw(chunk[:, 1]),
                                                t, clamp=True)))
        return np.concatenate(out)

    def interpolate(self, i0, i1, n: int) -> List[np.ndarray]:
        check_is_fitted(self, "model_")
        return interpolate_frames(self.model_, i0, i1, n)

    def score(self, X, y, t=0.5) -> float:
        """Mean PSNR of ``predict(X, t)`` against ``y``."""
        from .metrics import psnr
        pred = self.predict(X, t)
        y = np.asarray(y, dtype=np.float32)
        return float(np.mean([psnr(p, g) for p, g in zip(pred, y)]))

    def save(self, path) -> Path:
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_, step=getattr(self, "n_steps_", 0))
        return Path(path)

    @classmethod
    def load(cls, path, **params) -> "CycleInterpolator":
        model = load_checkpoint(path)
        c = model.config
        est = cls(**{"base_width": c.base_width, "depth": c.depth, "max_width": c.max_width,
                     "convs_per_level": c.convs_per_level, "downsample": c.downsample,
                     **params})
        est.model_ = model
        return est
