"""Optimization loop for cycle-consistency training, pseudo-supervised
fine-tuning, supervised baselines and the long-step ablation."""
import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, List, NamedTuple, Optional, Sequence

import numpy as np
import torch

from .data import EvalClip, random_crop_flip
from .exceptions import ConfigurationError
from .losses import (LossBreakdown, LossWeights, RandomConvFeatures, cycle_reconstruction_loss,
                     l1, pair_warping_loss, perceptual_loss, pseudo_supervised_loss,
                     smoothness_loss, total_loss, warping_loss)
from .model import (InterpolationModel, ModelConfig, SynthesisResult, model_from_payload,
                    read_checkpoint, save_checkpoint)

logger = logging.getLogger(__name__)

MODES = ("cc_only", "cc_plus_ps", "ps_only", "supervised", "long_step", "cc_plus_long_step")
TEACHER_MODES = ("cc_plus_ps", "ps_only")
TIME_EPS = 1e-3


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    lr_initial: float = 1e-4
    lr_decay_epochs: tuple = (30, 54)
    lr_decay_factor: float = 10.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 0.0
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    mode: str = "cc_only"
    crop_size: Optional[int] = 64
    flip: bool = True
    checkpoint_every: int = 1
    feature_seed: int = 0
    # image-domain L1 terms are measured on frames scaled to [0, intensity_scale];
    # the default weights balance photometric and flow-smoothness terms at 8-bit scale
    intensity_scale: float = 255.0

    def __post_init__(self):
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        problems = []
        if self.epochs <= 0:
            problems.append("epochs must be > 0")
        if self.batch_size <= 0:
            problems.append("batch_size must be > 0")
        if not self.lr_initial > 0:
            problems.append("lr_initial must be > 0")
        d = self.lr_decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])):
            problems.append("lr_decay_epochs must be strictly increasing")
        if d and (d[0] < 1 or d[-1] >= self.epochs):
            problems.append("lr_decay_epochs must lie in [1, epochs)")
        if not (math.isfinite(self.intensity_scale) and self.intensity_scale > 0):
            problems.append("intensity_scale must be finite and > 0")
        if self.lr_decay_factor <= 0:
            problems.append("lr_decay_factor must be > 0")
        if self.crop_size is not None and (not isinstance(self.crop_size, int) or self.crop_size < 1):
            problems.append(f"crop_size must be a positive integer or null, got {self.crop_size!r}")
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}, got {self.mode!r}")
        if problems:
            raise ConfigurationError("; ".join(problems))

    @classmethod
    def full_schedule(cls, **overrides) -> "TrainConfig":
        """The full-length schedule: 500 epochs, decays after 250 and 450."""
        return cls(**{"epochs": 500, "lr_decay_epochs": (250, 450), "batch_size": 32,
                      **overrides})

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        """Build from a flat mapping; ``lambda_*`` keys go into the loss weights."""
        d = dict(d)
        names = {f.name for f in fields(cls)}
        weights = asdict(LossWeights())
        if isinstance(d.get("loss_weights"), dict):
            weights.update(d.pop("loss_weights"))
        for k in list(d):
            if k in weights:
                weights[k] = float(d.pop(k))
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d, loss_weights=LossWeights(**weights))
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        weights = d.pop("loss_weights")
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        d.update(weights)
        return d


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Piecewise-constant rate for a 1-based epoch index.

    The rate drops by ``lr_decay_factor`` for each decay epoch already
    completed, i.e. epoch 251 is the first epoch run at the reduced rate
    when decaying after 250.
    """
    drops = sum(1 for e in config.lr_decay_epochs if epoch > e)
    return config.lr_initial / config.lr_decay_factor ** drops


def sample_time(rng: np.random.Generator, n: Optional[int] = None, eps: float = TIME_EPS):
    """Uniform time in ``(eps, 1 - eps)``: one scalar, or ``n`` of them."""
    return rng.uniform(eps, 1.0 - eps, size=n)


class CyclePassResult(NamedTuple):
    hidden_t: SynthesisResult       # M(I0, I1, t)
    hidden_t1: SynthesisResult      # M(I1, I2, t)
    cycle: Optional[SynthesisResult]  # M(Î_t, Î_{t+1}, 1 - t)
    t: torch.Tensor

    @property
    def i_hat_t(self):
        return self.hidden_t.frame

    @property
    def i_hat_t1(self):
        return self.hidden_t1.frame

    @property
    def i_hat_1(self):
        return None if self.cycle is None else self.cycle.frame


def _time_arg(t, like):
    return torch.as_tensor(t, dtype=like.dtype, device=like.device)


def cycle_pass(model, i0, i1, i2, t, reconstruct: bool = True) -> CyclePassResult:
    """Interpolate both halves at ``t``, then interpolate back at ``1 - t``.

    ``model`` is an :class:`InterpolationModel` or any callable
    ``model(a, b, s)``; for plain callables only the frames are populated.
    """
    t = _time_arg(t, i0)
    if isinstance(model, InterpolationModel):
        a = model.synthesize(i0, i1, t)
        b = model.synthesize(i1, i2, t)
        c = model.synthesize(a.frame, b.frame, 1 - t) if reconstruct else None
    else:
        def wrap(frame):
            return SynthesisResult(frame, *([None] * 6))
        a = wrap(model(i0, i1, t))
        b = wrap(model(i1, i2, t))
        c = wrap(model(a.frame, b.frame, 1 - t)) if reconstruct else None
    return CyclePassResult(a, b, c, t)


def _zero(like):
    return like.new_zeros(())


class Objective:
    """Assembles the weighted loss for one batch according to the training mode."""

    def __init__(self, config: TrainConfig, teacher: Optional[InterpolationModel] = None,
                 feature_extractor=None):
        if config.mode in TEACHER_MODES and teacher is None:
            raise ConfigurationError(f"mode {config.mode!r} needs a frozen teacher")
        self.config = config
        self.teacher = teacher
        self.psi = feature_extractor or RandomConvFeatures(seed=config.feature_seed)
        self.cycle_reconstructions = 0

    def __call__(self, model, batch: torch.Tensor, t, weights: LossWeights) -> LossBreakdown:
        mode = self.config.mode
        if mode == "supervised":
            return self._supervised(model, batch, t, weights)
        if batch.shape[1] != 3:
            raise ConfigurationError(f"mode {mode!r} trains on triplets, got windows of {batch.shape[1]}")
        i0, i1, i2 = batch[:, 0], batch[:, 1], batch[:, 2]
        if mode == "long_step":
            return self._long_step(model, i0, i1, i2, weights)

        use_cc = mode != "ps_only"
        use_ps = mode in TEACHER_MODES and weights.lambda_rp > 0
        if not use_cc:
            weights = replace(weights, lambda_rc=0.0, lambda_p=0.0)
        if mode == "cc_only":
            weights = replace(weights, lambda_rp=0.0)
        cp = cycle_pass(model, i0, i1, i2, t, reconstruct=use_cc)
        zero = _zero(i0)
        rc = p = rp = zero
        if use_cc:
            self.cycle_reconstructions += i0.shape[0]
            rc = cycle_reconstruction_loss(cp.i_hat_1, i1)
            if weights.lambda_p > 0:
                p = perceptual_loss(cp.i_hat_1, i1, self.psi)
        if use_ps:
            with torch.no_grad():
                teacher_t = self.teacher(i0, i1, cp.t)
                teacher_t1 = self.teacher(i1, i2, cp.t)
            rp = pseudo_supervised_loss(cp.i_hat_t, cp.i_hat_t1, teacher_t, teacher_t1)
        w = s = zero
        a, b = cp.hidden_t, cp.hidden_t1
        if weights.lambda_w > 0 or weights.lambda_s > 0:
            f_t_t1, f_t1_t = model.estimate_bidirectional_flow(a.frame, b.frame)
            w = warping_loss(i0, i1, i2, a.flow_10, a.flow_01, b.flow_10, b.flow_01,
                             a.frame, b.frame, f_t_t1, f_t1_t)
            s = smoothness_loss(f_t_t1, f_t1_t, a.flow_01, a.flow_10, b.flow_01, b.flow_10)
        if mode == "cc_plus_long_step":
            rc = rc + l1(model(i0, i2, 0.5), i1)
        k = self.config.intensity_scale
        return total_loss(k * rc, k * rp, p, k * w, s, weights)

    def _long_step(self, model, i0, i1, i2, weights):
        res = model.synthesize(i0, i2, 0.5)
        rc = l1(res.frame, i1)
        w = pair_warping_loss(i0, i2, res.flow_01, res.flow_10)
        s = smoothness_loss(res.flow_01, res.flow_10)
        zero = _zero(i0)
        k = self.config.intensity_scale
        return total_loss(k * rc, zero, zero, k * w, s, replace(weights, lambda_rp=0.0, lambda_p=0.0))

    def _supervised(self, model, batch, t_index, weights):
        """Direct L1 to a ground-truth intermediate frame of each window.

        ``t_index`` holds the per-sample index of the target frame.
        """
        first, last = batch[:, 0], batch[:, -1]
        span = batch.shape[1] - 1
        idx = torch.as_tensor(t_index, dtype=torch.long)
        target = batch[torch.arange(batch.shape[0]), idx]
        t = idx.to(batch.dtype) / span
        res = model.synthesize(first, last, t)
        rc = l1(res.frame, target)
        p = perceptual_loss(res.frame, target, self.psi) if weights.lambda_p > 0 else _zero(first)
        w = pair_warping_loss(first, last, res.flow_01, res.flow_10)
        s = smoothness_loss(res.flow_01, res.flow_10)
        k = self.config.intensity_scale
        return total_loss(k * rc, _zero(first), p, k * w, s, replace(weights, lambda_rp=0.0))


def to_tensor(batch: np.ndarray) -> torch.Tensor:
    """``(N, L, H, W, 3)`` array to ``(N, L, 3, H, W)`` float tensor."""
    return torch.from_numpy(np.ascontiguousarray(batch)).permute(0, 1, 4, 2, 3).float()


def make_optimizer(model, config: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=config.lr_initial,
                            betas=(config.adam_beta1, config.adam_beta2),
                            weight_decay=config.weight_decay)


def train_step(model, optimizer, objective: Objective, batch: torch.Tensor, t,
               weights: LossWeights) -> LossBreakdown:
    model.train()
    losses = objective(model, batch, t, weights)
    optimizer.zero_grad(set_to_none=True)
    losses.total.backward()
    optimizer.step()
    return LossBreakdown(**{k: v.detach() for k, v in vars(losses).items()})


def frozen_copy(model: InterpolationModel) -> InterpolationModel:
    teacher = copy.deepcopy(model)
    teacher.requires_grad_(False)
    return teacher.eval()


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    history: List[dict] = field(default_factory=list)


class Trainer:
    """Holds model, optimizer and random state; resumable from its checkpoints.

    ``dataset`` is a ``(N, L, H, W, 3)`` float array: triplets (``L == 3``) for
    the unsupervised modes, full windows for ``supervised``.
    """

    def __init__(self, model: InterpolationModel, config: TrainConfig, teacher=None,
                 out_dir=None, validation: Optional[Sequence[EvalClip]] = None,
                 weight_schedule: Optional[Callable[[int, LossWeights], LossWeights]] = None,
                 feature_extractor=None):
        self.model = model
        self.config = config
        self.teacher = frozen_copy(teacher) if teacher is not None else None
        self.objective = Objective(config, self.teacher, feature_extractor)
        self.optimizer = make_optimizer(model, config)
        self.rng = np.random.default_rng(config.seed)
        self.state = TrainState()
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.validation = validation
        self.weight_schedule = weight_schedule

    # -- persistence ---------------------------------------------------------
    @property
    def metrics_path(self):
        return self.out_dir / "metrics.jsonl" if self.out_dir else None

    def checkpoint_path(self, epoch=None):
        name = "latest.pt" if epoch is None else f"epoch_{epoch:04d}.pt"
        return self.out_dir / "checkpoints" / name

    def save(self, path):
        save_checkpoint(path, self.model, step=self.state.step, epoch=self.state.epoch,
                        optimizer=self.optimizer.state_dict(),
                        rng=self.rng.bit_generator.state,
                        train_config=self.config.to_dict(),
                        history=self.state.history)

    def resume(self, path) -> "Trainer":
        payload = read_checkpoint(path)
        restored = model_from_payload(payload, expected=self.model.config)
        self.model.load_state_dict(restored.state_dict())
        if "optimizer" in payload:
            self.optimizer.load_state_dict(payload["optimizer"])
        if "rng" in payload:
            self.rng.bit_generator.state = payload["rng"]
        self.state = TrainState(payload.get("epoch", 0), payload.get("step", 0),
                                list(payload.get("history", [])))
        return self

    # -- loop ----------------------------------------------------------------
    def _set_lr(self, lr):
        for g in self.optimizer.param_groups:
            g["lr"] = lr

    def _times(self, batch_len, window_len):
        if self.config.mode == "supervised":
            return self.rng.integers(1, window_len - 1, size=batch_len)
        return sample_time(self.rng, batch_len)

    def run_epoch(self, dataset: np.ndarray) -> dict:
        cfg = self.config
        epoch = self.state.epoch + 1
        lr = lr_schedule(epoch, cfg)
        self._set_lr(lr)
        weights = cfg.loss_weights
        if self.weight_schedule is not None:
            weights = self.weight_schedule(epoch, weights)
        order = self.rng.permutation(len(dataset))
        sums = {}
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            raw = random_crop_flip(dataset[idx], cfg.crop_size, cfg.flip, self.rng)
            t = self._times(len(idx), raw.shape[1])
            losses = train_step(self.model, self.optimizer, self.objective, to_tensor(raw), t, weights)
            self.state.step += 1
            n_batches += 1
            for k, v in losses.as_floats().items():
                sums[k] = sums.get(k, 0.0) + v
        self.state.epoch = epoch
        record = {"step": self.state.step, "epoch": epoch, "lr": lr}
        record.update({k: v / n_batches for k, v in sums.items()})
        if self.validation:
            from .metrics import evaluate
            record["val_psnr"] = evaluate(self.model, self.validation).means["psnr"]
        self.state.history.append(record)
        logger.info("epoch %d %s", epoch, record)
        return record

    def fit(self, dataset: np.ndarray, epochs: Optional[int] = None) -> "Trainer":
        """Run until ``config.epochs`` (or ``epochs`` more) have completed."""
        dataset = np.asarray(dataset, dtype=np.float32)
        if dataset.ndim != 5 or dataset.shape[-1] != 3:
            raise ConfigurationError(f"dataset must be (N, L, H, W, 3), got {dataset.shape}")
        if len(dataset) == 0:
            raise ConfigurationError("empty training set")
        stop = self.config.epochs if epochs is None else min(self.config.epochs,
                                                             self.state.epoch + epochs)
        while self.state.epoch < stop:
            record = self.run_epoch(dataset)
            if self.out_dir is not None:
                self.metrics_path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.metrics_path, "a") as fh:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")
                if self.state.epoch % self.config.checkpoint_every == 0 or self.state.epoch == stop:
                    self.save(self.checkpoint_path(self.state.epoch))
                    self.save(self.checkpoint_path())
        return self


def train(model: InterpolationModel, dataset: np.ndarray, config: TrainConfig, teacher=None,
          out_dir=None, validation=None, resume: bool = False, **kwargs) -> Trainer:
    """Train ``model`` in place; with ``resume`` continue from ``out_dir``'s latest checkpoint."""
    trainer = Trainer(model, config, teacher=teacher, out_dir=out_dir, validation=validation, **kwargs)
    if resume and out_dir is not None and trainer.checkpoint_path().exists():
        trainer.resume(trainer.checkpoint_path())
    return trainer.fit(dataset)


def finetune(pretrained, target_dataset: np.ndarray, config: TrainConfig,
             expected: Optional[ModelConfig] = None, **kwargs) -> Trainer:
    """Adapt a pre-trained model; the teacher is a frozen copy of the same weights."""
    if isinstance(pretrained, InterpolationModel):
        student = copy.deepcopy(pretrained)
    else:
        student = model_from_payload(read_checkpoint(pretrained), expected)
    return train(student, target_dataset, config, teacher=frozen_copy(student), **kwargs)


def init_model(config: Optional[ModelConfig] = None, seed: int = 0) -> InterpolationModel:
    torch.manual_seed(seed)
    return InterpolationModel(config)
