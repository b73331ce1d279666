"""Clips, triplets, evaluation windows, frame I/O and a synthetic motion generator."""
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .exceptions import IngestionError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass
class Clip:
    frames: List[np.ndarray]
    fps: float = 30.0
    source_id: str = ""
    # analytic renderer for synthetic clips: scene.render(time) -> frame
    scene: Optional["SyntheticScene"] = field(default=None, repr=False, compare=False)
    # time of each frame in scene units (frame index of the dense clip)
    times: Optional[List[float]] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    def __len__(self):
        return len(self.frames)


@dataclass
class Triplet:
    i0: np.ndarray
    i1: np.ndarray
    i2: np.ndarray

    def __post_init__(self):
        if not (self.i0.shape == self.i1.shape == self.i2.shape):
            raise ValueError("triplet frames must share dimensions")

    def stack(self) -> np.ndarray:
        return np.stack([self.i0, self.i1, self.i2])


@dataclass
class EvalClip:
    input_first: np.ndarray
    input_last: np.ndarray
    ground_truth: List[np.ndarray]
    clip_id: str = ""

    @property
    def n(self) -> int:
        return len(self.ground_truth)


def temporal_subsample(clip: Clip, factor: int) -> Clip:
    """Keep frames ``0, factor, 2 * factor, ...``; the frame rate drops by ``factor``."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"subsampling factor must be an integer >= 1, got {factor}")
    times = clip.times[::factor] if clip.times is not None else None
    return replace(clip, frames=list(clip.frames[::factor]), fps=clip.fps / factor, times=times)


def make_triplets(clip: Clip, stride: int = 1) -> List[Triplet]:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    f = clip.frames
    return [Triplet(f[k], f[k + 1], f[k + 2]) for k in range(0, len(f) - 2, stride)]


def make_eval_clips(clip: Clip, n_intermediate: int) -> List[EvalClip]:
    """Non-overlapping windows of ``n + 2`` frames; the ends are the inputs."""
    if n_intermediate < 1:
        raise ValueError("n_intermediate must be >= 1")
    size = n_intermediate + 2
    out = []
    for w, start in enumerate(range(0, len(clip.frames) - size + 1, size)):
        window = clip.frames[start:start + size]
        out.append(EvalClip(window[0], window[-1], list(window[1:-1]),
                            clip_id=f"{clip.source_id}#{w}"))
    return out


def triplets_to_array(triplets: Sequence[Triplet]) -> np.ndarray:
    """``(N, 3, H, W, 3)`` float32 array."""
    if not triplets:
        raise ValueError("no triplets")
    return np.stack([t.stack() for t in triplets]).astype(np.float32)


def windows_to_array(eval_clips: Sequence[EvalClip]) -> np.ndarray:
    """``(N, n + 2, H, W, 3)`` array of full windows, for supervised training."""
    if not eval_clips:
        raise ValueError("no windows")
    return np.stack([np.stack([c.input_first, *c.ground_truth, c.input_last])
                     for c in eval_clips]).astype(np.float32)


# --- frame I/O ---------------------------------------------------------------

def _quantize(frame):
    return np.clip(np.rint(np.asarray(frame, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_frames(clip: Clip, dir_path, start_index: int = 0, digits: int = 6) -> List[Path]:
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, frame in enumerate(clip.frames):
        p = d / f"{start_index + k:0{digits}d}.png"
        Image.fromarray(_quantize(frame), mode="RGB").save(p)
        paths.append(p)
    return paths


def load_frames(dir_path, pattern: str = "*", fps: float = 30.0) -> Clip:
    d = Path(dir_path)
    if not d.is_dir():
        raise IngestionError(f"not a directory: {d}")
    files = sorted(p for p in d.glob(pattern)
                   if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise IngestionError(f"no image files matching {pattern!r} in {d}")
    frames = []
    for p in files:
        try:
            with Image.open(p) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        except OSError as exc:
            raise IngestionError(f"unreadable image {p}: {exc}") from exc
        if frames and arr.shape != frames[0].shape:
            raise IngestionError(
                f"inconsistent frame size in {d}: {p.name} is {arr.shape[:2]}, "
                f"expected {frames[0].shape[:2]}")
        frames.append(arr)
    return Clip(frames, fps=fps, source_id=d.name)


def read_manifest(path) -> List[Path]:
    """Clip directories listed one per line; relative entries resolve against the manifest."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise IngestionError(f"cannot read manifest {path}: {exc}") from exc
    out = []
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        p = Path(line)
        out.append(p if p.is_absolute() else path.parent / p)
    return out


def load_dataset(path, fps: float = 30.0) -> List[Clip]:
    """Load clips from a manifest file, a directory of clip directories, or one clip directory."""
    path = Path(path)
    if path.is_file():
        dirs = read_manifest(path)
    elif path.is_dir():
        subdirs = sorted(p for p in path.iterdir() if p.is_dir())
        dirs = subdirs or [path]
    else:
        raise IngestionError(f"dataset path does not exist: {path}")
    return [load_frames(d, fps=fps) for d in dirs]


# --- synthetic motion ----------------------------------------------------------

@dataclass(frozen=True)
class MotionSpec:
    """Scene statistics for the synthetic generator.

    ``speed`` bounds are in pixels per generated frame. ``kind`` is one of
    ``translate`` (global shift), ``rotate`` (rotation about the centre) or
    ``mixed`` (a translating foreground disc over a translating background).
    Textures combine hard-edged ellipses, Gaussian blobs and gratings.
    """
    kind: str = "translate"
    speed: Tuple[float, float] = (1.0, 4.0)
    angular_speed: Tuple[float, float] = (0.5, 3.0)  # degrees per frame
    n_shapes: int = 90
    shape_radius: Tuple[float, float] = (2.0, 10.0)
    edge_width: float = 0.7
    n_blobs: int = 8
    blob_sigma: Tuple[float, float] = (2.0, 8.0)
    n_gratings: int = 2
    grating_period: Tuple[float, float] = (8.0, 24.0)
    fg_radius: Tuple[float, float] = (8.0, 16.0)

    def __post_init__(self):
        if self.kind not in ("translate", "rotate", "mixed"):
            raise ValueError(f"unknown motion kind {self.kind!r}")


def _wrap(d, period):
    return (d + period / 2) % period - period / 2


class Texture:
    """Random colour field defined on the whole plane.

    Content repeats with period ``3 * extent`` so moving views never run out.
    """

    def __init__(self, rng: np.random.Generator, spec: MotionSpec, extent: float):
        self.period = 3 * extent
        self.edge = spec.edge_width
        self.base = rng.uniform(0.2, 0.8, size=3)
        self.shapes = [(rng.uniform(0, self.period, size=2), rng.uniform(*spec.shape_radius, size=2),
                        rng.uniform(0, np.pi), rng.uniform(0.05, 0.95, size=3))
                       for _ in range(spec.n_shapes)]
        self.blobs = [(rng.uniform(0, self.period, size=2), rng.uniform(*spec.blob_sigma),
                       rng.uniform(-0.3, 0.3, size=3)) for _ in range(spec.n_blobs)]
        self.gratings = []
        for _ in range(spec.n_gratings):
            ang = rng.uniform(0, np.pi)
            k = 2 * np.pi / rng.uniform(*spec.grating_period)
            self.gratings.append((k * np.cos(ang), k * np.sin(ang), rng.uniform(0, 2 * np.pi),
                                  rng.uniform(-0.06, 0.06, size=3)))

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        out = np.broadcast_to(self.base, x.shape + (3,)).copy()
        p = self.period
        for (cx, cy), (rx, ry), ang, color in self.shapes:
            dx, dy = _wrap(x - cx, p), _wrap(y - cy, p)
            u = np.cos(ang) * dx + np.sin(ang) * dy
            v = -np.sin(ang) * dx + np.cos(ang) * dy
            # signed distance approximation in pixels, then an anti-aliased edge
            dist = (np.sqrt((u / rx) ** 2 + (v / ry) ** 2) - 1.0) * min(rx, ry)
            alpha = 0.5 * (1.0 - np.tanh(dist / self.edge))
            out += alpha[..., None] * (color - out)
        for (cx, cy), s, color in self.blobs:
            dx, dy = _wrap(x - cx, p), _wrap(y - cy, p)
            out += np.exp(-(dx * dx + dy * dy) / (2 * s * s))[..., None] * color
        for kx, ky, ph, color in self.gratings:
            out += np.sin(kx * x + ky * y + ph)[..., None] * color
        return out


class SyntheticScene:
    """Constant-velocity scene that can be rendered at any real-valued time."""

    def __init__(self, rng: np.random.Generator, spec: MotionSpec, size: Tuple[int, int]):
        self.spec = spec
        self.size = size
        h, w = size
        self.background = Texture(rng, spec, max(h, w))

        def velocity(bounds):
            speed = rng.uniform(*bounds)
            ang = rng.uniform(0, 2 * np.pi)
            return np.array([speed * np.cos(ang), speed * np.sin(ang)])

        self.velocity = velocity(spec.speed)
        self.omega = np.deg2rad(rng.uniform(*spec.angular_speed)) * rng.choice([-1, 1])
        if spec.kind == "mixed":
            self.foreground = Texture(rng, spec, max(h, w))
            self.fg_velocity = velocity(spec.speed)
            self.fg_center = np.array([rng.uniform(0.3, 0.7) * w, rng.uniform(0.3, 0.7) * h])
            self.fg_radius = rng.uniform(*spec.fg_radius)

    def render(self, time: float) -> np.ndarray:
        h, w = self.size
        y, x = np.mgrid[0:h, 0:w].astype(np.float64)
        kind = self.spec.kind
        if kind == "rotate":
            cx, cy = (w - 1) / 2, (h - 1) / 2
            a = -self.omega * time
            xs = np.cos(a) * (x - cx) - np.sin(a) * (y - cy) + cx
            ys = np.sin(a) * (x - cx) + np.cos(a) * (y - cy) + cy
            img = self.background(xs, ys)
        else:
            vx, vy = self.velocity * time
            img = self.background(x - vx, y - vy)
        if kind == "mixed":
            fx, fy = self.fg_velocity * time
            fg = self.foreground(x - fx, y - fy)
            cx, cy = self.fg_center + self.fg_velocity * time
            dist = np.hypot(x - cx, y - cy)
            alpha = 1.0 / (1.0 + np.exp(np.clip((dist - self.fg_radius) / 0.5, -50, 50)))
            img = alpha[..., None] * fg + (1 - alpha[..., None]) * img
        return np.clip(img, 0.0, 1.0).astype(np.float32)


def synthetic_motion_dataset(seed: int, count: int, size=(64, 64), motion_spec=None,
                             length: int = 9, fps: float = 240.0) -> List[Clip]:
    """``count`` clips of ``length`` frames of textured patterns under constant motion.

    Every clip keeps its scene, so ground truth at fractional times is
    ``clip.scene.render(clip.times[k] + s)``. Deterministic per seed.
    """
    spec = motion_spec or MotionSpec()
    if isinstance(size, int):
        size = (size, size)
    root = np.random.SeedSequence(seed)
    clips = []
    for i, child in enumerate(root.spawn(count)):
        scene = SyntheticScene(np.random.default_rng(child), spec, tuple(size))
        times = [float(k) for k in range(length)]
        frames = [scene.render(k) for k in times]
        clips.append(Clip(frames, fps=fps, source_id=f"synthetic-{seed}-{i:05d}",
                          scene=scene, times=times))
    return clips


def rendered_eval_clips(clips: Sequence[Clip], n: int = 1) -> List[EvalClip]:
    """One EvalClip per consecutive frame pair of each synthetic clip, with
    ``n`` intermediate ground-truth frames rendered analytically."""
    out = []
    for clip in clips:
        if clip.scene is None or clip.times is None:
            raise ValueError("rendered ground truth needs a synthetic clip")
        for k in range(len(clip.frames) - 1):
            t0, t1 = clip.times[k], clip.times[k + 1]
            gt = [clip.scene.render(t0 + (t1 - t0) * i / (n + 1)) for i in range(1, n + 1)]
            out.append(EvalClip(clip.frames[k], clip.frames[k + 1], gt,
                                clip_id=f"{clip.source_id}@{k}"))
    return out


def random_crop_flip(batch: np.ndarray, crop: Optional[int], flip: bool,
                     rng: np.random.Generator) -> np.ndarray:
    """Per-sample crop and horizontal flip, shared across the frames of a sample.

    ``batch`` is ``(N, L, H, W, 3)``.
    """
    n, _, h, w, _ = batch.shape
    out = []
    for sample in batch:
        if crop is not None and (h > crop or w > crop):
            ch, cw = min(crop, h), min(crop, w)
            y = int(rng.integers(0, h - ch + 1))
            x = int(rng.integers(0, w - cw + 1))
            sample = sample[:, y:y + ch, x:x + cw]
        if flip and rng.random() < 0.5:
            sample = sample[:, :, ::-1]
        out.append(sample)
    return np.ascontiguousarray(np.stack(out))


def data_root() -> Optional[Path]:
    root = os.environ.get("VFI_DATA_ROOT")
    return Path(root) if root else None
