"""Loss assembly and the denoiser training loop.

The objective is a plain weighted sum: the noise-matching MSE, a geometric
reconstruction term computed on the clean-pose estimate implied by the
predicted noise, and a cross-entropy term for the emotion head.  All three
accept an optional per-frame exclusion mask so the variable-length strategy
(random proportional masks over each window) can drop frames from
supervision without changing batch shapes.

Every training step draws its batch indices, timesteps, noise, and masks
from a stream keyed by (seed, "train", step), so a run is replayable from
any checkpoint: resuming at step k consumes exactly the draws steps k+1..n
of an uninterrupted run would have.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, as_tensor, softmax
from .diffusion import ALPHA_BAR_FLOOR, NoiseSchedule
from .errors import ConfigError, ContractError, TrainingError
from .model import Condition, load_checkpoint, save_checkpoint
from .motion import DatasetStats, normalize, random_proportional_mask, window_starts
from .optim import Adam
from .rng import stream

REC_STABILIZER = 1e-24  # inside the sqrt of the per-frame norm


@dataclass(frozen=True)
class LossWeights:
    lambda_rec: float = 1.0
    use_rec: bool = True
    use_emotion: bool = True

    def __post_init__(self):
        if self.lambda_rec < 0:
            raise ConfigError(f"lambda_rec must be >= 0, got {self.lambda_rec}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    n_steps: int = 2000
    lr: float = 1e-4
    n_clip: int = 34
    stride: int = 10
    variable_length: bool = False
    vl_window: int = 150
    vl_stride: int = 50
    mask_ratio_range: tuple = (0.0, 0.5)
    mask_mode: str = "suffix"
    weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_every: int = 0  # 0 = final checkpoint only
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.n_clip < 2 or self.stride < 1 or self.vl_window < 2 or self.vl_stride < 1:
            raise ConfigError("window sizes must be >= 2 and strides >= 1")
        lo, hi = self.mask_ratio_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ConfigError(f"mask_ratio_range {self.mask_ratio_range} outside [0, 1]")
        object.__setattr__(self, "mask_ratio_range", (float(lo), float(hi)))
        if self.mask_mode not in ("suffix", "scatter"):
            raise ConfigError(f"unknown mask_mode {self.mask_mode!r}")
        if not isinstance(self.weights, LossWeights):
            object.__setattr__(self, "weights", LossWeights(**dict(self.weights)))

    @property
    def window(self):
        return self.vl_window if self.variable_length else self.n_clip

    @property
    def window_stride(self):
        return self.vl_stride if self.variable_length else self.stride

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        d = dict(d)
        if "mask_ratio_range" in d:
            d["mask_ratio_range"] = tuple(d["mask_ratio_range"])
        if "weights" in d and not isinstance(d["weights"], LossWeights):
            d["weights"] = LossWeights(**dict(d["weights"]))
        return cls(**d)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _frame_weights(frame_mask, batch, n_frames):
    """Boolean exclusion mask -> float weights (batch, n_frames); None -> all ones."""
    if frame_mask is None:
        return np.ones((batch, n_frames))
    mask = np.asarray(frame_mask, dtype=bool)
    if mask.ndim == 1:
        mask = np.broadcast_to(mask, (batch, mask.shape[0]))
    if mask.shape != (batch, n_frames):
        raise ContractError(
            f"frame mask shape {mask.shape} does not cover a ({batch}, {n_frames}) batch"
        )
    w = 1.0 - mask.astype(np.float64)
    if w.sum() == 0:
        raise ContractError("every frame is masked; nothing left to supervise")
    return w


def _as_batched(x):
    t = as_tensor(x)
    if t.data.ndim == 3:
        t = t.reshape((1,) + t.data.shape)
    if t.data.ndim != 4:
        raise ContractError(f"expected (batch, frames, joints, 3) data, got {t.data.shape}")
    return t


def loss_mse(eps, eps_hat, frame_mask=None):
    """Mean squared error over unmasked frames (all channels)."""
    keep_tensor = isinstance(eps, Tensor) or isinstance(eps_hat, Tensor)
    a, b = _as_batched(eps), _as_batched(eps_hat)
    if a.data.shape != b.data.shape:
        raise ContractError(f"shape mismatch {a.data.shape} vs {b.data.shape}")
    batch, n, j, _ = a.data.shape
    w = _frame_weights(frame_mask, batch, n)
    diff = b - a
    total = (diff * diff * w.reshape(batch, n, 1, 1)).sum()
    out = total * (1.0 / (w.sum() * j * 3))
    return out if keep_tensor else float(out.data)


def loss_rec(x0, x0_hat, frame_mask=None):
    """Mean over unmasked frames of the per-frame L2 pose-difference norm."""
    keep_tensor = isinstance(x0, Tensor) or isinstance(x0_hat, Tensor)
    a, b = _as_batched(x0), _as_batched(x0_hat)
    if a.data.shape != b.data.shape:
        raise ContractError(f"shape mismatch {a.data.shape} vs {b.data.shape}")
    batch, n, _, _ = a.data.shape
    w = _frame_weights(frame_mask, batch, n)
    diff = b - a
    sq = (diff * diff).sum(axis=(2, 3))  # (batch, n)
    norms = (sq + REC_STABILIZER).sqrt()
    out = (norms * w).sum() * (1.0 / w.sum())
    return out if keep_tensor else float(out.data)


def loss_ce(logits, label):
    """Mean negative log softmax probability of the true label(s)."""
    keep_tensor = isinstance(logits, Tensor)
    lg = as_tensor(logits)
    if lg.data.ndim == 1:
        lg = lg.reshape((1, lg.data.shape[0]))
    batch, n_classes = lg.data.shape
    labels = np.atleast_1d(np.asarray(label, dtype=int))
    if labels.shape != (batch,):
        raise ContractError(f"{labels.shape[0]} labels for a batch of {batch}")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ContractError(f"labels {labels} outside [0, {n_classes})")
    onehot = np.zeros((batch, n_classes))
    onehot[np.arange(batch), labels] = 1.0
    out = (softmax(lg).log() * onehot).sum() * (-1.0 / batch)
    return out if keep_tensor else float(out.data)


def _scalar(part):
    return float(part.data) if isinstance(part, Tensor) else float(part)


def total_loss(mse, rec, ce, weights: LossWeights = LossWeights()):
    """Weighted sum of the active terms; rejects non-finite parts."""
    parts = [("mse", mse)]
    if weights.use_rec:
        parts.append(("rec", rec))
    if weights.use_emotion:
        parts.append(("ce", ce))
    for name, part in parts:
        if part is None or not np.isfinite(_scalar(part)):
            raise TrainingError(f"loss term {name} is missing or non-finite")
    out = mse
    if weights.use_rec:
        out = out + rec * weights.lambda_rec
    if weights.use_emotion:
        out = out + ce
    return out


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainingItem:
    x0: np.ndarray      # normalized pose window (n, J, 3)
    audio: np.ndarray   # aligned feature window (n, d_audio)
    emotion: int
    speaker: int


def build_training_items(samples, stats: DatasetStats, n_clip, stride):
    """Window every sample into fixed-length normalized training items."""
    items = []
    for s in samples:
        norm = normalize(s.motion, stats)
        for off in window_starts(s.motion.n_frames, n_clip, stride):
            items.append(
                TrainingItem(
                    x0=norm.frames[off : off + n_clip].copy(),
                    audio=s.audio.features[off : off + n_clip].copy(),
                    emotion=s.emotion,
                    speaker=s.speaker,
                )
            )
    return items


@dataclass
class TrainResult:
    rows: list
    stats: DatasetStats
    checkpoints: list
    final_checkpoint: str


LOG_COLUMNS = ("step", "L_mse", "L_rec", "L_ce", "total")


def write_loss_log(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow(
                [row["step"]] + [repr(float(row[c])) for c in LOG_COLUMNS[1:]]
            )


def read_loss_log(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            {
                "step": int(r["step"]),
                **{c: float(r[c]) for c in LOG_COLUMNS[1:]},
            }
            for r in reader
        ]


def _optimizer_arrays(opt: Adam):
    state = opt.state_dict()
    arrays = {"opt.t": np.array([float(state["t"])])}
    for name, arr in state["m"].items():
        arrays[f"opt.m.{name}"] = arr
    for name, arr in state["v"].items():
        arrays[f"opt.v.{name}"] = arr
    return arrays


def _restore_optimizer(opt: Adam, extra):
    if "opt.t" not in extra:
        raise TrainingError("checkpoint lacks optimizer state; cannot resume")
    state = {"t": int(extra["opt.t"][0]), "m": {}, "v": {}}
    for key, arr in extra.items():
        if key.startswith("opt.m."):
            state["m"][key[len("opt.m.") :]] = arr
        elif key.startswith("opt.v."):
            state["v"][key[len("opt.v.") :]] = arr
    opt.load_state_dict(state)


def train(model, samples, schedule: NoiseSchedule, config: TrainConfig,
          out_dir=None, resume_from=None) -> TrainResult:
    """Run the denoising objective over windowed samples.

    ``samples`` is a list of corpus samples (the training split).  When
    ``resume_from`` names a checkpoint written by a previous call with the
    same configs, training continues from its recorded step and reproduces
    the uninterrupted trajectory exactly.
    """
    weights = config.weights
    start_step = 0
    stats = None
    if resume_from is not None:
        bundle = load_checkpoint(resume_from, expect_config=model.config)
        for name, param in model.params().items():
            param.data = bundle.model.params()[name].data.copy()
        stats = bundle.stats
        start_step = int(bundle.meta.get("step", 0))
        if start_step >= config.n_steps:
            raise ConfigError(
                f"checkpoint already at step {start_step} >= n_steps {config.n_steps}"
            )
    if not samples:
        raise ContractError("training needs a non-empty sample list")
    if stats is None:
        stats = DatasetStats.compute([s.motion.channels() for s in samples])
    items = build_training_items(samples, stats, config.window, config.window_stride)
    if not items:
        raise TrainingError(
            f"no training windows: clips shorter than window {config.window}"
        )

    opt = Adam(model.params(), lr=config.lr)
    if resume_from is not None:
        _restore_optimizer(opt, bundle.extra_arrays)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    def save(step, name):
        path = out_dir / name
        save_checkpoint(
            model,
            path,
            stats=stats,
            meta={"step": step, "train_config": config.to_dict()},
            extra_arrays=_optimizer_arrays(opt),
        )
        return str(path)

    rows = []
    checkpoints = []
    n_joints = items[0].x0.shape[1]
    for step in range(start_step + 1, config.n_steps + 1):
        rng = stream(config.seed, "train", step)
        idx = rng.integers(0, len(items), size=config.batch_size)
        batch = [items[i] for i in idx]
        x0 = np.stack([b.x0 for b in batch])
        audio = np.stack([b.audio for b in batch])
        labels = np.array([b.emotion for b in batch], dtype=int)
        speakers = np.array([b.speaker for b in batch], dtype=int)
        n = x0.shape[1]

        t = rng.integers(1, schedule.n_steps + 1, size=config.batch_size)
        eps = rng.normal(size=x0.shape)
        abar = schedule.alpha_bar[t - 1].reshape(-1, 1, 1, 1)
        x_t = np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps

        mask = None
        if config.variable_length:
            mask = np.stack([
                random_proportional_mask(n, config.mask_ratio_range, rng,
                                         mode=config.mask_mode)
                for _ in range(config.batch_size)
            ])

        cond_labels = labels if weights.use_emotion else np.zeros_like(labels)
        cond = Condition(audio=audio, emotion_label=cond_labels, speaker=speakers)
        eps_hat, logits, _ = model.forward(x_t, t, cond)

        l_mse = loss_mse(eps, eps_hat, mask)
        safe_abar = np.maximum(abar, ALPHA_BAR_FLOOR)
        x0_hat = (as_tensor(x_t) - eps_hat * np.sqrt(1.0 - safe_abar)) * (
            1.0 / np.sqrt(safe_abar)
        )
        l_rec = loss_rec(as_tensor(x0), x0_hat, mask) if weights.use_rec else None
        l_ce = loss_ce(logits, labels) if weights.use_emotion else None
        total = total_loss(l_mse, l_rec, l_ce, weights)

        opt.zero_grad()
        total.backward()
        opt.step()

        rows.append({
            "step": step,
            "L_mse": float(l_mse.data),
            "L_rec": float(l_rec.data) if l_rec is not None else 0.0,
            "L_ce": float(l_ce.data) if l_ce is not None else 0.0,
            "total": float(total.data),
        })
        if (
            out_dir is not None
            and config.checkpoint_every
            and step % config.checkpoint_every == 0
            and step < config.n_steps
        ):
            checkpoints.append(save(step, f"checkpoint_{step:06d}.ckpt"))

    final = None
    if out_dir is not None:
        final = save(config.n_steps, "checkpoint_final.ckpt")
        checkpoints.append(final)
        write_loss_log(rows, out_dir / "loss_log.csv")
    return TrainResult(rows=rows, stats=stats, checkpoints=checkpoints,
                       final_checkpoint=final)


def validation_losses(model, samples, schedule: NoiseSchedule,
                      config: TrainConfig, stats: DatasetStats) -> dict:
    """Forward-only loss snapshot over a held-out split.

    Mirrors one training step per batch (same noising, same masking regime)
    but draws from a dedicated stream and never touches the parameters, so
    the same model and split always produce the same numbers.
    """
    if not samples:
        raise ContractError("validation needs at least one sample")
    items = build_training_items(samples, stats, config.window,
                                 config.window_stride)
    if not items:
        raise ContractError(
            f"no validation windows of length {config.window} available"
        )
    weights = config.weights
    sums = dict.fromkeys(("L_mse", "L_rec", "L_ce", "total"), 0.0)
    count = 0
    for chunk, off in enumerate(range(0, len(items), config.batch_size)):
        batch = items[off : off + config.batch_size]
        rng = stream(config.seed, "val", chunk)
        x0 = np.stack([b.x0 for b in batch])
        audio = np.stack([b.audio for b in batch])
        labels = np.array([b.emotion for b in batch], dtype=int)
        speakers = np.array([b.speaker for b in batch], dtype=int)
        b, n = x0.shape[0], x0.shape[1]

        t = rng.integers(1, schedule.n_steps + 1, size=b)
        eps = rng.normal(size=x0.shape)
        abar = schedule.alpha_bar[t - 1].reshape(-1, 1, 1, 1)
        x_t = np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps
        mask = None
        if config.variable_length:
            mask = np.stack([
                random_proportional_mask(n, config.mask_ratio_range, rng,
                                         mode=config.mask_mode)
                for _ in range(b)
            ])

        cond_labels = labels if weights.use_emotion else np.zeros_like(labels)
        cond = Condition(audio=audio, emotion_label=cond_labels, speaker=speakers)
        eps_hat, logits, _ = model.forward(x_t, t, cond)

        l_mse = loss_mse(eps, eps_hat, mask)
        safe_abar = np.maximum(abar, ALPHA_BAR_FLOOR)
        x0_hat = (as_tensor(x_t) - eps_hat * np.sqrt(1.0 - safe_abar)) * (
            1.0 / np.sqrt(safe_abar)
        )
        l_rec = loss_rec(as_tensor(x0), x0_hat, mask) if weights.use_rec else None
        l_ce = loss_ce(logits, labels) if weights.use_emotion else None
        total = total_loss(l_mse, l_rec, l_ce, weights)

        sums["L_mse"] += float(l_mse.data) * b
        sums["L_rec"] += float(l_rec.data) * b if l_rec is not None else 0.0
        sums["L_ce"] += float(l_ce.data) * b if l_ce is not None else 0.0
        sums["total"] += float(total.data) * b
        count += b
    return {k: v / count for k, v in sums.items()}


def smoothed(values, window=101):
    """Centered moving average used for smoke-test loss comparisons."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return v
    window = min(window, v.size)
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")
