"""Study harnesses: emotion transfer, conditioning-mode comparison, ablations.

These orchestrate train/generate/evaluate cycles at small scale so the
qualitative claims — the label override steers generated style, every
conditioning mode trains, each ablated variant still converges — can be
checked end to end on the synthetic corpus.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .config import RunConfig, SampleConfig
from .errors import ConfigError, ContractError
from .metrics import train_extractor
from .model import GestureDenoiser
from .pipeline import evaluate, generate_motion
from .rng import stream
from .training import train


class GestureEmotionClassifier:
    """Nearest-class-mean classifier over simple motion statistics.

    Features are the per-channel time mean and time standard deviation of a
    sequence — enough to separate the synthetic emotions, which differ in
    resting posture and stroke amplitude.  Trained on real samples only, so
    it judges generated motion independently of the generative model.
    """

    def __init__(self):
        self.class_means = None
        self.feat_mean = None
        self.feat_scale = None
        self.labels = None

    @staticmethod
    def features(seq) -> np.ndarray:
        frames = seq.frames if hasattr(seq, "frames") else np.asarray(seq)
        flat = frames.reshape(frames.shape[0], -1)
        return np.concatenate([flat.mean(axis=0), flat.std(axis=0)])

    def fit(self, sequences, labels):
        if len(sequences) != len(labels) or not sequences:
            raise ContractError("need equally many sequences and labels")
        x = np.stack([self.features(s) for s in sequences])
        y = np.asarray(labels, dtype=int)
        self.feat_mean = x.mean(axis=0)
        self.feat_scale = np.maximum(x.std(axis=0), 1e-6)
        z = (x - self.feat_mean) / self.feat_scale
        self.labels = np.unique(y)
        self.class_means = np.stack([z[y == c].mean(axis=0) for c in self.labels])
        return self

    def predict(self, seq) -> int:
        if self.class_means is None:
            raise ContractError("classifier is not fitted")
        z = (self.features(seq) - self.feat_mean) / self.feat_scale
        dists = np.linalg.norm(self.class_means - z, axis=1)
        return int(self.labels[np.argmin(dists)])

    def accuracy(self, sequences, labels) -> float:
        preds = [self.predict(s) for s in sequences]
        return float(np.mean(np.asarray(preds) == np.asarray(labels)))


@dataclass
class TransferResult:
    accuracy: float
    confusion: np.ndarray  # rows: intended label, cols: predicted
    clips_per_emotion: int

    def summary(self) -> str:
        lines = [f"emotion transfer accuracy: {self.accuracy:.3f}"]
        for intended, row in enumerate(self.confusion):
            lines.append(f"  intended {intended}: predicted counts {row.tolist()}")
        return "\n".join(lines)


def emotion_transfer_eval(
    model: GestureDenoiser,
    classifier: GestureEmotionClassifier,
    audio_features,
    schedule,
    *,
    stats=None,
    sample_cfg=None,
    clips_per_emotion: int = 20,
    master_seed: int = 0,
) -> TransferResult:
    """Generate from one shared audio under every label override and classify.

    The audio is held fixed across emotions, so any systematic style change
    is attributable to the override alone.
    """
    sample_cfg = sample_cfg or SampleConfig()
    n_emotions = model.config.n_emotions
    confusion = np.zeros((n_emotions, n_emotions), dtype=int)
    for intended in range(n_emotions):
        for k in range(clips_per_emotion):
            seq = generate_motion(
                model, audio_features, schedule, stats=stats,
                sample_cfg=sample_cfg, emotion=intended,
                master_seed=master_seed, seed_labels=("transfer", intended, k),
            )
            confusion[intended, classifier.predict(seq)] += 1
    accuracy = float(np.trace(confusion)) / confusion.sum()
    return TransferResult(accuracy=accuracy, confusion=confusion,
                          clips_per_emotion=clips_per_emotion)


# ---------------------------------------------------------------------------
# comparative harnesses
# ---------------------------------------------------------------------------


def _train_and_score(run_cfg: RunConfig, splits, extractor, *, tag,
                     model_cfg=None, train_cfg=None, eval_samples=None):
    model_cfg = model_cfg or run_cfg.model
    train_cfg = train_cfg or run_cfg.training
    model = GestureDenoiser(model_cfg, stream(run_cfg.master_seed, "init", tag))
    result = train(model, splits.train, run_cfg.schedule.build(), train_cfg)
    samples = eval_samples if eval_samples is not None else splits.val
    report = evaluate(
        model, extractor, samples, run_cfg.schedule.build(),
        stats=result.stats, eval_cfg=run_cfg.evaluation,
        sample_cfg=run_cfg.sample, master_seed=run_cfg.master_seed,
    )
    return model, result, report


def compare_conditioning_modes(run_cfg: RunConfig, splits,
                               modes=("adaln", "in_context_token",
                                      "cross_attention"),
                               extractor=None, eval_samples=None) -> dict:
    """Train one model per conditioning mode under identical seeds; score each."""
    if extractor is None:
        extractor = train_extractor(
            [s.motion for s in splits.train], run_cfg.extractor
        )
    out = {}
    for mode in modes:
        model_cfg = replace(run_cfg.model, emotion_mode=mode)
        _, result, report = _train_and_score(
            run_cfg, splits, extractor, tag=f"mode-{mode}",
            model_cfg=model_cfg, eval_samples=eval_samples,
        )
        out[mode] = {
            "fgd": report.fgd,
            "srgr": report.srgr,
            "beat_align": report.beat_align,
            "final_loss": result.rows[-1]["total"],
        }
    return out


ABLATION_VARIANTS = ("full", "no_rec", "no_spatial", "no_emotion")


def ablation_grid(run_cfg: RunConfig, splits, extractor=None,
                  variants=ABLATION_VARIANTS, eval_samples=None) -> dict:
    """Train the flag combinations and report FGD/SRGR for each."""
    if extractor is None:
        extractor = train_extractor(
            [s.motion for s in splits.train], run_cfg.extractor
        )
    out = {}
    for variant in variants:
        if variant not in ABLATION_VARIANTS:
            raise ConfigError(f"unknown ablation variant {variant!r}")
        model_cfg = run_cfg.model
        weights = run_cfg.training.weights
        if variant == "no_rec":
            weights = replace(weights, use_rec=False)
        elif variant == "no_emotion":
            weights = replace(weights, use_emotion=False)
        elif variant == "no_spatial":
            model_cfg = replace(model_cfg, use_spatial_branch=False)
        train_cfg = replace(run_cfg.training, weights=weights)
        _, result, report = _train_and_score(
            run_cfg, splits, extractor, tag=f"ablate-{variant}",
            model_cfg=model_cfg, train_cfg=train_cfg, eval_samples=eval_samples,
        )
        out[variant] = {
            "fgd": report.fgd,
            "srgr": report.srgr,
            "final_loss": result.rows[-1]["total"],
        }
    return out


def format_comparison(table: dict, title: str) -> str:
    lines = [title]
    for name in table:
        cells = ", ".join(f"{k}={v:.4f}" for k, v in table[name].items())
        lines.append(f"  {name}: {cells}")
    return "\n".join(lines) + "\n"
