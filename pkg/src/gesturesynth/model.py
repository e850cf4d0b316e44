"""The gesture denoiser: predicts the noise in a corrupted motion clip.

The network decomposes the input along two axes.  A joint branch collapses
time with a learned weighting, embeds each joint, prepends a learnable
correlation token, and runs self-attention across joints — the token's output
summarizes inter-joint structure for the whole clip.  A temporal branch
embeds whole frames, adds a learnable positional encoding, and runs
self-attention across time.  The correlation token is then broadcast onto
every frame, a fusion stack mixes the result, audio enters through
cross-attention (queries from gesture features, keys/values from audio), and
an emotion embedding conditions the result through one of four mechanisms.
A final per-frame affine head maps back to joint rotations.

The diffusion timestep and speaker id are injected everywhere through the
conditional norms of the transformer blocks; at initialization those heads
are zero, so the conditioning starts out exactly neutral.

Emotion is inferred from the audio itself: mean-pooled audio features pass
through a linear classifier, and the winning label indexes a learned
embedding table.  During training the ground-truth label indexes the table
while the classifier learns from cross-entropy; at inference the predicted
label is used unless the caller overrides it (which is how emotion transfer
works).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, concat, gelu, take_rows
from .errors import ConfigError, ContractError, ParseError
from .layers import (
    CrossAttention,
    Linear,
    ScaleShift,
    TransformerBlock,
    TransformerStack,
    prefixed,
    sinusoidal_table,
    timestep_features,
)
from .motion import DatasetStats

EMOTION_MODES = ("adaln", "in_context_token", "in_context_content", "cross_attention")


@dataclass(frozen=True)
class ModelConfig:
    n_joints: int = 47
    n_max: int = 150
    d_audio: int = 128
    d_audio_raw: int = 128
    d_joint: int = 64
    d_temporal: int = 512
    d_fusion: int = 512
    d_cond: int = 256
    depth_joint: int = 4
    depth_temporal: int = 8
    depth_fusion: int = 2
    heads_joint: int = 4
    heads_temporal: int = 8
    heads_fusion: int = 8
    ffn_mult: int = 4
    n_emotions: int = 8
    n_speakers: int = 4
    emotion_mode: str = "adaln"
    use_spatial_branch: bool = True

    def __post_init__(self):
        if self.emotion_mode not in EMOTION_MODES:
            raise ConfigError(
                f"emotion_mode {self.emotion_mode!r} not in {EMOTION_MODES}"
            )
        for name in ("depth_joint", "depth_temporal", "depth_fusion"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for dim, heads in (
            ("d_joint", "heads_joint"),
            ("d_temporal", "heads_temporal"),
            ("d_fusion", "heads_fusion"),
        ):
            if getattr(self, dim) % getattr(self, heads) != 0:
                raise ConfigError(
                    f"{dim}={getattr(self, dim)} not divisible by "
                    f"{heads}={getattr(self, heads)}"
                )
        if self.d_fusion != self.d_temporal:
            # the correlation token is added onto temporal features and flows
            # straight into the fusion stack, so the dims must agree
            raise ConfigError("d_fusion must equal d_temporal")
        if self.d_cond % 2 != 0 or self.d_joint % 2 != 0:
            raise ConfigError("d_cond and d_joint must be even (sinusoidal features)")
        if self.n_emotions < 2:
            raise ConfigError("need at least 2 emotion classes")
        if min(self.n_joints, self.n_max, self.n_speakers) < 1:
            raise ConfigError("n_joints, n_max and n_speakers must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def toy_config(**overrides) -> ModelConfig:
    """Small configuration for fast experiments and tests."""
    base = dict(
        n_joints=6,
        n_max=36,
        d_audio=20,
        d_audio_raw=20,
        d_joint=16,
        d_temporal=32,
        d_fusion=32,
        d_cond=16,
        depth_joint=1,
        depth_temporal=2,
        depth_fusion=1,
        heads_joint=2,
        heads_temporal=4,
        heads_fusion=4,
        ffn_mult=2,
        n_emotions=4,
        n_speakers=2,
    )
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class Condition:
    """Conditioning inputs for one clip or a batch of clips.

    `audio` is (M, D_raw) or (B, M, D_raw) raw features at the source rate.
    `emotion_label` None means "use the classifier's argmax"; an explicit
    label (or per-clip array) overrides it.
    """

    audio: np.ndarray
    emotion_label: object = None
    speaker: object = 0


@dataclass
class EmotionCondition:
    """Classifier output: logits, the chosen label, and its embedding row."""

    logits: np.ndarray
    label: int
    embedding: np.ndarray


class GestureDenoiser:
    def __init__(self, config: ModelConfig, rng):
        c = self.config = config
        self.audio_align = Linear(c.d_audio_raw, c.d_audio, rng)
        self.emotion_phi = Linear(c.d_audio, c.n_emotions, rng)
        self.emotion_table = Tensor(
            rng.normal(0.0, 0.02, size=(c.n_emotions, c.d_fusion)), requires_grad=True
        )
        self.time_mlp_in = Linear(c.d_cond, c.d_cond, rng)
        self.time_mlp_out = Linear(c.d_cond, c.d_cond, rng)
        self.speaker_table = Tensor(
            rng.normal(0.0, 0.02, size=(c.n_speakers, c.d_cond)), requires_grad=True
        )
        # joint branch: learned time collapse starts as the plain mean
        self.time_collapse = Tensor(np.zeros(c.n_max), requires_grad=True)
        self.joint_embed = Linear(3, c.d_joint, rng)
        self.correlation_token = Tensor(
            rng.normal(0.0, 0.02, size=(1, 1, c.d_joint)), requires_grad=True
        )
        self._joint_pe = sinusoidal_table(c.n_joints + 1, c.d_joint)
        self.joint_stack = TransformerStack(
            c.depth_joint, c.d_joint, c.heads_joint, c.d_cond, rng, ffn_mult=c.ffn_mult
        )
        # temporal branch
        self.frame_embed = Linear(c.n_joints * 3, c.d_temporal, rng)
        self.temporal_pe = Tensor(
            rng.normal(0.0, 0.02, size=(c.n_max, c.d_temporal)), requires_grad=True
        )
        self.temporal_stack = TransformerStack(
            c.depth_temporal, c.d_temporal, c.heads_temporal, c.d_cond, rng,
            ffn_mult=c.ffn_mult,
        )
        # fusion and audio entry
        self.token_proj = Linear(c.d_joint, c.d_temporal, rng)
        self.fusion_stack = TransformerStack(
            c.depth_fusion, c.d_fusion, c.heads_fusion, c.d_cond, rng,
            ffn_mult=c.ffn_mult,
        )
        self.audio_attn = CrossAttention(c.d_fusion, c.d_audio, c.heads_fusion, rng)
        # emotion conditioning (mode fixed by config)
        if c.emotion_mode == "adaln":
            self.emotion_mod = ScaleShift(c.d_fusion, c.d_fusion, rng)
        elif c.emotion_mode == "in_context_token":
            self.emotion_block = TransformerBlock(
                c.d_fusion, c.heads_fusion, c.d_cond, rng, ffn_mult=c.ffn_mult
            )
        elif c.emotion_mode == "in_context_content":
            self.emotion_proj = Linear(c.d_fusion, c.d_fusion, rng)
        else:  # cross_attention
            self.emotion_attn = CrossAttention(
                c.d_fusion, c.d_fusion, c.heads_fusion, rng
            )
        self.out_head = Linear(c.d_fusion, c.n_joints * 3, rng)

    # ------------------------------------------------------------------
    # parameters
    # ------------------------------------------------------------------

    def params(self) -> dict:
        c = self.config
        out = {
            **prefixed(self.audio_align.params(), "audio_align"),
            **prefixed(self.emotion_phi.params(), "emotion_phi"),
            "emotion_table": self.emotion_table,
            **prefixed(self.time_mlp_in.params(), "time_mlp_in"),
            **prefixed(self.time_mlp_out.params(), "time_mlp_out"),
            "speaker_table": self.speaker_table,
            "time_collapse": self.time_collapse,
            **prefixed(self.joint_embed.params(), "joint_embed"),
            "correlation_token": self.correlation_token,
            **prefixed(self.joint_stack.params(), "joint_stack"),
            **prefixed(self.frame_embed.params(), "frame_embed"),
            "temporal_pe": self.temporal_pe,
            **prefixed(self.temporal_stack.params(), "temporal_stack"),
            **prefixed(self.token_proj.params(), "token_proj"),
            **prefixed(self.fusion_stack.params(), "fusion_stack"),
            **prefixed(self.audio_attn.params(), "audio_attn"),
            **prefixed(self.out_head.params(), "out_head"),
        }
        if c.emotion_mode == "adaln":
            out.update(prefixed(self.emotion_mod.params(), "emotion_mod"))
        elif c.emotion_mode == "in_context_token":
            out.update(prefixed(self.emotion_block.params(), "emotion_block"))
        elif c.emotion_mode == "in_context_content":
            out.update(prefixed(self.emotion_proj.params(), "emotion_proj"))
        else:
            out.update(prefixed(self.emotion_attn.params(), "emotion_attn"))
        return out

    # ------------------------------------------------------------------
    # audio pathway
    # ------------------------------------------------------------------

    @staticmethod
    def _interp_time(raw: np.ndarray, n_frames: int) -> np.ndarray:
        """Linear interpolation from M source positions to n_frames targets."""
        m = raw.shape[-2]
        if m == n_frames:
            return raw
        pos = np.linspace(0.0, m - 1.0, n_frames)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, m - 1)
        frac = (pos - lo)[:, None]
        return raw[..., lo, :] * (1.0 - frac) + raw[..., hi, :] * frac

    def _align_tensor(self, raw: np.ndarray, n_frames: int) -> Tensor:
        raw = np.asarray(raw, dtype=np.float64)
        if raw.shape[-1] != self.config.d_audio_raw:
            raise ContractError(
                f"audio features have {raw.shape[-1]} channels, model expects "
                f"{self.config.d_audio_raw}"
            )
        if raw.shape[-2] < 2:
            raise ConfigError(
                f"audio alignment needs at least 2 source frames, got {raw.shape[-2]}"
            )
        return self.audio_align(Tensor(self._interp_time(raw, n_frames)))

    def align_audio(self, raw_features: np.ndarray, n_frames: int):
        """Resample raw features to n_frames and project to the model dim."""
        from .motion import AudioFeatureSequence

        aligned = self._align_tensor(np.asarray(raw_features), n_frames)
        return AudioFeatureSequence(aligned.data, source_rate_hz=float(n_frames))

    # ------------------------------------------------------------------
    # emotion pathway
    # ------------------------------------------------------------------

    def emotion_head(self, audio) -> EmotionCondition:
        """Classify aligned audio (N x D_a) and fetch the label's embedding."""
        a = np.asarray(audio, dtype=np.float64)
        if a.ndim != 2 or a.shape[1] != self.config.d_audio:
            raise ContractError(
                f"emotion head expects (N, {self.config.d_audio}), got {a.shape}"
            )
        logits = self.emotion_phi(Tensor(a.mean(axis=0, keepdims=True))).data[0]
        label = int(np.argmax(logits))
        return EmotionCondition(
            logits=logits.copy(),
            label=label,
            embedding=self.emotion_table.data[label].copy(),
        )

    # ------------------------------------------------------------------
    # branches
    # ------------------------------------------------------------------

    def _joint_branch(self, x: Tensor, cond) -> Tensor:
        b, n, j = x.shape[0], x.shape[1], x.shape[2]
        weights = self.time_collapse[:n].reshape(n, 1) + (1.0 / n)
        flat = x.reshape(b, n, j * 3)
        collapsed = flat.transpose(0, 2, 1) @ weights  # (B, J*3, 1)
        joints = collapsed.reshape(b, j, 3)
        emb = self.joint_embed(joints)  # (B, J, d_joint)
        token = self.correlation_token + Tensor(np.zeros((b, 1, 1)))
        seq = concat([token, emb], axis=1) + Tensor(self._joint_pe)
        seq = self.joint_stack(seq, cond)
        return seq[:, 0, :]

    def _temporal_branch(self, flat: Tensor, cond) -> Tensor:
        n = flat.shape[1]
        h = self.frame_embed(flat) + self.temporal_pe[:n]
        return self.temporal_stack(h, cond)

    def _condition_emotion(self, g: Tensor, e: Tensor, cond) -> Tensor:
        mode = self.config.emotion_mode
        d = self.config.d_fusion
        if mode == "adaln":
            return self.emotion_mod(g, e)
        if mode == "in_context_token":
            n = g.shape[1]
            seq = concat([g, e.reshape(-1, 1, d)], axis=1)
            seq = self.emotion_block(seq, cond)
            return seq[:, :n, :]
        if mode == "in_context_content":
            return g + self.emotion_proj(e).reshape(-1, 1, d)
        return self.emotion_attn(g, e.reshape(-1, 1, d))

    def condition_emotion(self, features: Tensor, e: Tensor, cond=None) -> Tensor:
        """Apply the configured emotion-conditioning mechanism."""
        return self._condition_emotion(features, e, cond)

    # ------------------------------------------------------------------
    # full forward
    # ------------------------------------------------------------------

    def _batch(self, x_t, condition):
        x = np.asarray(x_t, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.ndim != 4 or x.shape[2] != self.config.n_joints or x.shape[3] != 3:
            raise ContractError(
                f"denoiser input must be (B, N, {self.config.n_joints}, 3), got {x.shape}"
            )
        if x.shape[1] > self.config.n_max:
            raise ConfigError(
                f"clip length {x.shape[1]} exceeds the model's n_max={self.config.n_max}"
            )
        b = x.shape[0]
        audio = np.asarray(condition.audio, dtype=np.float64)
        if audio.ndim == 2:
            audio = np.broadcast_to(audio, (b,) + audio.shape)
        if audio.ndim != 3 or audio.shape[0] != b:
            raise ContractError(
                f"condition audio must be (B, M, D) with B={b}, got {audio.shape}"
            )
        labels = condition.emotion_label
        if labels is not None:
            labels = np.broadcast_to(np.asarray(labels, dtype=int), (b,)).copy()
            if np.any((labels < 0) | (labels >= self.config.n_emotions)):
                raise ConfigError(
                    f"emotion labels must lie in [0, {self.config.n_emotions})"
                )
        speakers = np.broadcast_to(np.asarray(condition.speaker, dtype=int), (b,)).copy()
        if np.any((speakers < 0) | (speakers >= self.config.n_speakers)):
            raise ConfigError(f"speaker ids must lie in [0, {self.config.n_speakers})")
        return x, audio, labels, speakers, single

    def forward(self, x_t, t, condition: Condition):
        """Batched forward pass.

        Returns (eps_hat, emotion_logits, labels_used): the first two are
        graph Tensors, the labels are the concrete indices that selected the
        emotion embedding (ground truth when provided, argmax otherwise).
        """
        x, audio, labels, speakers, _ = self._batch(x_t, condition)
        b, n = x.shape[0], x.shape[1]
        aligned = self._align_tensor(audio, n)  # (B, N, d_audio)
        pooled = aligned.mean(axis=1)
        logits = self.emotion_phi(pooled)  # (B, C)
        if labels is None:
            labels = np.argmax(logits.data, axis=1)
        e = take_rows(self.emotion_table, labels)  # (B, d_fusion)

        t_arr = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=int)), (b,))
        t_feat = Tensor(timestep_features(t_arr, self.config.d_cond))
        cond = self.time_mlp_out(gelu(self.time_mlp_in(t_feat)))
        cond = cond + take_rows(self.speaker_table, speakers)

        xt = Tensor(x)
        frames = self._temporal_branch(xt.reshape(b, n, -1), cond)
        if self.config.use_spatial_branch:
            token = self._joint_branch(xt, cond)
            g = frames + self.token_proj(token).reshape(-1, 1, self.config.d_temporal)
        else:
            g = frames
        g = self.fusion_stack(g, cond)
        g = self.audio_attn(g, aligned)
        g = self._condition_emotion(g, e, cond)
        eps = self.out_head(g).reshape(b, n, self.config.n_joints, 3)
        return eps, logits, labels

    def denoise(self, x_t, t, condition: Condition) -> np.ndarray:
        """Noise prediction as a plain array; accepts (N,J,3) or (B,N,J,3)."""
        _, _, _, _, single = self._batch(x_t, condition)
        eps, _, _ = self.forward(x_t, t, condition)
        return eps.data[0] if single else eps.data

    def as_denoiser(self, condition: Condition):
        """Adapter matching the sampler contract fn(x_t, t, _) -> eps_hat."""
        return lambda x_t, t, _cond: self.denoise(x_t, t, condition)


def randomize_parameters(model: GestureDenoiser, rng, scale: float = 0.05) -> None:
    """Fill every parameter (including zero-init heads) with small noise.

    Sensitivity probes need all pathways active, which the neutral
    initialization deliberately is not.
    """
    for name in sorted(model.params()):
        p = model.params()[name]
        p.data = rng.normal(0.0, scale, size=p.data.shape)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = "GSYNCKPT"
_CKPT_VERSION = "v1"


def save_checkpoint(model, path, *, stats=None, meta=None, extra_arrays=None):
    """Write parameters, config, normalization stats and metadata to one file."""
    arrays = {name: p.data for name, p in model.params().items()}
    for name, arr in (extra_arrays or {}).items():
        arrays[f"extra.{name}"] = np.asarray(arr, dtype=np.float64)
    names = sorted(arrays)
    lines = [
        f"{_CKPT_MAGIC} {_CKPT_VERSION}",
        "config " + json.dumps(model.config.to_dict(), sort_keys=True),
        "stats " + ("none" if stats is None else json.dumps(stats.to_dict(), sort_keys=True)),
        "meta " + json.dumps(meta or {}, sort_keys=True),
        f"params {len(names)}",
    ]
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        dims = " ".join(str(s) for s in arr.shape)
        lines.append(f"param {name} {arr.ndim} {dims}".rstrip())
        blobs.append(arr.tobytes())
    total = sum(len(b) for b in blobs)
    lines.append(f"data float64 le {total}")
    lines.append("end_header")
    lines.append("")
    Path(path).write_bytes("\n".join(lines).encode("ascii") + b"".join(blobs))


@dataclass
class CheckpointBundle:
    model: GestureDenoiser
    stats: object
    meta: dict
    extra_arrays: dict


def load_checkpoint(path, *, expect_config: ModelConfig = None) -> CheckpointBundle:
    """Rebuild a model from a checkpoint; config mismatches are rejected."""
    from .motion import _HeaderReader, _read_blob  # same header discipline as motion files
    from .rng import stream

    reader = _HeaderReader(Path(path).read_bytes(), path)
    text, start = reader.line()
    if text.split() != [_CKPT_MAGIC, _CKPT_VERSION]:
        reader.fail(f"not a {_CKPT_MAGIC} {_CKPT_VERSION} checkpoint ({text!r})", at=start)
    specs = {}
    for key in ("config", "stats", "meta"):
        text, start = reader.line()
        if not text.startswith(key + " "):
            reader.fail(f"expected {key} line, found {text!r}", at=start)
        specs[key] = text[len(key) + 1 :]
    text, start = reader.line()
    parts = text.split()
    if len(parts) != 2 or parts[0] != "params":
        reader.fail(f"malformed params line {text!r}", at=start)
    n_params = int(parts[1])
    entries = []
    for _ in range(n_params):
        text, start = reader.line()
        parts = text.split()
        if len(parts) < 3 or parts[0] != "param":
            reader.fail(f"malformed param line {text!r}", at=start)
        name, ndim = parts[1], int(parts[2])
        shape = tuple(int(s) for s in parts[3 : 3 + ndim])
        if len(shape) != ndim:
            reader.fail(f"param {name} declares {ndim} dims, lists {len(shape)}", at=start)
        entries.append((name, shape))
    total = sum(int(np.prod(shape, dtype=np.int64)) for _, shape in entries)
    flat = _read_blob(reader, total)

    config = ModelConfig.from_dict(json.loads(specs["config"]))
    if expect_config is not None and config != expect_config:
        raise ConfigError(
            "checkpoint model configuration does not match the requested one"
        )
    stats = None if specs["stats"] == "none" else DatasetStats.from_dict(json.loads(specs["stats"]))
    meta = json.loads(specs["meta"])

    model = GestureDenoiser(config, stream(0, "checkpoint-shape-init"))
    params = model.params()
    extra = {}
    cursor = 0
    for name, shape in entries:
        size = int(np.prod(shape, dtype=np.int64))
        block = flat[cursor : cursor + size].reshape(shape).copy()
        cursor += size
        if name.startswith("extra."):
            extra[name[len("extra.") :]] = block
        elif name in params:
            if params[name].data.shape != shape:
                raise ParseError(
                    f"{path}: parameter {name} has shape {shape}, model expects "
                    f"{params[name].data.shape}",
                    offset=0,
                )
            params[name].data = block
        else:
            raise ParseError(f"{path}: unknown parameter {name!r}", offset=0)
    missing = set(params) - {name for name, _ in entries}
    if missing:
        raise ParseError(
            f"{path}: checkpoint is missing parameters: {sorted(missing)[:5]}", offset=0
        )
    return CheckpointBundle(model=model, stats=stats, meta=meta, extra_arrays=extra)
