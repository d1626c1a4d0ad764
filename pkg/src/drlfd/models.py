"""Visuomotor next-pose models assembled from :mod:`drlfd.nnkernel` pieces.

Topology::

    image -> conv backbone -> flatten -> concat(state [, calib])
          -> (dense head | recurrent cell over the window -> dense head) -> 7

For recurrent variants the encoder runs on every frame of the window and the
cell consumes the fused latent sequence. Outputs are ``[q0..q3, px, py, pz]``;
positions are predicted in standardized units and mapped back to meters with
statistics fitted on the training set.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from drlfd import geometry
from drlfd.dataset import Sample, SequenceSample
from drlfd.nnkernel import LayerSpec, Network, config_hash, params_checksum
from drlfd.validation import ValidationError

VARIANTS = ("feedforward", "rnn", "gru", "lstm")
CELL_KIND = {"rnn": "rnn_cell", "gru": "gru_cell", "lstm": "lstm_cell"}

DEFAULT_BACKBONE = (
    {"kind": "conv2d", "filters": 8, "kernel": 5, "stride": 2},
    {"kind": "relu"},
    {"kind": "conv2d", "filters": 16, "kernel": 3, "stride": 2},
    {"kind": "relu"},
    {"kind": "conv2d", "filters": 32, "kernel": 3, "stride": 2},
    {"kind": "relu"},
)


@dataclass(frozen=True)
class ModelConfig:
    backbone: tuple = DEFAULT_BACKBONE
    dense_head: tuple = (128, 64, 7)
    variant: str = "feedforward"
    hidden_size: int = 64
    window: int = 1
    image_size: tuple = (64, 64)
    channels: int = 3
    state_dim: int = 14
    use_calibration: bool = False
    residual: bool = False
    output_dim: int = 7

    def __post_init__(self):
        object.__setattr__(self, "backbone", tuple(
            LayerSpec.from_dict(b).to_dict() if isinstance(b, dict) else b.to_dict() for b in self.backbone))
        object.__setattr__(self, "dense_head", tuple(int(u) for u in self.dense_head))
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"variant must be one of {VARIANTS}", field="variant", rule="enum")
        if self.output_dim != 7:
            raise ValidationError("output_dim must be 7", field="output_dim", rule="value")
        if not self.dense_head or self.dense_head[-1] != self.output_dim:
            raise ValidationError("dense_head must end with the 7-wide output layer", field="dense_head", rule="value")
        if (self.window == 1) != (self.variant == "feedforward"):
            raise ValidationError("window must be 1 exactly for the feedforward variant",
                                  field="window", rule="value")
        if self.window < 1:
            raise ValidationError("window must be >= 1", field="window", rule="positive")
        if self.state_dim not in (7, 14):
            raise ValidationError("state_dim must be 7 (Arm 2) or 14 (both arms)", field="state_dim", rule="enum")
        if self.hidden_size <= 0:
            raise ValidationError("hidden_size must be positive", field="hidden_size", rule="positive")
        for spec in self.backbone:
            if spec["kind"] in ("concat", "flatten", "dense") or spec["kind"] in CELL_KIND.values():
                raise ValidationError(f"backbone may only hold conv/activation layers, got {spec['kind']}",
                                      field="backbone", rule="kind")

    @property
    def recurrent(self) -> bool:
        return self.variant != "feedforward"

    @property
    def context_dim(self) -> int:
        return self.state_dim + (7 if self.use_calibration else 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = [dict(b) for b in self.backbone]
        d["dense_head"] = list(self.dense_head)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ValidationError(f"unknown model config keys: {sorted(unknown)}", field="config", rule="keys")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def hash(self) -> str:
        return config_hash(self.to_dict())


def _encoder_network(cfg: ModelConfig) -> Network:
    layers = [LayerSpec.from_dict(b) for b in cfg.backbone] + [LayerSpec("flatten")]
    H, W = cfg.image_size
    return Network(layers, (H, W, cfg.channels))


def _head_network(cfg: ModelConfig, feat_dim: int) -> Network:
    layers = [LayerSpec("concat", source="context", width=cfg.context_dim)]
    if cfg.recurrent:
        layers.append(LayerSpec(CELL_KIND[cfg.variant], hidden=cfg.hidden_size))
        in_shape = (cfg.window, feat_dim)
    else:
        in_shape = (feat_dim,)
    for units in cfg.dense_head[:-1]:
        layers += [LayerSpec("dense", units=units), LayerSpec("relu")]
    layers.append(LayerSpec("dense", units=cfg.output_dim))
    return Network(layers, in_shape)


class Model:
    """Parameters plus fixed normalization statistics for one :class:`ModelConfig`.

    ``params`` holds trainable tensors keyed ``encoder.<i>.<name>`` and
    ``head.<i>.<name>``; ``stats`` holds the non-trainable standardization
    of the context vector and the position output.
    """

    def __init__(self, config: ModelConfig, params: dict, stats: Optional[dict] = None):
        self.config = config
        self.encoder = _encoder_network(config)
        self.feat_dim = self.encoder.out_shape[0]
        self.head = _head_network(config, self.feat_dim)
        self.params = params
        self.stats = stats if stats is not None else default_stats(config)
        self.frozen_encoder = False

    # -- bookkeeping ------------------------------------------------------
    @property
    def concat_width(self) -> int:
        return self.head.shapes[1][-1]

    def trainable(self) -> list[str]:
        names = sorted(self.params)
        if self.frozen_encoder:
            names = [n for n in names if not n.startswith("encoder.")]
        return names

    def copy(self) -> "Model":
        m = Model(self.config, {k: v.copy() for k, v in self.params.items()},
                  {k: v.copy() for k, v in self.stats.items()})
        m.frozen_encoder = self.frozen_encoder
        return m

    def checksum(self) -> str:
        return params_checksum(self.params)

    def _split(self, prefix):
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    # -- forward / backward ----------------------------------------------
    def encode(self, images) -> np.ndarray:
        """Flattened CNN features for ``(N, H, W, C)`` images."""
        feats, _ = self.encoder.forward(self._split("encoder"), images)
        return feats

    def forward(self, images=None, context=None, base=None, features=None):
        """Predicted 7-vectors (quaternion not yet normalized) and a cache.

        ``images`` is ``(B, H, W, C)`` or ``(B, L, H, W, C)`` for recurrent
        variants; ``features`` may replace it with precomputed encoder output.
        ``context`` is the already standardized state(+calib) vector and
        ``base`` the current Arm-2 State7 (used with ``residual``).
        """
        cfg = self.config
        L = cfg.window
        enc_cache = None
        if features is None:
            images = np.asarray(images, dtype=float)
            B = images.shape[0]
            if cfg.recurrent:
                if images.ndim != 5 or images.shape[1] != L:
                    raise ValidationError(f"expected (B, {L}, H, W, C) image windows, got {images.shape}",
                                          field="images", rule="shape")
                images = images.reshape((B * L,) + images.shape[2:])
            features, enc_cache = self.encoder.forward(self._split("encoder"), images)
        B = features.shape[0] // L if (cfg.recurrent and features.ndim == 2) else features.shape[0]
        if cfg.recurrent:
            features = features.reshape(B, L, self.feat_dim)
        context = np.asarray(context, dtype=float)
        raw, head_cache = self.head.forward(self._split("head"), features, {"context": context})
        pos_scale = self.stats["pos_scale"]
        out = np.empty_like(raw)
        out[:, 4:] = raw[:, 4:] * pos_scale + self.stats["pos_mean"]
        out[:, :4] = raw[:, :4]
        if cfg.residual:
            out += np.asarray(base, dtype=float)
        return out, (enc_cache, head_cache, B)

    def backward(self, cache, dout) -> dict:
        enc_cache, head_cache, B = cache
        draw = np.array(dout, dtype=float)
        draw[:, 4:] *= self.stats["pos_scale"]
        dfeat, hgrads, _ = self.head.backward(head_cache, draw)
        grads = {f"head.{k}": v for k, v in hgrads.items()}
        if enc_cache is not None and not self.frozen_encoder:
            dfeat = dfeat.reshape(-1, self.feat_dim)
            _, egrads, _ = self.encoder.backward(enc_cache, dfeat)
            grads.update({f"encoder.{k}": v for k, v in egrads.items()})
        return grads

    # -- inputs -----------------------------------------------------------
    def context_of(self, sample: Sample) -> np.ndarray:
        state = sample.state if self.config.state_dim == 14 else sample.arm2_state
        parts = [state]
        if self.config.use_calibration:
            if sample.calib_vec is None:
                raise ValidationError("model uses calibration but sample has no calib_vec",
                                      field="calib_vec", rule="missing")
            parts.append(sample.calib_vec)
        return np.concatenate(parts)

    def normalize_context(self, ctx) -> np.ndarray:
        return (np.asarray(ctx, float) - self.stats["ctx_mean"]) / self.stats["ctx_scale"]

    def prepare(self, items: Sequence):
        """Stack Samples (feedforward) or SequenceSamples (recurrent) into model inputs."""
        cfg = self.config
        images, ctx, base = [], [], []
        for it in items:
            if cfg.recurrent:
                if not isinstance(it, SequenceSample):
                    raise ValidationError("recurrent models take SequenceSample inputs", field="input", rule="type")
                if len(it.window) != cfg.window:
                    raise ValidationError(f"window length {len(it.window)} != configured {cfg.window}",
                                          field="window", rule="length")
                images.append(np.stack([s.image for s in it.window]))
                ctx.append(np.stack([self.context_of(s) for s in it.window]))
                base.append(it.last.arm2_state)
            else:
                if isinstance(it, SequenceSample):
                    it = it.last
                images.append(it.image)
                ctx.append(self.context_of(it))
                base.append(it.arm2_state)
        return np.stack(images), self.normalize_context(np.stack(ctx)), np.stack(base)

    def predict(self, items: Sequence, batch_size: int = 64) -> np.ndarray:
        """Next Arm-2 State7 per item, quaternion unit-norm and canonical."""
        outs = []
        for i in range(0, len(items), batch_size):
            images, ctx, base = self.prepare(items[i:i + batch_size])
            out, _ = self.forward(images, ctx, base)
            outs.append(out)
        if not outs:
            return np.zeros((0, 7))
        return finalize_pose(np.concatenate(outs))


def finalize_pose(out) -> np.ndarray:
    out = np.array(out, dtype=float)
    norm = np.linalg.norm(out[:, :4], axis=1, keepdims=True)
    if np.any(norm < 1e-8):
        raise ValidationError("predicted quaternion has zero norm; cannot renormalize",
                              field="prediction", rule="norm")
    out[:, :4] = geometry.canonicalize(out[:, :4] / norm)
    return out


def default_stats(cfg: ModelConfig) -> dict:
    return {"ctx_mean": np.zeros(cfg.context_dim), "ctx_scale": np.ones(cfg.context_dim),
            "pos_mean": np.zeros(3), "pos_scale": np.ones(3)}


def fit_stats(model: Model, samples: Sequence[Sample], min_scale: float = 1e-6) -> dict:
    """Standardization statistics from training samples (set on ``model``)."""
    plain = [s.last if isinstance(s, SequenceSample) else s for s in samples]
    ctx = np.stack([model.context_of(s) for s in plain])
    targets = np.stack([s.target[4:] for s in plain])
    if model.config.residual:
        targets = targets - np.stack([s.arm2_state[4:] for s in plain])
    sd = ctx.std(axis=0)
    ps = targets.std(axis=0)
    stats = {"ctx_mean": ctx.mean(axis=0), "ctx_scale": np.where(sd > min_scale, sd, 1.0),
             "pos_mean": targets.mean(axis=0), "pos_scale": np.where(ps > min_scale, ps, max(min_scale, 1e-3))}
    model.stats = stats
    return stats


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    """Initialize a model deterministically from ``seed``."""
    rng = np.random.default_rng(seed)
    enc = _encoder_network(cfg)
    head = _head_network(cfg, enc.out_shape[0])
    params = {f"encoder.{k}": v for k, v in enc.init_params(rng).items()}
    hp = head.init_params(rng)
    last = len(head.layers) - 1
    if cfg.residual:
        hp[f"{last}.W"] *= 0.01
    else:
        hp[f"{last}.b"][:4] = (1.0, 0.0, 0.0, 0.0)
    params.update({f"head.{k}": v for k, v in hp.items()})
    return Model(cfg, params)


def transfer_encoder(src: Model, dst: Model, freeze: bool = True) -> Model:
    """Copy CNN weights (and state statistics) from a trained model into ``dst``."""
    if src.config.backbone != dst.config.backbone or src.config.image_size != dst.config.image_size:
        raise ValidationError("encoder topologies differ", field="backbone", rule="mismatch")
    for k, v in src.params.items():
        if k.startswith("encoder."):
            dst.params[k] = v.copy()
    if src.config.context_dim == dst.config.context_dim:
        dst.stats["ctx_mean"] = src.stats["ctx_mean"].copy()
        dst.stats["ctx_scale"] = src.stats["ctx_scale"].copy()
    dst.frozen_encoder = freeze
    return dst


def predict_next_pose(model: Model, item) -> np.ndarray:
    """State7 prediction for a single Sample or SequenceSample."""
    return model.predict([item])[0]


def count_params(model: Model) -> int:
    return int(sum(v.size for v in model.params.values()))


def with_variant(cfg: ModelConfig, variant: str, window: Optional[int] = None) -> ModelConfig:
    if variant == "feedforward":
        return replace(cfg, variant=variant, window=1)
    return replace(cfg, variant=variant, window=window or (cfg.window if cfg.window > 1 else 5))
