"""Deterministic minibatch training with validation-based model selection."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from drlfd import nnkernel as nk
from drlfd.dataset import Split, window_samples
from drlfd.evaluate import compute_metrics
from drlfd.models import Model, ModelConfig, finalize_pose, fit_stats
from drlfd.validation import CheckpointError, ValidationError

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "drlfd-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class Hyperparams:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss: str = "pose"
    w_pos: float = 1.0
    w_ori: float = 1.0
    patience: int = 8
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be positive", field="epochs", rule="positive")
        if self.patience < 1:
            raise ValidationError("patience must be >= 1", field="patience", rule="positive")
        if self.loss not in ("pose", "mae"):
            raise ValidationError("loss must be 'pose' or 'mae'", field="loss", rule="enum")
        if self.lr <= 0:
            raise ValidationError("lr must be positive", field="lr", rule="positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown hyperparameter keys: {sorted(unknown)}", field="hyperparams", rule="keys")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "Hyperparams":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def loss_fn(self):
        if self.loss == "mae":
            return nk.mae_loss
        return lambda p, t: nk.pose_loss(p, t, self.w_pos, self.w_ori)


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_metrics: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHistory":
        return cls(**d)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "val_MaxPE", "val_AvePE", "val_MaxOE", "val_AveOE",
                        "val_Loss"])
            for i, (tl, vl, m) in enumerate(zip(self.train_loss, self.val_loss, self.val_metrics)):
                w.writerow([i, repr(tl), repr(vl), repr(m["max_pe"]), repr(m["ave_pe"]), repr(m["max_oe"]),
                            repr(m["ave_oe"]), repr(m["loss"])])


class _Arrays:
    """Dataset stacked once into arrays; items are sample indices or index windows."""

    def __init__(self, model: Model, samples: Sequence, items: np.ndarray, features=None):
        self.model = model
        self.samples = samples
        self.items = items
        self.features = features
        self.context = model.normalize_context(np.stack([model.context_of(s) for s in samples]))
        self.base = np.stack([s.arm2_state for s in samples])
        self.target = np.stack([s.target for s in samples])

    def __len__(self):
        return len(self.items)

    def batch(self, idx):
        rows = self.items[idx]
        last = rows[:, -1] if rows.ndim == 2 else rows
        if self.features is not None:
            x = {"features": self.features[rows]}
        else:
            x = {"images": np.stack([self.samples[i].image for i in rows.ravel()]).reshape(
                rows.shape + self.samples[0].image.shape)}
        return x, self.context[rows], self.base[last], self.target[last]


def _index_items(model: Model, dataset: Sequence, indices: Sequence[int]) -> np.ndarray:
    if not model.config.recurrent:
        return np.asarray(indices, dtype=int)
    pos = {id(dataset[i]): i for i in indices}
    wins = window_samples([dataset[i] for i in indices], model.config.window)
    return np.array([[pos[id(s)] for s in w.window] for w in wins], dtype=int).reshape(-1, model.config.window)


def _encode_all(model: Model, dataset: Sequence, batch: int = 128) -> np.ndarray:
    feats = []
    for i in range(0, len(dataset), batch):
        feats.append(model.encode(np.stack([s.image for s in dataset[i:i + batch]])))
    return np.concatenate(feats)


def _forward(model, x, ctx, base):
    return model.forward(images=x.get("images"), features=x.get("features"), context=ctx, base=base)


def _evaluate_loss(model: Model, arrays: _Arrays, loss_fn, batch: int = 256):
    total, preds, truths = 0.0, [], []
    for i in range(0, len(arrays), batch):
        idx = np.arange(i, min(i + batch, len(arrays)))
        x, ctx, base, tgt = arrays.batch(idx)
        out, _ = _forward(model, x, ctx, base)
        loss, _ = loss_fn(out, tgt)
        total += loss * len(idx)
        preds.append(out)
        truths.append(tgt)
    preds = finalize_pose(np.concatenate(preds))
    return total / len(arrays), compute_metrics(preds, np.concatenate(truths))


def train(model: Model, split: Split, dataset: Sequence, hp: Hyperparams = Hyperparams(),
          run_dir=None, fit_normalization: bool = True):
    """Train a copy of ``model`` on ``dataset[split.train]``.

    Selects the epoch with the lowest validation loss (training loss when the
    validation set is empty) and stops after ``hp.patience`` epochs without
    improvement. Returns ``(best_model, history)``; the input model, dataset
    and split are left untouched.
    """
    model = model.copy()
    if not split.train:
        raise ValidationError("empty training set", field="split.train", rule="nonempty")
    train_samples = [dataset[i] for i in split.train]
    if fit_normalization:
        fit_stats(model, train_samples)
    features = _encode_all(model, dataset) if model.frozen_encoder else None
    tr = _Arrays(model, dataset, _index_items(model, dataset, split.train), features)
    va_items = _index_items(model, dataset, split.val) if split.val else np.zeros((0,), int)
    va = _Arrays(model, dataset, va_items, features) if len(va_items) else None
    if len(tr) == 0:
        raise ValidationError("no training items (window longer than every stream?)", field="split.train",
                              rule="nonempty")

    loss_fn = hp.loss_fn()
    adam = nk.AdamHyper(hp.lr, hp.beta1, hp.beta2, hp.eps)
    state = nk.AdamState()
    trainable = set(model.trainable())
    rng = np.random.default_rng(hp.seed)
    history = TrainHistory()
    best_params, best_loss, stale = None, np.inf, 0

    for epoch in range(hp.epochs):
        order = rng.permutation(len(tr))
        total = 0.0
        for b, start in enumerate(range(0, len(order), hp.batch_size)):
            idx = order[start:start + hp.batch_size]
            x, ctx, base, tgt = tr.batch(idx)
            out, cache = _forward(model, x, ctx, base)
            loss, dout = loss_fn(out, tgt)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = {k: v for k, v in model.backward(cache, dout).items() if k in trainable}
            if model.config.recurrent:
                nk.clip_global_norm(grads, hp.clip_norm)
            try:
                nk.adam_step(model.params, grads, state, adam)
            except ValidationError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from exc
            total += loss * len(idx)
        train_loss = total / len(tr)
        if va is not None:
            val_loss, val_m = _evaluate_loss(model, va, loss_fn)
        else:
            val_loss, val_m = _evaluate_loss(model, tr, loss_fn)
        history.train_loss.append(float(train_loss))
        history.val_loss.append(float(val_loss))
        history.val_metrics.append(val_m.to_dict())
        log.info("epoch %d train %.6g val %.6g AvePE %.4g mm", epoch, train_loss, val_loss, val_m.ave_pe)
        if val_loss < best_loss:
            best_loss, best_params, stale = val_loss, {k: v.copy() for k, v in model.params.items()}, 0
            history.best_epoch = epoch
        else:
            stale += 1
            if stale >= hp.patience:
                history.stopped_early = True
                break

    final = model
    best = model.copy()
    best.params = best_params
    if run_dir is not None:
        run = Path(run_dir)
        run.mkdir(parents=True, exist_ok=True)
        (run / "model_config.json").write_text(json.dumps(model.config.to_dict(), indent=2) + "\n")
        (run / "hyperparams.json").write_text(json.dumps(hp.to_dict(), indent=2) + "\n")
        history.write_csv(run / "history.csv")
        save_checkpoint(best, history, run / "best.ckpt")
        save_checkpoint(final, history, run / "final.ckpt")
    return best, history


def training_loss(model: Model, dataset: Sequence, indices: Sequence[int], hp: Hyperparams) -> float:
    items = _index_items(model, dataset, indices)
    if len(items) == 0:
        raise ValidationError("no items to evaluate", field="indices", rule="nonempty")
    arrays = _Arrays(model, dataset, items)
    return _evaluate_loss(model, arrays, hp.loss_fn())[0]


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(model: Model, history: Optional[TrainHistory], path) -> Path:
    tensors = dict(model.params)
    tensors.update({f"stats.{k}": v for k, v in model.stats.items()})
    meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "config": model.config.to_dict(), "config_hash": model.config.hash(),
            "encoder": model.encoder.to_dict(), "head": model.head.to_dict(),
            "frozen_encoder": model.frozen_encoder,
            "history": history.to_dict() if history is not None else None}
    path = Path(path)
    path.write_bytes(nk.dump_tensors(tensors, meta))
    return path


def load_checkpoint(path, expected_config: Optional[ModelConfig] = None):
    """Read ``(model, history)``; raises :class:`CheckpointError` on corruption or config mismatch."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    tensors, meta = nk.parse_tensors(path.read_bytes())
    if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format/version")
    try:
        cfg = ModelConfig.from_dict(meta["config"])
    except (ValidationError, TypeError) as exc:
        raise CheckpointError(f"{path}: invalid model config: {exc}") from exc
    if cfg.hash() != meta.get("config_hash"):
        raise CheckpointError(f"{path}: config-hash mismatch (stored {meta.get('config_hash')}, computed {cfg.hash()})")
    if expected_config is not None and expected_config.hash() != cfg.hash():
        raise CheckpointError(f"{path}: config-hash mismatch: checkpoint {cfg.hash()}, expected {expected_config.hash()}")
    params = {k: v for k, v in tensors.items() if not k.startswith("stats.")}
    stats = {k[len("stats."):]: v for k, v in tensors.items() if k.startswith("stats.")}
    model = Model(cfg, params, stats)
    model.frozen_encoder = bool(meta.get("frozen_encoder", False))
    expected = {f"encoder.{k}": s for k, s in model.encoder.param_shapes().items()}
    expected.update({f"head.{k}": s for k, s in model.head.param_shapes().items()})
    if {k: tuple(v.shape) for k, v in params.items()} != expected:
        raise CheckpointError(f"{path}: tensor set does not match the stored config")
    hist = TrainHistory.from_dict(meta["history"]) if meta.get("history") else None
    return model, hist
