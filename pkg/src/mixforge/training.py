"""AdamW, BCE loss and the prompt-tuning training loop."""
from __future__ import annotations

import csv
import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .audio_io import SAMPLE_RATE, fix_length, read_wav, resample
from .autodiff import Tensor
from .evaluation import TASKS, compute_eer, task_rows
from .mix_engine import read_manifest

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 5e-3
    weight_decay: float = 5e-4
    batch_size: int = 32
    epochs: int = 30
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    task: str = "foreground"
    pos_weight: float | None = None
    recrop_each_epoch: bool = False

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.lr <= 0 or self.weight_decay < 0 or self.batch_size < 1 or self.epochs < 1 or self.eps <= 0:
            raise ValueError("training hyperparameters must be positive")
        if not all(0.0 <= b < 1.0 for b in self.betas) or len(self.betas) != 2:
            raise ValueError(f"betas must be two values in [0, 1), got {self.betas}")


class AdamW:
    """Adam with decoupled weight decay over a ``name -> Tensor`` mapping."""

    def __init__(self, params: dict, lr=5e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=5e-4):
        self.params = dict(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        bad = {k: int(np.count_nonzero(~np.isfinite(p.grad)))
               for k, p in self.params.items() if p.grad is not None and not np.all(np.isfinite(p.grad))}
        if bad:
            raise NumericalError(f"non-finite gradients at step {self.t + 1}: {bad}")
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data *= 1.0 - self.lr * self.weight_decay
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype, copy=False)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def adamw_step(params: dict, grads: dict, state: dict, cfg: TrainConfig) -> dict:
    """Functional single AdamW step on plain arrays; returns the updated *state*.

    *state* holds ``t``, ``m`` and ``v``; pass ``{}`` on the first call.
    """
    tensors = {k: Tensor(np.asarray(v)) for k, v in params.items()}
    opt = AdamW(tensors, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    if state:
        opt.t, opt.m, opt.v = state["t"], state["m"], state["v"]
    for k, t in tensors.items():
        t.grad = np.asarray(grads[k], dtype=t.data.dtype)
    opt.step()
    for k, t in tensors.items():
        params[k][...] = t.data
    return {"t": opt.t, "m": opt.m, "v": opt.v}


def bce_loss(logits: Tensor, labels, pos_weight: float | None = None) -> Tensor:
    """Mean binary cross-entropy on bona fide logits, log-sum-exp stable."""
    y = np.asarray(labels, dtype=logits.dtype).reshape(logits.shape)
    if logits.data.size == 0:
        raise ValueError("bce_loss on an empty batch")
    z = logits.data
    w = np.ones_like(z) if pos_weight is None else np.where(y > 0.5, pos_weight, 1.0).astype(z.dtype)
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    norm = float(z.size)
    loss = np.asarray((w * per).sum() / norm, dtype=z.dtype)

    def backward(g):
        sig = ad._stable_sigmoid(z)
        return (g * w * (sig - y) / norm,)

    return Tensor._make(loss, (logits,), backward)


# data -------------------------------------------------------------------------
@dataclass
class FeatureSet:
    h_raw: np.ndarray
    utt_ids: list

    def __len__(self):
        return len(self.utt_ids)

    def subset(self, idx) -> "FeatureSet":
        idx = list(idx)
        return FeatureSet(self.h_raw[idx], [self.utt_ids[i] for i in idx])

    def select(self, utt_ids) -> "FeatureSet":
        pos = {u: i for i, u in enumerate(self.utt_ids)}
        missing = [u for u in utt_ids if u not in pos]
        if missing:
            raise KeyError(f"features missing for {missing[:3]}...")
        return self.subset([pos[u] for u in utt_ids])


def load_split(dataset_dir, split: str) -> list:
    rows = read_manifest(Path(dataset_dir) / f"{split}.jsonl")
    if not rows:
        raise ValueError(f"split {split!r} is empty")
    return rows


def crop_seed(seed: int, utt_id: str, epoch: int | None = None) -> np.random.SeedSequence:
    key = [int(seed), zlib.crc32(utt_id.encode())]
    if epoch is not None:
        key.append(int(epoch))
    return np.random.SeedSequence(key)


def load_clip(row: dict, n_samples: int, seed: int, epoch: int | None = None) -> np.ndarray:
    w = read_wav(row["abs_path"])
    if w.sample_rate != SAMPLE_RATE:
        w = resample(w, SAMPLE_RATE)
    return fix_length(w, n_samples, "crop-random", crop_seed(seed, row["utt_id"], epoch)).samples


def extract_features(rows, model, seed: int = 0, n_samples: int | None = None,
                     epoch: int | None = None, batch_size: int = 32) -> FeatureSet:
    """Frozen-encoder features for every row (order preserved)."""
    n = n_samples or model.config.input_samples
    out = []
    for start in range(0, len(rows), batch_size):
        chunk = rows[start : start + batch_size]
        audio = np.stack([load_clip(r, n, seed, epoch) for r in chunk])
        out.append(model.feature_encoder(audio))
    h = np.concatenate(out) if out else np.zeros((0, model.config.n_frames, model.config.embed_dim), model.dtype)
    return FeatureSet(h, [r["utt_id"] for r in rows])


def predict(model, features: FeatureSet, batch_size: int = 32) -> np.ndarray:
    scores = []
    for start in range(0, len(features), batch_size):
        scores.append(model.forward(features.h_raw[start : start + batch_size]).data.astype(np.float64))
    return np.concatenate(scores) if scores else np.zeros(0)


# training -----------------------------------------------------------------------
@dataclass
class TrainResult:
    best_state: dict
    log: list = field(default_factory=list)
    best_epoch: int = -1
    best_dev_eer: float | None = None


def frozen_snapshot(model) -> dict:
    return {k: v.data.tobytes() for k, v in model.frozen_parameters().items()}


def train(rows, model, cfg: TrainConfig, dev_rows=None, features: FeatureSet | None = None,
          dev_features: FeatureSet | None = None, out_dir=None) -> TrainResult:
    """Prompt-tune *model* on the *cfg.task* rows of a training split.

    Only ``model.trainable_parameters()`` are handed to the optimizer. After
    every epoch the dev EER (when a dev split is given) picks the best
    state, which is returned and written as ``best.ckpt`` under *out_dir*.
    """
    rows, labels = task_rows(rows, cfg.task)
    if not rows:
        raise ValueError(f"no training rows carry a label for the {cfg.task} task")
    utt_ids = [r["utt_id"] for r in rows]
    feats = features.select(utt_ids) if features is not None else extract_features(rows, model, cfg.seed)

    dev = None
    if dev_rows is not None:
        d_rows, d_labels = task_rows(dev_rows, cfg.task)
        if d_rows and len(set(d_labels.tolist())) == 2:
            d_ids = [r["utt_id"] for r in d_rows]
            d_feats = dev_features.select(d_ids) if dev_features is not None else extract_features(d_rows, model, cfg.seed)
            dev = (d_feats, d_labels)

    opt = AdamW(model.trainable_parameters(), cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(best_state=model.state_dict())
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(cfg.epochs):
        if cfg.recrop_each_epoch and epoch > 0:
            feats = extract_features(rows, model, cfg.seed, epoch=epoch)
        order = rng.permutation(len(rows))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            opt.zero_grad()
            logits = model.forward(feats.h_raw[idx])
            loss = bce_loss(logits, labels[idx], cfg.pos_weight)
            if not np.isfinite(loss.data):
                raise NumericalError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            total += float(loss.data) * len(idx)
            count += len(idx)
        train_loss = total / count
        dev_eer = None
        if dev is not None:
            dev_eer = compute_eer(predict(model, dev[0]), dev[1])[0]
        result.log.append({"epoch": epoch, "train_loss": train_loss, "dev_eer": dev_eer})
        log.info("epoch %d loss %.5f dev_eer %s", epoch, train_loss,
                 "-" if dev_eer is None else f"{dev_eer:.4f}")
        improved = dev_eer is None or result.best_dev_eer is None or dev_eer < result.best_dev_eer
        if improved:
            result.best_state = model.state_dict()
            result.best_epoch = epoch
            result.best_dev_eer = dev_eer
            if out_dir is not None:
                model.save(out_dir / "best.ckpt", extra={"epoch": epoch, "dev_eer": dev_eer,
                                                         "train": asdict(cfg)})
    if out_dir is not None:
        write_log(result.log, out_dir / "train_log.csv")
    return result


def write_log(entries, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "dev_eer"])
        for e in entries:
            w.writerow([e["epoch"], repr(e["train_loss"]), "" if e["dev_eer"] is None else repr(e["dev_eer"])])
