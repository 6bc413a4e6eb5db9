"""SGD training loop, LR schedule, and checkpoint serialization.

The optimizer is classic momentum SGD; weight decay is added to the raw
gradient but skipped for normalization parameters, biases flagged no-decay
and the ring radius. The LR steps down by the decay factor at configurable
fractions of the training run. With one worker everything, including batch
composition and crop offsets, derives from the config seed, so two runs
produce bit-identical checkpoints.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .aggregation import SpeakerNet, build_model
from .config import RunConfig
from .corpus import read_manifest
from .frontend import compute_logmel, mean_normalize_sliding, read_wav_mono
from .losses import Objective, build_objective
from .nn import Module
from .tensor import Tensor

CHECKPOINT_MAGIC = b"SPKV"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR_KIND = {"f": {4: 0, 8: 1}}


class DivergenceError(ArithmeticError):
    """Training loss left the finite domain."""


def lr_schedule(epoch: int, cfg: RunConfig) -> float:
    """Step decay: initial LR scaled by decay_factor at each milestone
    fraction of the total epoch budget."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    milestones = [float(m) for m in cfg.lr_milestones.split(",") if m.strip()]
    passed = sum(1 for m in milestones if epoch >= int(m * cfg.epochs))
    return cfg.lr_initial * cfg.lr_decay_factor ** passed


class SgdMomentum:
    def __init__(self, params, lr: float, momentum: float, weight_decay: float):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and getattr(p, "decay", True):
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# -- data preparation ---------------------------------------------------------------


@dataclass
class TrainingSet:
    features: list              # float32 [64, T] arrays, raw log-Mel normalized
    labels: np.ndarray
    speaker_ids: list

    def __len__(self):
        return len(self.features)


def build_training_set(manifest_path, cfg: RunConfig) -> TrainingSet:
    """Load waveforms, extract normalized log-Mels once, map speakers to ints."""
    entries = read_manifest(manifest_path)
    speakers = sorted({spk for spk, _ in entries})
    index = {spk: i for i, spk in enumerate(speakers)}
    feats, labels = [], []
    for spk, path in entries:
        pcm, rate = read_wav_mono(path)
        f = compute_logmel(pcm, rate, cfg.frame_shift_ms, cfg.n_fft, cfg.fmin_hz, cfg.log_floor)
        f = mean_normalize_sliding(f, cfg.mean_norm_window_s)
        feats.append(f.mels.astype(np.float32))
        labels.append(index[spk])
    return TrainingSet(features=feats, labels=np.asarray(labels), speaker_ids=speakers)


def random_crop(mels: np.ndarray, crop: int, rng: np.random.Generator) -> np.ndarray:
    """Contiguous crop of ``crop`` frames; shorter inputs are wrap-padded."""
    t = mels.shape[1]
    if t >= crop:
        start = int(rng.integers(0, t - crop + 1))
        return mels[:, start:start + crop]
    reps = int(np.ceil(crop / t))
    return np.tile(mels, (1, reps))[:, :crop]


# -- training loop ------------------------------------------------------------------


@dataclass
class TrainResult:
    metrics: list               # (epoch, lr, loss, accuracy)
    final_path: Path
    best_path: Path
    final_loss: float


def train(model: SpeakerNet, objective: Objective, data: TrainingSet,
          cfg: RunConfig, out_dir, log=print) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if len(set(data.labels.tolist())) < 2:
        raise ValueError("training needs at least two speakers")

    prev_checks = T.set_finite_checks(cfg.finite_checks)
    rng = np.random.default_rng(np.random.PCG64((cfg.seed, 0x7121)))
    params = _unique_params(model, objective)
    opt = SgdMomentum(params, cfg.lr_initial, cfg.momentum, cfg.weight_decay)
    dtype = cfg.numpy_dtype()
    metrics = []
    best_loss = np.inf
    best_path = out_dir / "best.ckpt"
    final_path = out_dir / "final.ckpt"

    try:
        for epoch in range(cfg.epochs):
            opt.lr = lr_schedule(epoch, cfg)
            order = rng.permutation(len(data))
            num_batches = len(order) // cfg.batch_size
            if num_batches == 0:
                raise ValueError(f"batch size {cfg.batch_size} exceeds dataset size {len(order)}")
            total_loss = 0.0
            correct = 0
            seen = 0
            model.train()
            for b in range(num_batches):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                crops = np.stack([random_crop(data.features[i], cfg.crop_frames, rng)
                                  for i in idx])
                x = Tensor(crops[:, None, :, :].astype(dtype))
                labels = data.labels[idx]
                emb = model(x)
                loss = objective.loss(emb, labels)
                value = loss.item()
                if not np.isfinite(value):
                    raise DivergenceError(
                        f"non-finite loss {value} at epoch {epoch} batch {b}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                objective.step_iteration()
                with T.no_grad():
                    pred = objective.logits(emb.detach()).data.argmax(axis=1)
                correct += int((pred == labels).sum())
                seen += len(idx)
                total_loss += value * len(idx)
            epoch_loss = total_loss / seen
            accuracy = correct / seen
            metrics.append((epoch, opt.lr, epoch_loss, accuracy))
            log(f"epoch {epoch:3d}  lr {opt.lr:.4f}  loss {epoch_loss:.4f}  acc {accuracy:.3f}")
            if epoch_loss < best_loss:
                best_loss = epoch_loss
                save_checkpoint(best_path, cfg, model, objective)
        save_checkpoint(final_path, cfg, model, objective)
        write_metrics_csv(out_dir / "metrics.csv", metrics)
    finally:
        T.set_finite_checks(prev_checks)
    return TrainResult(metrics=metrics, final_path=final_path, best_path=best_path,
                       final_loss=metrics[-1][2])


def _unique_params(*modules: Module):
    seen = {}
    for m in modules:
        for p in m.parameters():
            seen.setdefault(id(p), p)
    return list(seen.values())


def write_metrics_csv(path, metrics) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "loss", "accuracy"])
        for epoch, lr, loss, acc in metrics:
            writer.writerow([epoch, f"{lr:.6g}", f"{loss:.6f}", f"{acc:.6f}"])


# -- checkpoints ---------------------------------------------------------------------


def save_checkpoint(path, cfg: RunConfig, model: Module, objective: Module | None = None) -> None:
    """Binary format: magic, version, config text, then named raw tensors.

    Tensors are stored in their in-memory dtype (f32 tag 0, f64 tag 1), so a
    save/load round trip is bit-exact.
    """
    state = dict(model.state_arrays())
    if objective is not None:
        state.update({f"objective.{k}": v for k, v in objective.state_arrays().items()})
    blob = cfg.to_text().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(state)))
        for name, arr in state.items():
            raw_name = name.encode("utf-8")
            arr = np.asarray(arr)
            tag = _TAG_FOR_KIND[arr.dtype.kind][arr.dtype.itemsize]
            fh.write(struct.pack("<H", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<BB", tag, arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path) -> tuple:
    """Returns (RunConfig, {name: array})."""
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        cfg = RunConfig.from_text(fh.read(blob_len).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        state = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            tag, rank = struct.unpack("<BB", fh.read(2))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(rank))
            dtype = _DTYPE_TAGS[tag]
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(n * dtype.itemsize), dtype=dtype).reshape(shape)
            state[name] = arr.astype(dtype.newbyteorder("="))
    return cfg, state


def load_model(path) -> tuple:
    """Rebuild (model, objective, cfg) from a checkpoint file."""
    cfg, state = load_checkpoint(path)
    model = build_model(cfg)
    objective = build_objective(cfg, np.random.default_rng(np.random.PCG64(cfg.seed)),
                                cfg.numpy_dtype())
    model_state = {k: v for k, v in state.items() if not k.startswith("objective.")}
    obj_state = {k[len("objective."):]: v for k, v in state.items() if k.startswith("objective.")}
    model.load_state_arrays(model_state)
    if obj_state:
        objective.load_state_arrays(obj_state)
        if objective.ring is not None and float(objective.ring.radius.data[0]) > 0.0:
            objective.ring._initialized = True
    return model, objective, cfg
