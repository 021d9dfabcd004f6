"""Alignment regimes, optimizers and the training loop."""

from __future__ import annotations

import csv
import enum
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .archive import load_archive, read_manifest, save_archive
from .lora import LoraLinear, lora_modules
from .tensor import backward

log = logging.getLogger(__name__)


class AlignmentMode(str, enum.Enum):
    SHALLOW = "shallow"
    DELTA = "delta"
    DEEP = "deep"

    @classmethod
    def parse(cls, value) -> "AlignmentMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown alignment mode {value!r}; choose shallow, delta or deep") from None


class ModeConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


def trainable_names(model, mode) -> list[str]:
    """Names of the tensors a mode trains. The LM never appears."""
    mode = AlignmentMode.parse(mode)
    names = [n for n, _ in model.named_parameters()]
    chosen = [n for n in names if n.startswith("mapper.")]
    if mode is AlignmentMode.DELTA:
        if not model.has_lora():
            raise ModeConfigError("delta mode needs LoRA adapters on the encoder (call add_lora first)")
        chosen += [n for n in names if n.startswith("encoder.") and n.rsplit(".", 1)[-1] in ("lora_A", "lora_B")]
    elif mode is AlignmentMode.DEEP:
        if model.has_lora():
            raise ModeConfigError("deep mode trains the full encoder; merge or drop the LoRA adapters first")
        chosen += [n for n in names if n.startswith("encoder.")]
    return chosen


def configure_mode(model, mode) -> list[tuple[str, object]]:
    """Flag exactly the mode's tensors as trainable and freeze everything else."""
    keep = set(trainable_names(model, mode))
    selected = []
    for name, p in model.named_parameters():
        p.requires_grad = name in keep
        p.grad = None
        if p.requires_grad:
            selected.append((name, p))
    return selected


def count_trainable(model, mode) -> int:
    """Trainable scalar count: enumerated on a model, closed-form on a :class:`Geometry`."""
    if hasattr(model, "named_parameters"):
        params = dict(model.named_parameters())
        return sum(params[n].size for n in trainable_names(model, mode))
    return model.count(mode)


# -- optimizers --------------------------------------------------------------------

class SGD:
    def __init__(self, params, lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        for _, p in self.params:
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad

    def state_dict(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_dict(self, state) -> None:
        pass


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data * (1 - self.lr * self.wd) - self.lr * update

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"optim.t": np.array(self.t, dtype=np.int64)}
        for n in self.m:
            state[f"optim.m.{n}"] = self.m[n]
            state[f"optim.v.{n}"] = self.v[n]
        return state

    def load_state_dict(self, state) -> None:
        self.t = int(state["optim.t"])
        for n in self.m:
            self.m[n] = np.array(state[f"optim.m.{n}"])
            self.v[n] = np.array(state[f"optim.v.{n}"])


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for _, p in params if p.grad is not None]
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for _, p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# -- config ------------------------------------------------------------------------

@dataclass
class TrainConfig:
    mode: str = "shallow"
    lr: float = 1e-4
    batch_size: int = 6
    steps: int = 1000
    seed: int = 0
    optimizer: str = "adamw"
    weight_decay: float = 0.01
    clip_norm: Optional[float] = 1.0
    lora_r: int = 16
    lora_alpha: float = 16.0
    eval_every: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        AlignmentMode.parse(self.mode)
        if not self.lr >= 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown train config keys: {unknown}")
        return cls(**d)


def make_optimizer(params, config: TrainConfig):
    if config.optimizer == "sgd":
        return SGD(params, config.lr)
    return AdamW(params, config.lr, weight_decay=config.weight_decay)


# -- steps -------------------------------------------------------------------------

def train_step(model, images, report_ids, params, optimizer, clip_norm: Optional[float] = 1.0,
               step: int = 0, batch_ids: Sequence[str] = ()) -> float:
    """One forward/backward/update over a batch; only ``params`` move."""
    for _, p in params:
        p.grad = None
    loss = model.loss(images, report_ids=report_ids)
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value} at step {step} on batch {list(batch_ids)}")
    backward(loss)
    if clip_norm:
        clip_grad_norm(params, clip_norm)
    optimizer.step()
    return value


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices of the ``step``-th batch under per-epoch seeded shuffles (resumable)."""
    per_epoch = max(1, -(-n // batch_size))
    epoch, k = divmod(step, per_epoch)
    order = epoch_order(n, seed, epoch)
    return order[k * batch_size : (k + 1) * batch_size]


def evaluate_loss(model, samples, batch_size: int = 16) -> float:
    """Token-weighted mean report NLL over ``samples`` with no parameter updates."""
    total, count = 0.0, 0
    states = [(p, p.requires_grad) for p in model.parameters()]
    for p, _ in states:
        p.requires_grad = False
    try:
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            ids = model.encode_reports([s.report for s in chunk])
            n = sum(len(r) for r in ids)
            total += model.loss(np.stack([s.image for s in chunk]), report_ids=ids).item() * n
            count += n
    finally:
        for p, flag in states:
            p.requires_grad = flag
    return total / max(count, 1)


# -- fit -----------------------------------------------------------------------------

@dataclass
class TrainReport:
    mode: str
    losses: list[tuple[int, str, float]] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    best_val: Optional[float] = None
    trainable: int = 0

    def train_losses(self) -> list[float]:
        return [l for _, split, l in self.losses if split == "train"]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "split", "loss"])
            for step, split, loss in self.losses:
                w.writerow([step, split, repr(float(loss))])


def read_loss_csv(path) -> list[tuple[int, str, float]]:
    with open(path, newline="") as fh:
        return [(int(r["step"]), r["split"], float(r["loss"])) for r in csv.DictReader(fh)]


def prepare_model(model, config: TrainConfig):
    """Attach adapters if the mode needs them, then freeze per mode."""
    mode = AlignmentMode.parse(config.mode)
    if mode is AlignmentMode.DELTA and not model.has_lora():
        model.add_lora(config.lora_r, config.lora_alpha, seed=config.seed)
    return configure_mode(model, mode)


def fit(model, train: Sequence, config: TrainConfig, val: Sequence = (), run_dir=None,
        resume: bool = False, report: Optional[TrainReport] = None) -> TrainReport:
    """Train ``model`` in ``config.mode`` for ``config.steps`` updates.

    Batches follow a per-epoch seeded permutation, so a run resumed from a
    checkpoint at step k sees exactly the batches an uninterrupted run would.
    With ``run_dir`` set, checkpoints (``last`` and ``best``) and ``loss.csv``
    are written there.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    run_dir = Path(run_dir) if run_dir else None
    params = prepare_model(model, config)
    optimizer = make_optimizer(params, config)
    report = report or TrainReport(mode=AlignmentMode.parse(config.mode).value)
    report.trainable = sum(p.size for _, p in params)
    log.info("mode=%s trainable=%d", report.mode, report.trainable)

    start = 0
    if resume:
        if run_dir is None:
            raise ValueError("resume needs a run directory")
        start = load_checkpoint(model, run_dir / "last", optimizer)
        if (run_dir / "loss.csv").exists():
            report.losses = [r for r in read_loss_csv(run_dir / "loss.csv") if r[0] <= start]
        log.info("resumed at step %d", start)

    reports = model.encode_reports([s.report for s in train])
    images = np.stack([s.image for s in train])
    ids = [s.sample_id for s in train]
    n = len(train)
    per_epoch = max(1, -(-n // config.batch_size))
    epoch_t0 = time.perf_counter()

    for step in range(start, config.steps):
        idx = batch_indices(n, config.batch_size, config.seed, step)
        loss = train_step(
            model, images[idx], [reports[i] for i in idx], params, optimizer,
            config.clip_norm, step, [ids[i] for i in idx],
        )
        done = step + 1
        report.losses.append((done, "train", loss))
        if done % per_epoch == 0:
            report.epoch_seconds.append(time.perf_counter() - epoch_t0)
            epoch_t0 = time.perf_counter()
        if val and config.eval_every and done % config.eval_every == 0:
            vloss = evaluate_loss(model, val)
            report.losses.append((done, "val", vloss))
            log.info("step %d train %.4f val %.4f", done, loss, vloss)
            if report.best_val is None or vloss < report.best_val:
                report.best_val = vloss
                if run_dir:
                    save_checkpoint(model, run_dir / "best", config, done, optimizer, {"val_loss": vloss})
        if run_dir and config.checkpoint_every and done % config.checkpoint_every == 0:
            save_checkpoint(model, run_dir / "last", config, done, optimizer, {"train_loss": loss})
            report.write_csv(run_dir / "loss.csv")

    if run_dir:
        final = config.steps
        save_checkpoint(model, run_dir / "last", config, final, optimizer,
                        {"train_loss": report.train_losses()[-1] if report.train_losses() else None})
        report.checkpoints.append(str(run_dir / "last"))
        if (run_dir / "best.json").exists():
            report.checkpoints.append(str(run_dir / "best"))
        report.write_csv(run_dir / "loss.csv")
    return report


# -- checkpoints -----------------------------------------------------------------------

def save_checkpoint(model, path, config: TrainConfig, step: int, optimizer=None, metrics=None) -> None:
    tensors = model.state_dict()
    if optimizer is not None:
        tensors.update(optimizer.state_dict())
    meta = {
        "mode": AlignmentMode.parse(config.mode).value,
        "config": asdict(config),
        "model": model.config.to_dict(),
        "vocab": model.tokenizer.vocab,
        "lora": model.lora_settings,
        "lora_form": "factored" if model.has_lora() else None,
        "step": step,
        "metrics": metrics or {},
    }
    save_archive(path, tensors, meta)


def checkpoint_meta(path) -> dict:
    return read_manifest(path).get("meta", {})


def load_checkpoint(model, path, optimizer=None) -> int:
    """Restore weights (and optimizer moments) in place; returns the saved step."""
    tensors = load_archive(path)
    meta = checkpoint_meta(path)
    if meta.get("lora") and not model.has_lora():
        lora = meta["lora"]
        model.add_lora(lora["r"], lora["alpha"], seed=lora["seed"])
    model_state = {k: v for k, v in tensors.items() if not k.startswith("optim.")}
    model.load_state_dict(model_state)
    if optimizer is not None and any(k.startswith("optim.") for k in tensors):
        optimizer.load_state_dict(tensors)
    return int(meta.get("step", 0))


def snapshot_bytes(model, prefix: str) -> dict[str, bytes]:
    return {n: p.data.tobytes() for n, p in model.named_parameters() if n.startswith(prefix)}


def lora_base_names(model) -> list[str]:
    return [f"encoder.{name}.weight" for name, _ in lora_modules(model.encoder)]


__all__ = [
    "AlignmentMode", "AdamW", "LoraLinear", "ModeConfigError", "SGD", "TrainConfig", "TrainReport",
    "TrainingDiverged", "configure_mode", "count_trainable", "fit", "load_checkpoint", "save_checkpoint",
    "train_step", "trainable_names",
]
