"""Adam, reduce-on-plateau scheduling, the epoch loop and training checkpoints."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from dagseg import checkpoint
from dagseg.data import AugmentationConfig, SampleRecord, augment, stack_batch
from dagseg.losses import LossWeights, combined_loss
from dagseg.metrics import ConfusionAccumulator
from dagseg.model import ModelConfig, SegNet
from dagseg.tensor import no_grad

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainRunConfig:
    batch_size: int = 16
    max_epochs: int = 50
    seed: int = 0
    lr: float = 1e-3
    w_dice: float = 0.7
    w_scce: float = 0.3
    patience: int = 10
    factor: float = 0.1
    min_lr: float = 1e-6
    min_delta: float = 1e-6
    augment: bool = False
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.w_dice, self.w_scce)


# ---------------------------------------------------------------------------
# optimizer and scheduler
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr: float = 1e-3) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], lr=lr)


def adam_step(params, grads, state: AdamState) -> AdamState:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


class Adam:
    def __init__(self, params, lr: float = 1e-3):
        self.params = list(params)
        self.state = AdamState.for_params(self.params, lr)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        adam_step(self.params, grads, self.state)


@dataclass
class PlateauScheduler:
    lr: float = 1e-3
    factor: float = 0.1
    patience: int = 10
    min_lr: float = 1e-6
    min_delta: float = 1e-6
    best: float = math.inf
    bad_epochs: int = 0

    def step(self, metric: float) -> float:
        """Feed one epoch's monitored loss; returns the learning rate for the next epoch."""
        if not math.isfinite(metric):
            raise TrainingError(f"monitored loss is not finite: {metric}")
        if metric < self.best - self.min_delta:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


def scheduler_step(s: PlateauScheduler, val_loss: float) -> float:
    return s.step(val_loss)


# ---------------------------------------------------------------------------
# history
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_iou: float
    lr: float

    def to_line(self) -> str:
        return f"{self.epoch}\t{self.train_loss!r}\t{self.val_loss!r}\t{self.val_iou!r}\t{self.lr!r}"

    @classmethod
    def from_line(cls, line: str) -> "EpochRecord":
        e, tl, vl, vi, lr = line.split("\t")
        return cls(int(e), float(tl), float(vl), float(vi), float(lr))


def history_text(history: list[EpochRecord]) -> str:
    """One ``epoch train_loss val_loss val_iou lr`` line per epoch, tab-separated."""
    return "".join(r.to_line() + "\n" for r in history)


def read_history(path) -> list[EpochRecord]:
    return [EpochRecord.from_line(line) for line in Path(path).read_text().splitlines() if line]


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------


def evaluate_records(model: SegNet, records: list[SampleRecord], batch_size: int, weights: LossWeights):
    """Eval-mode loss (pixel-weighted batch mean) and confusion counts."""
    model.eval()
    acc = ConfusionAccumulator(model.config.num_classes)
    total, count = 0.0, 0
    with no_grad():
        for start in range(0, len(records), batch_size):
            images, masks = stack_batch(records[start : start + batch_size])
            logits = model(images)
            total += combined_loss(logits, masks, weights).item() * len(masks)
            count += len(masks)
            acc.update(logits.data.argmax(axis=-1), masks)
    return total / max(count, 1), acc


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def model_checkpoint(model: SegNet, meta: dict | None = None) -> checkpoint.Checkpoint:
    from dagseg.config import to_flat

    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    return checkpoint.Checkpoint({"model": to_flat(model.config)}, tensors, dict(meta or {}))


def save_model(path, model: SegNet, meta: dict | None = None) -> None:
    checkpoint.save(path, model_checkpoint(model, meta))


def load_model(path) -> tuple[SegNet, checkpoint.Checkpoint]:
    from dagseg.config import from_flat

    ckpt = checkpoint.load(path)
    try:
        cfg = from_flat(ModelConfig, ckpt.config["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise checkpoint.CheckpointError(f"bad model config in checkpoint: {exc}") from exc
    model = SegNet(cfg)
    prefix = "model."
    model.load_state_dict({k[len(prefix):]: v for k, v in ckpt.tensors.items() if k.startswith(prefix)})
    return model, ckpt


@dataclass
class TrainResult:
    history: list[EpochRecord] = field(default_factory=list)
    best_state: dict[str, np.ndarray] | None = None
    best_epoch: int = 0
    best_val_loss: float = math.inf


def _training_checkpoint(model, opt: Adam, sched: PlateauScheduler, cfg: TrainRunConfig, epoch: int, result: TrainResult):
    from dagseg.config import to_flat

    names = [n for n, _ in model.named_parameters()]
    ckpt = model_checkpoint(model)
    for name, m, v in zip(names, opt.state.m, opt.state.v):
        ckpt.tensors[f"adam.m.{name}"] = m
        ckpt.tensors[f"adam.v.{name}"] = v
    if result.best_state is not None:
        for k, arr in result.best_state.items():
            ckpt.tensors[f"best.{k}"] = arr
    st = opt.state
    ckpt.meta = {
        "epoch": epoch,
        "train": to_flat(cfg),
        "adam": {"step": st.step, "lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps},
        "scheduler": asdict(sched),
        "history": [r.to_line() for r in result.history],
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
    }
    return ckpt


def _restore(ckpt, model, opt: Adam, result: TrainResult) -> tuple[int, PlateauScheduler]:
    model.load_state_dict({k[6:]: v for k, v in ckpt.tensors.items() if k.startswith("model.")})
    names = [n for n, _ in model.named_parameters()]
    try:
        for i, name in enumerate(names):
            opt.state.m[i][...] = ckpt.tensors[f"adam.m.{name}"]
            opt.state.v[i][...] = ckpt.tensors[f"adam.v.{name}"]
        meta = ckpt.meta
        for key, val in meta["adam"].items():
            setattr(opt.state, key, val)
        sched = PlateauScheduler(**meta["scheduler"])
        result.history = [EpochRecord.from_line(s) for s in meta["history"]]
        result.best_epoch = meta["best_epoch"]
        result.best_val_loss = meta["best_val_loss"]
        best = {k[5:]: v for k, v in ckpt.tensors.items() if k.startswith("best.")}
        result.best_state = best or None
        return int(meta["epoch"]), sched
    except KeyError as exc:
        raise checkpoint.CheckpointError(f"checkpoint lacks training state: {exc}") from exc


# ---------------------------------------------------------------------------
# epoch loop
# ---------------------------------------------------------------------------


def train(
    model: SegNet,
    train_set: list[SampleRecord],
    val_set: list[SampleRecord] | None,
    cfg: TrainRunConfig | None = None,
    out_dir=None,
    resume=None,
    aug: AugmentationConfig | None = None,
) -> TrainResult:
    """Train ``model`` in place for ``cfg.max_epochs`` epochs (counting resumed ones).

    Without a validation set the epoch's training loss is monitored and
    ``val_iou`` comes from the training-mode predictions made during the epoch.
    """
    cfg = cfg or TrainRunConfig()
    if not train_set:
        raise TrainingError("training split is empty")
    aug = aug or AugmentationConfig(seed=cfg.seed)
    weights = cfg.loss_weights
    opt = Adam(model.parameters(), cfg.lr)
    sched = PlateauScheduler(cfg.lr, cfg.factor, cfg.patience, cfg.min_lr, cfg.min_delta)
    result = TrainResult()
    start = 0
    if resume is not None:
        ckpt = resume if isinstance(resume, checkpoint.Checkpoint) else checkpoint.load(resume)
        start, sched = _restore(ckpt, model, opt, result)
        opt.lr = sched.lr
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    for epoch in range(start + 1, cfg.max_epochs + 1):
        lr_used = opt.lr
        model.train()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
        total, count = 0.0, 0
        seen = ConfusionAccumulator(model.config.num_classes)
        for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [train_set[i] for i in order[lo : lo + cfg.batch_size]]
            if cfg.augment:
                batch = [augment(r, aug, epoch) for r in batch]
            images, masks = stack_batch(batch)
            opt.zero_grad()
            logits = model(images)
            loss = combined_loss(logits, masks, weights)
            value = loss.item()
            if not math.isfinite(value):
                ids = ", ".join(r.id for r in batch)
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b} ({ids})")
            seen.update(logits.data.argmax(axis=-1), masks)
            loss.backward()
            opt.step()
            total += value * len(batch)
            count += len(batch)
        train_loss = total / count

        if val_set:
            val_loss, acc = evaluate_records(model, val_set, cfg.batch_size, weights)
            val_iou = acc.report().macro["iou"]
        else:
            val_loss, val_iou = train_loss, seen.report().macro["iou"]
        opt.lr = sched.step(val_loss)
        result.history.append(EpochRecord(epoch, train_loss, val_loss, val_iou, lr_used))
        log.info("epoch %d train_loss %.5f val_loss %.5f val_iou %.4f lr %.2e", epoch, train_loss, val_loss, val_iou, lr_used)

        if val_loss < result.best_val_loss:
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            result.best_state = {k: v.copy() for k, v in model.state_dict().items()}
            if out is not None:
                save_model(out / "best.ckpt", model, {"epoch": epoch, "val_loss": val_loss})
        if out is not None:
            (out / "history.tsv").write_text(history_text(result.history))
            if cfg.checkpoint_every and (epoch % cfg.checkpoint_every == 0 or epoch == cfg.max_epochs):
                checkpoint.save(out / "last.ckpt", _training_checkpoint(model, opt, sched, cfg, epoch, result))
    return result

