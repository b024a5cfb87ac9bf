"""Training and inference drivers for model graphs."""
from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .autodiff import LOSS_KINDS, Graph
from .nets import model_feeds
from .optim import make_optimizer

log = logging.getLogger(__name__)

THREADS_ENV = "DUNET_NUM_THREADS"
OPTIMIZERS = ("adam", "sgd")


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 3e-3
    epochs: int = 50
    batch_size: int = 4
    loss_kind: str = "bce+dice"
    seed: int = 0
    optimizer: str = "adam"
    warm_start_checkpoint: str | None = None

    def problems(self) -> list[str]:
        out = []
        if not (isinstance(self.lr, (int, float)) and self.lr > 0 and math.isfinite(self.lr)):
            out.append(f"train.lr must be > 0, got {self.lr!r}")
        if not (isinstance(self.epochs, int) and self.epochs >= 0):
            out.append(f"train.epochs must be an integer >= 0, got {self.epochs!r}")
        if not (isinstance(self.batch_size, int) and self.batch_size >= 1):
            out.append(f"train.batch_size must be an integer >= 1, got {self.batch_size!r}")
        if self.loss_kind not in LOSS_KINDS:
            out.append(f"train.loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.optimizer not in OPTIMIZERS:
            out.append(f"train.optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not isinstance(self.seed, int):
            out.append(f"train.seed must be an integer, got {self.seed!r}")
        return out

    def validate(self) -> None:
        probs = self.problems()
        if probs:
            raise ConfigError("; ".join(probs))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ArrayDataset:
    """Model-ready arrays: images (N,C,H,W), masks (N,1,H,W), optional sc."""

    images: np.ndarray
    masks: np.ndarray
    sc: np.ndarray | None = None
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.images)
        if n == 0:
            raise ConfigError("dataset is empty")
        if len(self.masks) != n or (self.sc is not None and len(self.sc) != n):
            raise ConfigError("images, masks and sc must have the same length")
        if not self.ids:
            self.ids = [str(i) for i in range(n)]

    def __len__(self):
        return len(self.images)

    def subset(self, idx) -> "ArrayDataset":
        idx = list(idx)
        return ArrayDataset(self.images[idx], self.masks[idx],
                            None if self.sc is None else self.sc[idx], [self.ids[i] for i in idx])


@dataclass
class TrainResult:
    losses: list[float]
    checkpoint_path: Path | None = None
    loss_csv_path: Path | None = None


def attach_loss(g: Graph, kind: str) -> None:
    """Add a ``target`` input and a scalar ``loss`` output (once)."""
    if "loss" in g.outputs:
        if g.meta.get("loss_kind") != kind:
            raise ConfigError(f"graph already has a {g.meta.get('loss_kind')} loss")
        return
    target = g.input("target")
    g.set_output("loss", g.loss(g.outputs["prob"], target, kind, name="loss"))
    g.meta["loss_kind"] = kind


def warm_start(g: Graph, path) -> None:
    """Load weights from an SGW1 checkpoint, listing every mismatch on failure."""
    g.load_state(checkpoint.load(path))


def _diagnose(g: Graph, epoch: int, ids: list[str], loss: float) -> str:
    bad = [n for n, p in g.params.items() if not np.all(np.isfinite(p.value))]
    norms = {n: float(np.linalg.norm(p.value)) for n, p in g.params.items()}
    worst = max(norms, key=lambda k: norms[k] if math.isfinite(norms[k]) else math.inf)
    return (f"non-finite loss {loss} at epoch {epoch} on samples {ids}; "
            f"non-finite params: {bad or 'none'}; largest param norm {worst}={norms[worst]:.3g}")


def loss_csv(losses: list[float], header: dict) -> str:
    lines = [f"# {k}={v}" for k, v in header.items()]
    lines.append("epoch,loss")
    lines += [f"{i + 1},{l!r}" for i, l in enumerate(losses)]
    return "\n".join(lines) + "\n"


def train(g: Graph, data: ArrayDataset, cfg: TrainConfig, out_dir=None, header: dict | None = None,
          on_epoch=None) -> TrainResult:
    """Mini-batch training with a seeded shuffle.

    Writes ``model.sgw`` and ``loss.csv`` to ``out_dir`` when given.
    ``on_epoch(epoch, loss)`` may return True to stop early.
    """
    cfg.validate()
    if cfg.warm_start_checkpoint:
        warm_start(g, cfg.warm_start_checkpoint)
    attach_loss(g, cfg.loss_kind)
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    n = len(data)
    losses: list[float] = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            feeds = model_feeds(g, data.images[idx], None if data.sc is None else data.sc[idx])
            feeds["target"] = data.masks[idx]
            loss = float(g.forward(feeds, "loss").reshape(()))
            if not math.isfinite(loss):
                raise TrainingError(_diagnose(g, epoch, [data.ids[i] for i in idx], loss))
            g.backward("loss")
            opt.step(g.params)
            total += loss * len(idx)
        losses.append(total / n)
        log.info("epoch %d loss %.6f", epoch, losses[-1])
        if on_epoch is not None and on_epoch(epoch, losses[-1]):
            break
    result = TrainResult(losses)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.checkpoint_path = checkpoint.save(out / "model.sgw", g.state_dict())
        meta = {"seed": cfg.seed, **(header or {})}
        result.loss_csv_path = out / "loss.csv"
        result.loss_csv_path.write_text(loss_csv(losses, meta))
    return result


# largest float32 below one: keeps saturated sigmoid outputs inside the open interval
_P_LO = np.float32(1e-7)
_P_HI = np.nextafter(np.float32(1), np.float32(0))


def infer(g: Graph, image=None, sc=None, ckpt=None, batch_size: int = 8) -> np.ndarray:
    """Probability maps (N, 1, H, W) strictly inside (0, 1)."""
    if ckpt is not None:
        warm_start(g, ckpt)
    feeds = model_feeds(g, image, sc)
    n = len(next(iter(feeds.values())))
    outs = []
    for s in range(0, n, batch_size):
        outs.append(g.forward({k: v[s:s + batch_size] for k, v in feeds.items()}, "prob").copy())
    return np.clip(np.concatenate(outs), _P_LO, _P_HI)


def thread_count() -> int | None:
    v = os.environ.get(THREADS_ENV)
    if v is None or not v.strip():
        return None
    try:
        k = int(v)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {v!r}")
    if k < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {v!r}")
    return k


def limit_threads():
    """Context manager applying ``DUNET_NUM_THREADS`` to the BLAS pools."""
    from contextlib import nullcontext

    from threadpoolctl import threadpool_limits
    k = thread_count()
    return nullcontext() if k is None else threadpool_limits(limits=k)
