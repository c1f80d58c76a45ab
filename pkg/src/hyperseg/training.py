"""AdamW training with an optional frozen-encoder warm-up phase."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .bandselect import BandStrategy, select_bands
from .hypercube import DatasetManifest, load_cube, load_mask, select_channels
from .models import Model, forward, save_checkpoint

log = logging.getLogger(__name__)


class TrainingConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2000
    lr: float = 1e-5
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch: int = 1
    seed: int = 0
    freeze_backbone_epochs: int = 0
    ignore_background: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.epochs < 1:
            raise TrainingConfigError("epochs must be >= 1")
        if self.lr <= 0:
            raise TrainingConfigError("lr must be positive")
        if self.batch < 1:
            raise TrainingConfigError("batch must be >= 1")
        if not 0 <= self.freeze_backbone_epochs <= self.epochs:
            raise TrainingConfigError("freeze_backbone_epochs must lie in [0, epochs]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: (tuple(v) if k == "betas" else v) for k, v in d.items()})


@dataclass
class ParamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass
class OptimizerState:
    params: dict[str, ParamState] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState,
               config: TrainConfig) -> None:
    """One in-place AdamW update of every array in ``params``.

    Weight decay is decoupled: ``theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)``.
    """
    b1, b2 = config.betas
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {theta.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        s = state.params.get(name)
        if s is None:
            s = state.params[name] = ParamState(np.zeros_like(theta), np.zeros_like(theta))
        s.t += 1
        s.m *= b1
        s.m += (1 - b1) * g
        s.v *= b2
        s.v += (1 - b2) * g * g
        m_hat = s.m / (1 - b1 ** s.t)
        v_hat = s.v / (1 - b2 ** s.t)
        step = config.lr * (m_hat / (np.sqrt(v_hat) + config.eps)) + config.lr * config.weight_decay * theta
        theta -= step.astype(theta.dtype, copy=False)


@dataclass
class TrainResult:
    model: Model
    losses: list[tuple[int, float]]
    band_indices: list[int]
    checkpoint: Path | None = None


def load_split(manifest: DatasetManifest, split: str, indices: list[int], dtype=np.float32):
    """Load ``(x [1, K, H, W], labels [H, W], entry)`` triples for one split."""
    samples = []
    for entry in manifest.split(split):
        cube = select_channels(load_cube(entry.cube), indices)
        mask = load_mask(entry.mask, manifest.class_names)
        x = np.ascontiguousarray(cube.values.transpose(2, 0, 1)[None], dtype=dtype)
        samples.append((x, mask.labels.astype(np.int64), entry))
    return samples


def _mean_loss(model: Model, samples, ignore_index) -> float:
    with nc.no_grad():
        losses = [float(nc.softmax_ce_loss(forward(model, x), y[None], ignore_index).data) for x, y, _ in samples]
    return float(np.mean(losses))


def write_loss_csv(losses: list[tuple[int, float]], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "loss"])
        for epoch, loss in losses:
            writer.writerow([epoch, repr(loss)])


def train(model: Model, manifest: DatasetManifest, bands: BandStrategy, config: TrainConfig,
          out_dir=None, metadata: dict | None = None) -> TrainResult:
    """Fit ``model`` on the manifest's training split.

    The returned loss trace starts with the untrained model (epoch 0) and
    holds the mean training loss after each epoch. Encoder parameters are not
    updated during the first ``config.freeze_backbone_epochs`` epochs.
    """
    indices = select_bands(manifest.grid, bands)
    if len(indices) != model.spec.in_channels:
        raise TrainingConfigError(
            f"band strategy {bands} selects {len(indices)} bands but the model expects {model.spec.in_channels}"
        )
    if len(manifest.class_names) != model.spec.num_classes:
        raise TrainingConfigError(
            f"manifest has {len(manifest.class_names)} classes, model predicts {model.spec.num_classes}"
        )
    dtype = model.params["head.weight"].dtype
    samples = load_split(manifest, "train", indices, dtype)
    if not samples:
        raise TrainingConfigError("manifest has no training entries")
    ignore = 0 if config.ignore_background else None
    rng = np.random.default_rng(config.seed)
    state = OptimizerState()
    out_dir = Path(out_dir) if out_dir is not None else None
    meta = {
        **(metadata or {}),
        "bands": str(bands),
        "band_indices": indices,
        "class_names": list(manifest.class_names),
        "train_config": config.to_dict(),
    }

    losses = [(0, _mean_loss(model, samples, ignore))]
    log.info("epoch 0 loss %.6f", losses[0][1])
    for epoch in range(config.epochs):
        frozen = epoch < config.freeze_backbone_epochs
        for n, t in model.parameters("encoder"):
            t.requires_grad = not frozen
        active = [(n, t) for n, t in model.parameters() if t.requires_grad]
        order = rng.permutation(len(samples))
        for start in range(0, len(order), config.batch):
            chunk = [samples[i] for i in order[start:start + config.batch]]
            if len({s[0].shape for s in chunk}) > 1:
                raise TrainingConfigError("images in one batch must share a size; use batch=1")
            x = nc.Tensor(np.concatenate([s[0] for s in chunk]))
            y = np.stack([s[1] for s in chunk])
            model.zero_grad()
            loss = nc.softmax_ce_loss(forward(model, x), y, ignore)
            nc.backward(loss)
            adamw_step({n: t.data for n, t in active}, {n: t.grad for n, t in active}, state, config)
        losses.append((epoch + 1, _mean_loss(model, samples, ignore)))
        log.info("epoch %d loss %.6f%s", epoch + 1, losses[-1][1], " (encoder frozen)" if frozen else "")
        if out_dir is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            save_checkpoint(model, out_dir / f"checkpoint_epoch{epoch + 1:05d}.ckpt",
                            {**meta, "epochs_completed": epoch + 1})

    checkpoint = None
    if out_dir is not None:
        checkpoint = out_dir / "checkpoint.ckpt"
        save_checkpoint(model, checkpoint, {**meta, "epochs_completed": config.epochs})
        write_loss_csv(losses, out_dir / "loss.csv")
    for _, t in model.parameters():
        t.requires_grad = True
    model.zero_grad()
    return TrainResult(model, losses, indices, checkpoint)
