"""Naive pseudo-labeling with both deliveries installed.

One step: paste labeled patches into the unlabeled images, run both flows
through the network once, take argmax pseudo-labels from the unlabeled
logits, overwrite the pasted regions with the donor ground truth, and
minimise ``L_s + L_u`` with SGD under a polynomial learning-rate decay.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .dataio import CorpusTensors, PairedBatch, augment, is_one_hot, next_pair
from .errors import CheckpointError, ConfigError, ContractError, NumericalError
from .l2u import PatchSpec, paste, select_patch
from .model import MESSENGER_TINY, MessengerNet, StageConfig, argmax_lowest

POLY_POWER = 0.9
CHECKPOINT_DIR = "checkpoints"
LOSS_LOG = "loss.csv"


def poly_lr(lr_init: float, i: int, total: int) -> float:
    if not 0 <= i <= total:
        raise ContractError(f"iteration {i} outside [0, {total}]")
    return lr_init * (1.0 - i / total) ** POLY_POWER


def format_stages(stages) -> str:
    return ",".join(f"{s.channels}:{s.patch_stride}:{s.num_blocks}:{s.ffn_expansion}" for s in stages)


def parse_stages(text: str) -> tuple[StageConfig, ...]:
    try:
        return tuple(StageConfig(*(int(v) for v in part.split(":"))) for part in text.split(","))
    except (TypeError, ValueError):
        raise ConfigError(f"bad stage list {text!r}; expected C:stride:blocks:expansion,...") from None


@dataclass
class TrainConfig:
    lr_init: float = 0.01
    total_iters: int = 2000
    batch_size: int = 16
    momentum: float = 0.9
    weight_decay: float = 1e-4
    alpha: float = 0.5
    patch_size: int = 32
    seed: int = 0
    checkpoint_every: int = 500
    # False swaps every messenger block for plain channel self-attention
    u2l: bool = True
    # False skips patch selection and pasting entirely
    l2u: bool = True
    augment: bool = True
    heads: int = 1
    embed_dim: int = 64
    stages: tuple[StageConfig, ...] = MESSENGER_TINY

    def validate(self):
        if not self.lr_init > 0:
            raise ConfigError("lr_init must be positive")
        if self.total_iters < 1:
            raise ConfigError("total_iters must be >= 1")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch_size must be even and >= 2")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if not 0 <= self.alpha <= 1:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.patch_size < 0:
            raise ConfigError("patch_size must be nonnegative")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")

    def to_strings(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = format_stages(v) if f.name == "stages" else repr(v) if isinstance(v, float) else str(v)
        return out

    @classmethod
    def from_strings(cls, values: dict[str, str]) -> "TrainConfig":
        kwargs = {}
        types = {f.name: f for f in fields(cls)}
        for key, text in values.items():
            if key not in types:
                raise ConfigError(f"unknown training option {key!r}")
            default = getattr(cls, key, None) if key != "stages" else MESSENGER_TINY
            try:
                if key == "stages":
                    kwargs[key] = parse_stages(text)
                elif isinstance(default, bool):
                    if text.lower() not in ("true", "false", "1", "0"):
                        raise ValueError(text)
                    kwargs[key] = text.lower() in ("true", "1")
                elif isinstance(default, int):
                    kwargs[key] = int(text)
                else:
                    kwargs[key] = float(text)
            except ValueError:
                raise ConfigError(f"option {key}: cannot parse {text!r}") from None
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


@dataclass
class StepRecord:
    """What the most recent step fed the unlabeled flow and optimised."""

    patches: list[PatchSpec]
    mixed_images: torch.Tensor
    targets: torch.Tensor
    loss: float


@dataclass
class TrainState:
    config: TrainConfig
    num_classes: int
    model: MessengerNet
    optimizer: torch.optim.SGD
    data_rng: torch.Generator
    patch_rng: torch.Generator
    iteration: int = 0
    # rows of (iter, lr, L_s, L_u)
    history: list[tuple[int, float, float, float]] = field(default_factory=list)
    last_step: StepRecord | None = None


def build_model(config: TrainConfig, num_classes: int) -> MessengerNet:
    torch.manual_seed(config.seed)
    return MessengerNet(num_classes, config.stages, alpha=config.alpha, heads=config.heads,
                        embed_dim=config.embed_dim, cross=config.u2l)


def init_state(config: TrainConfig, num_classes: int) -> TrainState:
    config.validate()
    model = build_model(config, num_classes)
    opt = torch.optim.SGD(model.parameters(), lr=config.lr_init, momentum=config.momentum,
                          weight_decay=config.weight_decay, nesterov=False)
    data_rng = torch.Generator().manual_seed(config.seed)
    patch_rng = torch.Generator().manual_seed(config.seed + 7919)
    return TrainState(config, num_classes, model, opt, data_rng, patch_rng)


def make_pseudo_labels(logits_u: torch.Tensor, size: tuple[int, int] | None = None) -> torch.Tensor:
    """Detached one-hot argmax of the logits, nearest-resized to ``size``."""
    with torch.no_grad():
        classes = argmax_lowest(logits_u.detach())
        onehot = F.one_hot(classes, logits_u.shape[1]).permute(0, 3, 1, 2).to(logits_u.dtype)
        if size is not None and tuple(onehot.shape[-2:]) != tuple(size):
            onehot = F.interpolate(onehot, size=size, mode="nearest")
    return onehot


def cross_entropy(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over batch and pixels of ``-sum_c target_c log softmax(logits)_c``."""
    if logits.shape != target.shape:
        raise ContractError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} differ")
    if not is_one_hot(target):
        raise ContractError("cross-entropy target is not one-hot")
    return -(target * F.log_softmax(logits, dim=1)).sum(1).mean()


supervised_loss = cross_entropy
unsupervised_loss = cross_entropy


def train_step(state: TrainState, batch: PairedBatch) -> TrainState:
    cfg = state.config
    if state.iteration >= cfg.total_iters:
        raise ContractError(f"training already finished at iteration {state.iteration}")
    x_l, y_l, x_u = batch.labeled_images, batch.labeled_labels, batch.unlabeled_images

    patches: list[PatchSpec] = []
    if cfg.l2u:
        patches = [select_patch(y_l[j], cfg.patch_size, state.patch_rng) for j in range(batch.half)]
        x_u = torch.stack([paste(x_u[j], x_l[j], p) for j, p in enumerate(patches)])

    lr = poly_lr(cfg.lr_init, state.iteration, cfg.total_iters)
    state.model.train()
    try:
        logits_l, logits_u = state.model(x_l, x_u, mode="train")
    except NumericalError as exc:
        exc.diagnostics.update(iteration=state.iteration, lr=lr)
        raise
    for name, logits in (("labeled", logits_l), ("unlabeled", logits_u)):
        if not torch.isfinite(logits).all():
            raise NumericalError(
                f"non-finite {name} logits at iteration {state.iteration}",
                {"iteration": state.iteration, "lr": lr, "where": f"{name} logits"},
            )
    y_u = make_pseudo_labels(logits_u, tuple(y_l.shape[-2:]))
    if cfg.l2u:
        y_u = torch.stack([paste(y_u[j], y_l[j], p) for j, p in enumerate(patches)])

    loss_s = supervised_loss(logits_l, y_l)
    loss_u = unsupervised_loss(logits_u, y_u)
    # summed in float64 so the reported total is exactly L_s + L_u
    loss = loss_s.double() + loss_u.double()
    if not torch.isfinite(loss):
        raise NumericalError(
            f"non-finite loss at iteration {state.iteration}",
            {"iteration": state.iteration, "lr": lr, "loss_s": loss_s.item(), "loss_u": loss_u.item()},
        )
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.history.append((state.iteration, lr, loss_s.item(), loss_u.item()))
    state.last_step = StepRecord(patches, x_u, y_u, loss.item())
    state.iteration += 1
    return state


def draw_batch(state: TrainState, data: CorpusTensors) -> PairedBatch:
    batch = next_pair(data, state.config.batch_size, state.data_rng)
    if state.config.augment:
        batch = augment(batch, state.data_rng)
    return batch


# ---------------------------------------------------------------------------
# checkpoints and run directories
# ---------------------------------------------------------------------------


def save_checkpoint(state: TrainState, path: str | Path):
    cfg = state.config
    header = {
        "format": "sdmessenger-train",
        "iteration": state.iteration,
        "num_classes": state.num_classes,
        "alpha": repr(cfg.alpha),
        "seed": cfg.seed,
        "stages": format_stages(cfg.stages),
    }
    header.update({f"train.{k}": v for k, v in cfg.to_strings().items()})
    tensors = {f"model/{k}": v for k, v in state.model.state_dict().items()}
    names = {id(p): n for n, p in state.model.named_parameters()}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            buf = state.optimizer.state.get(p, {}).get("momentum_buffer")
            if buf is not None:
                tensors[f"optim/{names[id(p)]}"] = buf
    tensors["rng/data"] = state.data_rng.get_state()
    tensors["rng/patch"] = state.patch_rng.get_state()
    hist = torch.tensor([h[1:] for h in state.history], dtype=torch.float64).reshape(-1, 3)
    tensors["history/iter"] = torch.tensor([h[0] for h in state.history], dtype=torch.int64)
    tensors["history/values"] = hist
    ckpt.save_archive(path, header, tensors)


def load_checkpoint(path: str | Path) -> TrainState:
    header, tensors = ckpt.load_archive(path)
    if header.get("format") != "sdmessenger-train":
        raise CheckpointError(f"{path}: not a training checkpoint")
    cfg = TrainConfig.from_strings({k[6:]: v for k, v in header.items() if k.startswith("train.")})
    state = init_state(cfg, int(header["num_classes"]))
    model_sd = {k[6:]: v for k, v in tensors.items() if k.startswith("model/")}
    try:
        state.model.load_state_dict(model_sd, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not match config: {exc}") from None
    params = dict(state.model.named_parameters())
    for key, buf in tensors.items():
        if key.startswith("optim/"):
            state.optimizer.state[params[key[6:]]]["momentum_buffer"] = buf.clone()
    state.data_rng.set_state(tensors["rng/data"])
    state.patch_rng.set_state(tensors["rng/patch"])
    state.iteration = int(header["iteration"])
    iters, values = tensors["history/iter"].tolist(), tensors["history/values"].tolist()
    state.history = [(i, *v) for i, v in zip(iters, values)]
    return state


def loss_log_text(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iter", "lr", "loss_s", "loss_u"])
    for i, lr, ls, lu in history:
        w.writerow([i, repr(lr), repr(ls), repr(lu)])
    return buf.getvalue()


def read_loss_log(path: str | Path) -> list[tuple[int, float, float, float]]:
    with open(path, newline="") as fh:
        return [(int(r["iter"]), float(r["lr"]), float(r["loss_s"]), float(r["loss_u"]))
                for r in csv.DictReader(fh)]


def checkpoint_path(run_dir: Path, iteration: int) -> Path:
    return run_dir / CHECKPOINT_DIR / f"ckpt_{iteration:06d}.sdm"


def latest_checkpoint(run_dir: str | Path) -> Path | None:
    found = sorted((Path(run_dir) / CHECKPOINT_DIR).glob("ckpt_*.sdm"))
    return found[-1] if found else None


def train(config: TrainConfig, data: CorpusTensors, run_dir: str | Path | None = None,
          state: TrainState | None = None, until: int | None = None,
          on_step: Callable[[TrainState], None] | None = None) -> TrainState:
    """Run (or continue) training up to ``until`` (default: ``total_iters``).

    With ``run_dir`` set, checkpoints land every ``checkpoint_every`` steps
    and at the end, and ``loss.csv`` is rewritten alongside each one.
    """
    if state is None:
        state = init_state(config, data.index.num_classes)
    stop = config.total_iters if until is None else min(until, config.total_iters)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        (run_dir / CHECKPOINT_DIR).mkdir(parents=True, exist_ok=True)
    while state.iteration < stop:
        train_step(state, draw_batch(state, data))
        if on_step is not None:
            on_step(state)
        if run_dir is not None and (state.iteration % config.checkpoint_every == 0 or state.iteration == stop):
            save_checkpoint(state, checkpoint_path(run_dir, state.iteration))
            (run_dir / LOSS_LOG).write_text(loss_log_text(state.history))
    return state


def mean_initial_supervised(history, n: int = 20) -> float:
    head = [h[2] for h in history[:n]]
    return sum(head) / len(head) if head else math.nan
