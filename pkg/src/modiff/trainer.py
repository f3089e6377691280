"""Shared optimization harness: decoupled-weight-decay Adam with linear
warmup into cosine decay, seed-deterministic batching and noise draws, best-
validation checkpointing, and bitwise-resumable runs."""

import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .errors import CheckpointError, ConfigError, TrainingDivergedError

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    warmup_steps: int = 500
    epochs: int = 50
    batch_size: int = 2
    seed: int = 0
    grad_clip_norm: float = None
    checkpoint_every: int = 0
    total_steps: int = None

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs <= 0:
            raise ConfigError("learning_rate, batch_size, and epochs must be positive")
        if self.warmup_steps < 0 or self.weight_decay < 0:
            raise ConfigError("warmup_steps and weight_decay must be non-negative")


# Paper protocol defaults; the desk-scale config above shortens only the
# epoch budget.
PAPER_PRESET = TrainerConfig(
    learning_rate=1e-4, weight_decay=1e-5, warmup_steps=500, epochs=500, batch_size=2
)


@dataclass
class RunReport:
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    best_val: float = math.inf
    best_epoch: int = -1
    steps: int = 0
    wall_clock_sec: float = 0.0
    config_hash: str = ""
    best_checkpoint: str = None
    final_checkpoint: str = None

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(dataclasses.asdict(self), fh)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls(**json.load(fh))


def config_hash(config):
    blob = json.dumps(dataclasses.asdict(config), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def lr_at_step(step, config):
    """Linear ramp 0 -> lr over warmup_steps, then cosine decay to 0."""
    total = config.total_steps
    if total is None:
        raise ConfigError("lr_at_step needs config.total_steps resolved")
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    lr = config.learning_rate
    warmup = config.warmup_steps
    if warmup > 0 and step < warmup:
        return lr * step / warmup
    if step >= total:
        return 0.0
    span = max(1, total - warmup)
    progress = (step - warmup) / span
    return lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def _val_generator(seed, epoch):
    return torch.Generator().manual_seed((seed * 1_000_003 + epoch * 7_919 + 17) % 2**62)


def _eval_loss(model, dataset, loss_fn, batch_size, generator):
    model_was_training = model.training
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            batch = dataset[start : start + batch_size]
            total += float(loss_fn(model, batch, generator)) * len(batch)
            count += len(batch)
    if model_was_training:
        model.train()
    return total / count


def save_checkpoint(path, kind, config, state_dict, extra=None):
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": kind,
        "config": dataclasses.asdict(config) if dataclasses.is_dataclass(config) else config,
        "state_dict": state_dict,
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path, expected_kind=None):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if expected_kind is not None and payload.get("kind") != expected_kind:
        raise CheckpointError(
            f"{path}: checkpoint kind {payload.get('kind')!r}, expected {expected_kind!r}"
        )
    return payload


def fit(
    model,
    dataset,
    loss_fn,
    config,
    val_dataset=None,
    out_dir=None,
    resume_from=None,
    stop_after_epoch=None,
):
    """Optimize `model` on `dataset` with `loss_fn(model, batch, generator)`.

    Deterministic for a fixed config: data order, noise draws inside the
    loss, and the optimizer trajectory are all derived from config.seed. A
    run interrupted at an epoch boundary resumes bitwise-identically from
    the `last.pt` written to `out_dir`.
    """
    if len(dataset) == 0:
        raise ConfigError("fit needs a non-empty dataset")
    if val_dataset is None:
        val_dataset = dataset

    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    if config.total_steps is None:
        config = dataclasses.replace(config, total_steps=config.epochs * steps_per_epoch)
    if config.warmup_steps >= config.total_steps:
        raise ConfigError(
            f"warmup_steps {config.warmup_steps} must be < total steps {config.total_steps}"
        )

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    generator = torch.Generator().manual_seed(config.seed)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )

    report = RunReport(config_hash=config_hash(config))
    start_epoch = 0
    global_step = 0

    if resume_from is not None:
        payload = load_checkpoint(resume_from, expected_kind="train-state")
        model.load_state_dict(payload["state_dict"])
        extra = payload["extra"]
        optimizer.load_state_dict(extra["optimizer"])
        generator.set_state(extra["generator_state"])
        start_epoch = extra["epochs_done"]
        global_step = extra["global_step"]
        report = RunReport(**extra["report"])

    def save_state(name):
        if out_dir is None:
            return None
        path = out_dir / name
        save_checkpoint(
            path,
            kind="train-state",
            config=config,
            state_dict=model.state_dict(),
            extra={
                "optimizer": optimizer.state_dict(),
                "generator_state": generator.get_state(),
                "epochs_done": epoch + 1,
                "global_step": global_step,
                "report": dataclasses.asdict(report),
            },
        )
        return str(path)

    last_epoch = config.epochs if stop_after_epoch is None else min(config.epochs, stop_after_epoch)
    started = time.time()
    model.train()

    for epoch in range(start_epoch, last_epoch):
        order = torch.randperm(len(dataset), generator=generator).tolist()
        for start in range(0, len(dataset), config.batch_size):
            batch = [dataset[i] for i in order[start : start + config.batch_size]]
            lr = lr_at_step(global_step, config)
            for group in optimizer.param_groups:
                group["lr"] = lr

            loss = loss_fn(model, batch, generator)
            if not torch.isfinite(loss):
                save_state("diverged.pt")
                raise TrainingDivergedError(
                    f"non-finite loss at step {global_step}; last-good checkpoint retained"
                )
            optimizer.zero_grad()
            loss.backward()
            if config.grad_clip_norm is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip_norm)
            optimizer.step()

            report.losses.append(float(loss.detach()))
            report.lrs.append(lr)
            global_step += 1
            if (
                out_dir is not None
                and config.checkpoint_every > 0
                and global_step % config.checkpoint_every == 0
            ):
                save_state(f"step_{global_step:07d}.pt")

        val_loss = _eval_loss(
            model, val_dataset, loss_fn, config.batch_size, _val_generator(config.seed, epoch)
        )
        report.val_losses.append(val_loss)
        if val_loss < report.best_val:
            report.best_val = val_loss
            report.best_epoch = epoch
            report.best_checkpoint = save_state("best.pt")
        report.final_checkpoint = save_state("last.pt")

    report.steps = global_step
    report.wall_clock_sec = time.time() - started
    if out_dir is not None:
        report.to_json(out_dir / "run_report.json")
    return report
