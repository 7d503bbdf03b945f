"""Adam training loop, single-epoch gradient extraction, and checkpointing glue.

The loop is deliberately plain: batches are lists of pre-encoded sequences,
per-instance gradients are averaged into the batch update, and all shuffling
comes from the seeded PRNG so runs are bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..corpus import TokenSequence
from ..rng import ROLE_SHUFFLE, substream
from .model import Model, forward, loss_and_grads

# Named learning-rate profiles. "desk" suits the miniature model; "full_scale"
# mirrors large-model fine-tuning practice and is kept selectable.
LR_PROFILES = {"desk": 3e-3, "full_scale": 3e-5}

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainHyper:
    learning_rate: float = LR_PROFILES["desk"]
    warmup_ratio: float = 0.1
    batch_size: int = 8
    epochs: int = 1
    shuffle_seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ValueError("warmup_ratio must lie in [0, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")


@dataclass
class GradientBundle:
    """Raw per-instance token gradients captured at one consumption step."""

    instance_id: str
    g_emb: np.ndarray          # (T, d)
    g_lm: np.ndarray           # (n_loss, V), rows follow loss_positions
    loss_positions: list[int]
    weight: float
    loss: float
    step_index: int            # -1 when captured without updates


class AdamState:
    """First/second moment accumulators in declared parameter order."""

    def __init__(self, model: Model):
        self.m = {k: np.zeros_like(v) for k, v in model.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in model.params.items()}
        self.t = 0

    def step(self, model: Model, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1c = 1.0 - ADAM_BETA1**self.t
        b2c = 1.0 - ADAM_BETA2**self.t
        for name, p in model.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * (g * g)
            p -= lr * (m / b1c) / (np.sqrt(v / b2c) + ADAM_EPS)


def warmup_lr(base_lr: float, step: int, total_steps: int, warmup_ratio: float) -> float:
    """Linear ramp from 0 over the first warmup_ratio of total steps.

    step is 1-indexed (the step about to be applied).
    """
    warmup_steps = int(math.ceil(warmup_ratio * total_steps))
    if warmup_steps <= 0 or step >= warmup_steps:
        return base_lr
    return base_lr * step / warmup_steps


def _batches(order: list[int], batch_size: int) -> list[list[int]]:
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def total_update_steps(n_instances: int, hyper: TrainHyper) -> int:
    per_epoch = (n_instances + hyper.batch_size - 1) // hyper.batch_size
    return per_epoch * hyper.epochs


class Trainer:
    """Single-threaded Adam loop over encoded sequences.

    Mutates the model in place; exposes per-epoch mean losses for reporting.
    """

    def __init__(self, model: Model, hyper: TrainHyper, total_steps: int):
        hyper.validate()
        self.model = model
        self.hyper = hyper
        self.total_steps = total_steps
        self.adam = AdamState(model)
        self.epoch_losses: list[float] = []

    def apply_batch(self, batch: list[TokenSequence],
                    capture: list[GradientBundle] | None = None) -> float:
        """One Adam update from the mean gradient over the batch.

        When capture is given, each instance's own (unscaled) gradient bundle
        is appended before the update is applied.
        """
        grads: dict[str, np.ndarray] | None = None
        inv = 1.0 / len(batch)
        loss_sum = 0.0
        for seq in batch:
            try:
                trace = forward(self.model, seq)
                res = loss_and_grads(self.model, seq, trace)
            except ValueError as exc:
                raise ValueError(f"instance {seq.instance_id}: {exc}") from exc
            loss_sum += res.loss
            if capture is not None:
                capture.append(
                    GradientBundle(
                        instance_id=seq.instance_id,
                        g_emb=res.g_emb,
                        g_lm=res.g_lm[res.loss_positions],
                        loss_positions=res.loss_positions,
                        weight=res.weight,
                        loss=res.loss,
                        step_index=self.adam.t,
                    )
                )
            if grads is None:
                grads = {k: inv * v for k, v in res.param_grads.items()}
            else:
                for k, v in res.param_grads.items():
                    grads[k] += inv * v
        mean_loss = loss_sum * inv
        if math.isnan(mean_loss):
            raise RuntimeError(f"NaN loss at step {self.adam.t + 1}")
        lr = warmup_lr(self.hyper.learning_rate, self.adam.t + 1,
                       self.total_steps, self.hyper.warmup_ratio)
        self.adam.step(self.model, grads, lr)
        return mean_loss

    def run_epochs(self, seqs: list[TokenSequence],
                   on_epoch=None) -> None:
        rng = substream(self.hyper.shuffle_seed, ROLE_SHUFFLE)
        for epoch in range(self.hyper.epochs):
            order = list(range(len(seqs)))
            rng.shuffle(order)
            losses = []
            for batch_idx in _batches(order, self.hyper.batch_size):
                losses.append(self.apply_batch([seqs[i] for i in batch_idx]))
            self.epoch_losses.append(float(np.mean(losses)))
            if on_epoch is not None:
                on_epoch(epoch + 1)


def train(model: Model, seqs: list[TokenSequence], hyper: TrainHyper,
          on_epoch=None) -> Model:
    """Fine-tune in place for hyper.epochs epochs; returns the same model."""
    if hyper.epochs == 0:
        return model
    if not seqs:
        raise ValueError("empty dataset")
    trainer = Trainer(model, hyper, total_update_steps(len(seqs), hyper))
    trainer.run_epochs(seqs, on_epoch=on_epoch)
    return model


def train_steps(model: Model, seqs: list[TokenSequence], hyper: TrainHyper,
                n_steps: int) -> Model:
    """Run exactly n_steps Adam updates in place, cycling epochs as needed.

    The warmup schedule sees n_steps as the horizon, so a short warmup run
    ramps and settles within its own budget.
    """
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    if n_steps == 0:
        return model
    if not seqs:
        raise ValueError("empty dataset")
    trainer = Trainer(model, hyper, n_steps)
    rng = substream(hyper.shuffle_seed, ROLE_SHUFFLE)
    done = 0
    while done < n_steps:
        order = list(range(len(seqs)))
        rng.shuffle(order)
        for batch_idx in _batches(order, hyper.batch_size):
            trainer.apply_batch([seqs[i] for i in batch_idx])
            done += 1
            if done >= n_steps:
                break
    return model


def extract_epoch(
    model: Model,
    seqs: list[TokenSequence],
    hyper: TrainHyper,
    mode: str = "online",
) -> tuple[Model, list[GradientBundle]]:
    """Capture every instance's raw token gradients exactly once.

    online: one training epoch; each bundle reflects the parameters at the
    step where its instance is consumed, so bundle values depend on shuffle
    order (faithful to extract-while-training).
    frozen: pure measurement against fixed parameters, dataset order,
    order-independent, no updates.
    """
    if not seqs:
        raise ValueError("empty dataset")
    if mode == "frozen":
        bundles: list[GradientBundle] = []
        for seq in seqs:
            try:
                trace = forward(model, seq)
                res = loss_and_grads(model, seq, trace, want_param_grads=False)
            except ValueError as exc:
                raise ValueError(f"instance {seq.instance_id}: {exc}") from exc
            bundles.append(
                GradientBundle(
                    instance_id=seq.instance_id,
                    g_emb=res.g_emb,
                    g_lm=res.g_lm[res.loss_positions],
                    loss_positions=res.loss_positions,
                    weight=res.weight,
                    loss=res.loss,
                    step_index=-1,
                )
            )
        return model, bundles
    if mode != "online":
        raise ValueError(f"unknown extraction mode {mode!r}")

    one_epoch = TrainHyper(
        learning_rate=hyper.learning_rate,
        warmup_ratio=hyper.warmup_ratio,
        batch_size=hyper.batch_size,
        epochs=1,
        shuffle_seed=hyper.shuffle_seed,
    )
    trainer = Trainer(model, one_epoch, total_update_steps(len(seqs), one_epoch))
    rng = substream(one_epoch.shuffle_seed, ROLE_SHUFFLE)
    order = list(range(len(seqs)))
    rng.shuffle(order)
    bundles = []
    for batch_idx in _batches(order, one_epoch.batch_size):
        trainer.apply_batch([seqs[i] for i in batch_idx], capture=bundles)
    return model, bundles
