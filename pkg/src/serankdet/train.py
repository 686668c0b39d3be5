"""Deterministic training loop: soft-IoU over supervision heads, AdamW,
polynomial learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import multi_head_loss
from .network import Model
from .optim import AdamWState, adamw_step, poly_lr
from .tensor import Tape, Tensor


@dataclass
class TrainParams:
    epochs: int = 2
    lr: float = 1e-4
    batch: int = 4
    weight_decay: float = 1e-2
    seed: int = 0
    max_steps: int | None = None  # overrides epochs * steps_per_epoch when set


@dataclass
class TrainTrace:
    epoch_losses: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    final_step: int = 0


def _batches(order: np.ndarray, batch: int):
    for start in range(0, len(order), batch):
        yield order[start: start + batch]


def train(model: Model, dataset, hp: TrainParams) -> TrainTrace:
    """Train in place; returns the loss trace.

    The shuffle stream is fixed by hp.seed, so identical calls produce
    identical traces.  A model resumed from step s continues the decay
    schedule at s.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    images = np.stack([s.image for s in dataset])
    masks = np.stack([s.mask for s in dataset]).astype(np.float32)

    params = model.parameters()
    opt = AdamWState.create(params, lr=hp.lr, weight_decay=hp.weight_decay)
    opt.step = model.global_step

    steps_per_epoch = (len(dataset) + hp.batch - 1) // hp.batch
    total_steps = hp.max_steps if hp.max_steps is not None else hp.epochs * steps_per_epoch
    if model.global_step >= total_steps:
        raise ValueError(f"model already at step {model.global_step} of {total_steps}")

    rng = np.random.default_rng(hp.seed)
    model.set_training(True)
    trace = TrainTrace()
    done = False
    while not done:
        order = rng.permutation(len(dataset))
        epoch_losses = []
        for idx in _batches(order, hp.batch):
            x = Tensor(images[idx])
            y = Tensor(masks[idx])
            model.zero_grad()
            with Tape() as tape:
                outputs = model.forward(x)
                loss = multi_head_loss(outputs.logits, y)
                tape.backward(loss)
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            opt.lr = poly_lr(hp.lr, model.global_step, total_steps)
            adamw_step(params, grads, opt)
            model.global_step += 1
            value = loss.item()
            epoch_losses.append(value)
            trace.step_losses.append(value)
            if model.global_step >= total_steps:
                done = True
                break
        trace.epoch_losses.append(float(np.mean(epoch_losses)))
    model.set_training(False)
    trace.final_step = model.global_step
    return trace


def write_trace_csv(path: str, trace: TrainTrace):
    with open(path, "w") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(trace.step_losses, start=1 + trace.final_step - len(trace.step_losses)):
            fh.write(f"{i},{v:.6f}\n")
