"""Parameter initialization, Adam optimization, and the training loop.

Initialization draws every convolution weight from a gaussian whose variance
is either the configured std squared or, in auto mode (std = 0), 2/fan_in.
Each parameter tensor gets its own counter-based stream keyed by (seed,
parameter path), so networks sharing parameter paths and shapes receive
bit-identical values for the same seed regardless of what else differs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import DivergenceError, MissingGradientError
from .losses import LossConfig, loss_components
from .networks import BatchNormLayer, ConvLayer, DeconvLayer, Network
from .synth import SyntheticTask, sample_batch
from .tensor import Tape, Tensor, backward, first_nonfinite


def init_gaussian(net, std: float = 0.0, seed: int = 0) -> None:
    """Gaussian-initialize all weights; biases 0, norm scale 1 / shift 0.

    std = 0 selects auto mode: per-layer variance 2/fan_in, which keeps deep
    stacks trainable where a single global std would not be.
    """
    if std < 0:
        raise ValueError("std must be >= 0")
    for path, layer in net.layers():
        if isinstance(layer, (ConvLayer, DeconvLayer)):
            w = layer.params.weights
            sigma = float(std) if std > 0 else float(np.sqrt(2.0 / layer.fan_in))
            key = rng.stream_key(seed, f"{path}/weight")
            values = rng.gaussian(key, w.size, 0.0, sigma)
            w.data[...] = values.reshape(w.shape).astype(w.dtype)
            if layer.params.bias is not None:
                layer.params.bias.data[...] = 0
        elif isinstance(layer, BatchNormLayer):
            layer.state.gamma.data[...] = 1
            layer.state.beta.data[...] = 0
            layer.state.running_mean[...] = 0
            layer.state.running_var[...] = 1


class Adam:
    """Bias-corrected Adam over an ordered list of named parameters.

    Updates are applied in declaration order and gradients are cleared after
    each step. A parameter without a gradient aborts the step: with a
    correctly wired network every trainable tensor is reached by backward,
    so a missing gradient means a disconnected branch.
    """

    def __init__(self, named_params, learning_rate: float = 5e-4,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.named_params = list(named_params)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.m = [np.zeros_like(t.data) for _, t in self.named_params]
        self.v = [np.zeros_like(t.data) for _, t in self.named_params]

    def step(self) -> None:
        missing = [name for name, t in self.named_params if t.grad is None]
        if missing:
            raise MissingGradientError(
                "no gradient for parameter(s): " + ", ".join(missing[:5])
                + ("..." if len(missing) > 5 else ""))
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for i, (_, param) in enumerate(self.named_params):
            g = param.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            param.data -= (self.learning_rate * m_hat
                           / (np.sqrt(v_hat) + self.epsilon)).astype(param.dtype)
            param.grad = None


def adam_step(opt: Adam) -> None:
    opt.step()


@dataclass
class TrainLog:
    branch_count: int
    rows: list[tuple] = field(default_factory=list)

    def append(self, step: int, total: float, global_term: float,
               branch_terms: list[float]) -> None:
        self.rows.append((step, total, global_term, tuple(branch_terms)))

    def header(self) -> list[str]:
        return (["step", "total_loss", "global_loss"]
                + [f"branch{i}_loss" for i in range(1, self.branch_count + 1)])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.header())
            for step, total, global_term, branch_terms in self.rows:
                writer.writerow([step, repr(total), repr(global_term)]
                                + [repr(b) for b in branch_terms])

    def totals(self) -> list[float]:
        return [row[1] for row in self.rows]


def train_step(net: Network, opt: Adam, images: np.ndarray, labels: np.ndarray,
               cfg: LossConfig):
    """One optimization step; returns (total, global, branch losses) floats."""
    x = Tensor(images.astype(net.dtype, copy=False))
    with Tape() as tape:
        out = net.forward(x, mode="train")
        total, global_term, branch_terms = loss_components(out, labels, cfg)
    if not np.isfinite(total.data):
        culprit = first_nonfinite(tape) or "loss"
        raise DivergenceError(f"training diverged: first non-finite tensor "
                              f"was produced by '{culprit}'")
    backward(tape, total)
    opt.step()
    return (float(total.data), float(global_term.data),
            [float(b.data) for b in branch_terms])


def train(net: Network, task: SyntheticTask, cfg: LossConfig, steps: int,
          batch: int, seed: int = 0, learning_rate: float = 5e-4,
          train_samples: int = 16, init_std: float | None = 0.0) -> TrainLog:
    """Train on a fixed pool of synthetic samples, cycling deterministically.

    Initializes the network first unless init_std is None (pass None to keep
    already-loaded parameters). Step t consumes sample indices
    (t*batch .. t*batch+batch-1) mod train_samples.
    """
    if any(s % (2 ** (net.enc_spec.k - 1)) for s in task.image_size):
        raise ValueError(f"task image_size {task.image_size} must be divisible "
                         f"by 2^(k-1) = {2 ** (net.enc_spec.k - 1)}")
    if init_std is not None:
        init_gaussian(net, init_std, seed)
    opt = Adam(net.named_parameters(), learning_rate)
    log = TrainLog(branch_count=len(net.branch_head_ids))
    for step in range(steps):
        indices = [(step * batch + j) % train_samples for j in range(batch)]
        images, labels = sample_batch(task, indices)
        total, global_term, branch_terms = train_step(net, opt, images, labels, cfg)
        log.append(step, total, global_term, branch_terms)
    return log


def predict_labels(net: Network, images: np.ndarray) -> np.ndarray:
    """Infer-mode argmax segmentation of a batch of images."""
    out = net.forward(Tensor(images.astype(net.dtype, copy=False)), mode="infer")
    return np.argmax(out.fused.data, axis=1)


def training_dice(net: Network, task: SyntheticTask, train_samples: int,
                  batch: int = 4) -> dict[int, float]:
    """Mean per-class Dice over the training pool (infer mode)."""
    from .metrics import dice_score

    scores: dict[int, list[float]] = {c: [] for c in range(task.num_classes)}
    for start in range(0, train_samples, batch):
        indices = list(range(start, min(start + batch, train_samples)))
        images, labels = sample_batch(task, indices)
        pred = predict_labels(net, images)
        for b in range(pred.shape[0]):
            for c in range(task.num_classes):
                scores[c].append(dice_score(pred[b], labels[b], c))
    return {c: float(np.mean(v)) for c, v in scores.items()}
