"""Optimization and training loops.

Two recipes share one loop: plain training minimizes cross-entropy plus
beta * KL on clean batches, and adversarial training first perturbs each
batch with the configured attack against the live model, then takes the
same step on the perturbed inputs.  Perturbation construction is treated
as data preparation; gradients never flow through it.
"""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, run_attack
from .models import MEAN_ONLY, Model, SamplingMode, predict_ensemble
from .rng import RandomStream, derive_seed
from .tensor import Tensor
from .variational import elbo_loss


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries epoch/batch context."""


def adam_update(theta, g, m, v, t: int, lr: float, beta1: float, beta2: float, eps: float):
    """One bias-corrected Adam step for a single array.

    t is the step number being applied (1 on the first call).  Returns the
    new (theta, m, v); inputs are not modified.
    """
    if t < 1:
        raise ValueError(f"step number must be >= 1, got {t}")
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * (g * g)
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    return theta - lr * mhat / (np.sqrt(vhat) + eps), m, v


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState):
    """Functional form over aligned sequences of arrays; returns
    (new_params, new_state)."""
    params = [np.asarray(p, dtype=np.float64) for p in params]
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params vs {len(grads)} grads")
    if not state.m:
        state = AdamState(
            state.lr, state.beta1, state.beta2, state.eps, state.t,
            [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
        )
    for p, m in zip(params, state.m):
        if p.shape != m.shape:
            raise ValueError(f"moment shape {m.shape} does not match param {p.shape}")
    t = state.t + 1
    out_p, out_m, out_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        pn, mn, vn = adam_update(p, g, m, v, t, state.lr, state.beta1, state.beta2, state.eps)
        out_p.append(pn)
        out_m.append(mn)
        out_v.append(vn)
    return out_p, AdamState(state.lr, state.beta1, state.beta2, state.eps, t, out_m, out_v)


class Adam:
    """In-place optimizer over a model's parameter tensors."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        self.params = list(params)
        self.state = AdamState(
            lr, beta1, beta2, eps, 0,
            [np.zeros_like(p.data) for p in self.params],
            [np.zeros_like(p.data) for p in self.params],
        )

    def step(self, grads: dict) -> None:
        """Apply one step; parameters absent from grads get zero gradient
        (their momentum still decays, as usual for Adam)."""
        s = self.state
        s.t += 1
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            p.data, s.m[i], s.v[i] = adam_update(
                p.data, g, s.m[i], s.v[i], s.t, s.lr, s.beta1, s.beta2, s.eps
            )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    beta_kl: float = 1.0
    adversarial: AttackConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.beta_kl < 0:
            raise ValueError(f"beta_kl must be >= 0, got {self.beta_kl}")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    acc: float
    kl: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)

    COLUMNS = ("epoch", "loss", "acc", "kl", "seconds")

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for e in self.epochs:
            w.writerow([e.epoch, repr(e.loss), repr(e.acc), repr(e.kl), f"{e.seconds:.3f}"])
        return buf.getvalue()

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write(self.csv_text())


def _mean_weight_accuracy(model: Model, x, y, batch_size: int) -> float:
    correct = 0
    with T.no_grad():
        for start in range(0, len(y), batch_size):
            logits, _ = model.forward(x[start : start + batch_size], MEAN_ONLY)
            correct += int((np.argmax(logits.data, axis=1) == y[start : start + batch_size]).sum())
    return correct / len(y)


def train(model: Model, dataset, cfg: TrainConfig):
    """Optimize model in place; returns (model, TrainReport).

    Deterministic given (model state, dataset order, cfg): reruns produce
    bitwise-identical parameters.  Reported accuracy is the clean
    mean-weight accuracy on the training set.
    """
    x, y = np.asarray(dataset.x, dtype=np.float64), np.asarray(dataset.y)
    n = len(y)
    if n == 0:
        raise ValueError("dataset is empty")
    opt = Adam(model.parameters(), lr=cfg.lr)
    report = TrainReport()
    for epoch in range(cfg.epochs):
        tic = time.perf_counter()
        perm = RandomStream(derive_seed(cfg.seed, "shuffle", epoch)).permutation(n)
        loss_sum, kl_sum, nb = 0.0, 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            if cfg.adversarial is not None:
                adv_seed = derive_seed(cfg.seed, "adv", epoch, b)
                xb = run_attack(model, xb, yb, cfg.adversarial, seed=adv_seed).x_adv
            mode = (
                SamplingMode.sample(derive_seed(cfg.seed, "noise", epoch, b))
                if model.bayesian
                else MEAN_ONLY
            )
            logits, kl = model.forward(xb, mode, train=True)
            loss = elbo_loss(logits, yb, kl, cfg.beta_kl)
            val = loss.item()
            if not np.isfinite(val):
                raise TrainingDiverged(
                    f"non-finite loss {val} at epoch {epoch}, batch {b}"
                )
            opt.step(T.backward(loss))
            loss_sum += val
            kl_sum += kl.item()
            nb += 1
        acc = _mean_weight_accuracy(model, x, y, cfg.batch_size)
        report.epochs.append(
            EpochStats(epoch, loss_sum / nb, acc, kl_sum / nb, time.perf_counter() - tic)
        )
    return model, report


def evaluate(model: Model, dataset, attack: AttackConfig | None = None,
             n_samples: int = 10, seed: int = 0, batch_size: int = 256,
             predict_seed: int | None = None) -> float:
    """Ensemble-prediction accuracy on clean or attacked inputs.

    Prediction randomness is keyed by predict_seed (defaulting to seed) and
    never by the attack, so an eps=0 attack yields exactly the clean
    accuracy.  Passing the same predict_seed with different attack seeds
    keeps the prediction ensemble fixed across rows of a sweep.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    if predict_seed is None:
        predict_seed = seed
    x, y = np.asarray(dataset.x, dtype=np.float64), np.asarray(dataset.y)
    if len(y) == 0:
        raise ValueError("dataset is empty")
    correct = 0
    for i, start in enumerate(range(0, len(y), batch_size)):
        xb, yb = x[start : start + batch_size], y[start : start + batch_size]
        if attack is not None:
            xb = run_attack(model, xb, yb, attack, seed=derive_seed(seed, "attack", i)).x_adv
        probs = predict_ensemble(model, xb, n_samples, seed=derive_seed(predict_seed, "predict", i))
        correct += int((np.argmax(probs, axis=1) == yb).sum())
    return correct / len(y)
