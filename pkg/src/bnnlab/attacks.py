"""White-box attacks: FGSM, projected gradient descent, and EOT variants.

All attacks perturb inputs within an eps-ball of the clean image (linf box or
l2 sphere), re-clamp to valid pixel range [0, 1] each step, and never
differentiate through the perturbation construction itself.  Attack losses
use only the data term; the weight-prior term is constant in the input.
Gradients against Bayesian models average over posterior draws, and EOT
attacks additionally average over sampled input transformations.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .models import MEAN_ONLY, Model, SamplingMode, frozen_params
from .rng import counter_uniforms, derive_seed
from .tensor import Tensor
from .variational import cross_entropy

_KINDS = ("fgsm", "pgd")
_NORMS = ("linf", "l2")


@dataclass(frozen=True)
class EotConfig:
    """Expectation-over-transformation settings.

    Zero-width ranges are allowed and degenerate to the identity transform.
    """

    ensemble: int = 30
    rotation_deg: float = 10.0
    translate_px: int = 2

    def __post_init__(self):
        if self.ensemble < 1:
            raise ValueError(f"ensemble must be >= 1, got {self.ensemble}")
        if self.rotation_deg < 0 or self.translate_px < 0:
            raise ValueError("transform ranges must be nonnegative")


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "pgd"
    norm: str = "linf"
    eps: float = 0.03
    alpha: float | None = None  # None: eps for fgsm, 2.5*eps/iters for pgd
    iters: int = 10
    random_start: bool = False
    grad_samples: int = 10
    resample_draws: bool = True  # fresh posterior draws every step
    eot: EotConfig | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.norm not in _NORMS:
            raise ValueError(f"unknown attack norm {self.norm!r}")
        if self.eps < 0:
            raise ValueError(f"eps must be >= 0, got {self.eps}")
        if self.iters < 1:
            raise ValueError(f"iters must be >= 1, got {self.iters}")
        if self.alpha is not None and not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.grad_samples < 1:
            raise ValueError(f"grad_samples must be >= 1, got {self.grad_samples}")
        if self.kind == "fgsm":
            if self.iters != 1:
                raise ValueError("fgsm is single-step; use kind='pgd' for iteration")
            if self.norm != "linf":
                raise ValueError("fgsm is an linf attack")
            if self.alpha is not None and self.alpha != self.eps:
                raise ValueError("fgsm step size equals eps")

    def step_size(self) -> float:
        if self.alpha is not None:
            return self.alpha
        return self.eps if self.kind == "fgsm" else 2.5 * self.eps / self.iters


@dataclass(frozen=True)
class Transform:
    """Rotation about the image center followed by integer translation."""

    angle_deg: np.ndarray
    dy: np.ndarray
    dx: np.ndarray

    @classmethod
    def identity(cls, n: int) -> "Transform":
        z = np.zeros(n)
        return cls(z, z.copy(), z.copy())


@dataclass
class AdvBatch:
    """Attack output: perturbed pixels plus bookkeeping.

    norms holds per-example distance in the attack norm; success marks
    examples whose (mean-weight) prediction flipped relative to clean input.
    """

    x_adv: np.ndarray
    norms: np.ndarray
    success: np.ndarray


# ---------------------------------------------------------------------------
# geometry


def apply_transform(x, t: Transform) -> Tensor:
    """Differentiable bilinear warp with zero fill outside the frame.

    The identity transform reproduces the input bit-for-bit, and integer
    translations are exact on pixels that stay in frame.
    """
    x = T.as_tensor(x)
    if x.ndim != 4:
        raise T.ShapeError(f"apply_transform: expected [N,C,H,W], got {x.shape}")
    n, ch, h, w = x.shape
    angle = np.broadcast_to(np.asarray(t.angle_deg, dtype=np.float64), (n,))
    dy = np.broadcast_to(np.asarray(t.dy, dtype=np.float64), (n,))
    dx = np.broadcast_to(np.asarray(t.dx, dtype=np.float64), (n,))

    th = np.deg2rad(angle)[:, None, None]
    cos, sin = np.cos(th), np.sin(th)
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dr = rows[None] - dy[:, None, None] - cy
    dc = cols[None] - dx[:, None, None] - cx
    # source location: rotate the centered offset back by -angle
    sr = cy + cos * dr + sin * dc
    sc = cx - sin * dr + cos * dc

    r0 = np.floor(sr)
    c0 = np.floor(sc)
    fr, fc = sr - r0, sc - c0
    corners = []
    for rr, cc, wgt in (
        (r0, c0, (1 - fr) * (1 - fc)),
        (r0, c0 + 1, (1 - fr) * fc),
        (r0 + 1, c0, fr * (1 - fc)),
        (r0 + 1, c0 + 1, fr * fc),
    ):
        inside = (rr >= 0) & (rr <= h - 1) & (cc >= 0) & (cc <= w - 1)
        idx = np.clip(rr, 0, h - 1).astype(np.intp) * w + np.clip(cc, 0, w - 1).astype(np.intp)
        corners.append((idx.reshape(n, 1, h * w), (wgt * inside).reshape(n, 1, h * w)))

    flat = x.data.reshape(n, ch, h * w)
    out = np.zeros((n, ch, h * w))
    for idx, wgt in corners:
        out += np.take_along_axis(flat, np.broadcast_to(idx, (n, ch, h * w)), axis=2) * wgt
    data = out.reshape(n, ch, h, w)

    def vjp(g):
        gflat = g.reshape(n, ch, h * w)
        gx = np.zeros((n, ch, h * w))
        bi = np.arange(n)[:, None, None]
        ci = np.arange(ch)[None, :, None]
        for idx, wgt in corners:
            np.add.at(gx, (bi, ci, np.broadcast_to(idx, (n, ch, h * w))), gflat * wgt)
        return (gx.reshape(x.shape),)

    return T.from_op(data, (x,), vjp)


def _sample_transform(eot: EotConfig, key: int, n: int) -> Transform:
    """Per-example transform draws, stable under batch chunking."""
    u = counter_uniforms(key, np.arange(3 * n).reshape(n, 3))
    span = 2 * eot.translate_px + 1
    angle = (2.0 * u[:, 0] - 1.0) * eot.rotation_deg
    dy = np.floor(u[:, 1] * span) - eot.translate_px
    dx = np.floor(u[:, 2] * span) - eot.translate_px
    return Transform(angle, dy, dx)


# ---------------------------------------------------------------------------
# gradients


def _ce_grad(model: Model, x: np.ndarray, y: np.ndarray, mode: SamplingMode, transform=None):
    xt = Tensor(x, requires_grad=True)
    xin = apply_transform(xt, transform) if transform is not None else xt
    logits, _ = model.forward(xin, mode)
    return T.backward(cross_entropy(logits, y))[xt]


def _loss_gradient(model: Model, x, y, cfg: AttackConfig, seed: int, step: int) -> np.ndarray:
    """Data-term gradient w.r.t. the input, averaged over draws.

    Deterministic models collapse to a single pass.  EOT averages jointly
    over transform and posterior draws, one of each per ensemble member.
    """
    step_key = step if cfg.resample_draws else 0
    with frozen_params(model):
        if cfg.eot is not None:
            total = np.zeros_like(x)
            for e in range(cfg.eot.ensemble):
                draw = derive_seed(seed, "step", step_key, "draw", e)
                t = _sample_transform(cfg.eot, derive_seed(draw, "t"), x.shape[0])
                mode = SamplingMode.sample(derive_seed(draw, "w")) if model.bayesian else MEAN_ONLY
                total += _ce_grad(model, x, y, mode, transform=t)
            return total / cfg.eot.ensemble
        if not model.bayesian:
            return _ce_grad(model, x, y, MEAN_ONLY)
        total = np.zeros_like(x)
        for k in range(cfg.grad_samples):
            draw = derive_seed(seed, "step", step_key, "draw", k)
            total += _ce_grad(model, x, y, SamplingMode.sample(derive_seed(draw, "w")))
        return total / cfg.grad_samples


def input_gradient(model: Model, x, y, grad_samples: int = 10, seed: int = 0) -> np.ndarray:
    """Gradient of the mean cross-entropy w.r.t. x, averaged over
    grad_samples posterior draws (single pass for deterministic models)."""
    x = np.asarray(x, dtype=np.float64)
    cfg = AttackConfig(kind="pgd", norm="linf", eps=1.0, iters=1, grad_samples=grad_samples)
    return _loss_gradient(model, x, np.asarray(y), cfg, seed, step=0)


# ---------------------------------------------------------------------------
# projections and attacks


def project_l2(delta, eps: float) -> np.ndarray:
    """Scale each example's perturbation onto the l2 ball of radius eps.

    1-d input is treated as a single example; otherwise axis 0 is the batch.
    """
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    d = np.asarray(delta, dtype=np.float64)
    single = d.ndim <= 1
    flat = d.reshape(1, -1) if single else d.reshape(d.shape[0], -1)
    norms = np.sqrt((flat * flat).sum(axis=1, keepdims=True))
    scale = np.where(norms > 0, np.minimum(1.0, eps / np.where(norms > 0, norms, 1.0)), 1.0)
    out = (flat * scale).reshape(d.shape)
    return out


def _start_noise(cfg: AttackConfig, x0: np.ndarray, seed: int) -> np.ndarray:
    n = x0.shape[0]
    p = int(np.prod(x0.shape[1:]))
    key = derive_seed(seed, "start")
    offsets = np.arange(n * p, dtype=np.uint64).reshape(n, p)
    if cfg.norm == "linf":
        noise = (2.0 * counter_uniforms(key, offsets) - 1.0) * cfg.eps
    else:
        # uniform in the l2 ball: gaussian direction, radius ~ eps * u^(1/p)
        u1 = 1.0 - counter_uniforms(key, 2 * offsets)
        u2 = counter_uniforms(key, 2 * offsets + 1)
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        r = counter_uniforms(derive_seed(seed, "start-radius"), np.arange(n, dtype=np.uint64))
        zn = np.sqrt((z * z).sum(axis=1, keepdims=True))
        zn = np.where(zn > 0, zn, 1.0)
        noise = cfg.eps * (r[:, None] ** (1.0 / p)) * z / zn
    return noise.reshape(x0.shape)


def _mean_predictions(model: Model, x: np.ndarray) -> np.ndarray:
    with T.no_grad(), frozen_params(model):
        logits, _ = model.forward(x, MEAN_ONLY)
        return np.argmax(logits.data, axis=1)


def _finish(model, x0, x_adv, cfg: AttackConfig) -> AdvBatch:
    delta = (x_adv - x0).reshape(x0.shape[0], -1)
    if cfg.norm == "linf":
        norms = np.abs(delta).max(axis=1) if delta.size else np.zeros(0)
    else:
        norms = np.sqrt((delta * delta).sum(axis=1))
    success = _mean_predictions(model, x_adv) != _mean_predictions(model, x0)
    return AdvBatch(x_adv=x_adv, norms=norms, success=success)


def pgd(model: Model, x, y, cfg: AttackConfig, seed: int = 0) -> AdvBatch:
    """Iterated gradient attack with per-step projection onto the eps-ball
    around the clean input, then re-clamp to [0, 1]."""
    x0 = np.array(x, dtype=np.float64)
    y = np.asarray(y)
    if cfg.eps == 0.0:
        return _finish(model, x0, x0.copy(), cfg)
    alpha = cfg.step_size()
    x_adv = x0.copy()
    if cfg.random_start:
        x_adv = np.clip(x0 + _start_noise(cfg, x0, seed), 0.0, 1.0)
    for step in range(cfg.iters):
        g = _loss_gradient(model, x_adv, y, cfg, seed, step)
        if cfg.norm == "linf":
            x_adv = x_adv + alpha * np.sign(g)
            delta = np.clip(x_adv - x0, -cfg.eps, cfg.eps)
        else:
            flat = g.reshape(g.shape[0], -1)
            gn = np.sqrt((flat * flat).sum(axis=1)).reshape((-1,) + (1,) * (g.ndim - 1))
            x_adv = x_adv + alpha * g / np.where(gn > 0, gn, 1.0)
            delta = project_l2(x_adv - x0, cfg.eps)
        x_adv = np.clip(x0 + delta, 0.0, 1.0)
    return _finish(model, x0, x_adv, cfg)


def fgsm(model: Model, x, y, eps: float, grad_samples: int = 10, seed: int = 0) -> AdvBatch:
    """Single sign step of size eps; identical to one-step linf pgd."""
    cfg = AttackConfig(
        kind="fgsm", norm="linf", eps=eps, alpha=None, iters=1, grad_samples=grad_samples
    )
    return pgd(model, x, y, cfg, seed)


def eot_attack(model: Model, x, y, cfg: AttackConfig, seed: int = 0) -> AdvBatch:
    """Attack through randomized input transforms; the returned perturbation
    obeys the same eps-ball as the base attack on the untransformed image."""
    if cfg.eot is None:
        cfg = replace(cfg, eot=EotConfig())
    return pgd(model, x, y, cfg, seed)


def run_attack(model: Model, x, y, cfg: AttackConfig, seed: int = 0) -> AdvBatch:
    """Dispatch on config; the single entry point used by the harness."""
    return pgd(model, x, y, cfg, seed)
