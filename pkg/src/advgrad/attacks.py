"""Iterative gradient attacks under an L-infinity budget.

Implements the gradient-transform pipeline (momentum, DIM, TIM, SIM, VT,
EMI), the two step rules (sign step vs. scaled raw-gradient step), the
budget projection, and the full attack loop over single or ensembled
source models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage

from .numerics import gaussian_kernel_2d, make_rng

__all__ = [
    "DegenerateGradientError",
    "SignStep",
    "FixedScaleStep",
    "AdaptiveStep",
    "Dim",
    "Tim",
    "Sim",
    "Vt",
    "Emi",
    "AttackConfig",
    "AttackResult",
    "momentum_accumulate",
    "dim_transform",
    "tim_smooth",
    "sim_gradient",
    "vt_gradient",
    "emi_gradient",
    "ensemble_gradient",
    "ensemble_loss",
    "apply_step",
    "project",
    "run_attack",
    "config_to_dict",
    "config_from_dict",
]


class DegenerateGradientError(RuntimeError):
    """Raised when the attack gradient vanishes and no step can be taken."""


# -- step rules -------------------------------------------------------------


@dataclass(frozen=True)
class SignStep:
    """x + alpha * sign(direction); alpha on the 0-255 scale."""

    alpha: float

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


@dataclass(frozen=True)
class FixedScaleStep:
    """x + gamma * direction, keeping the exact gradient direction."""

    gamma: float

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")


@dataclass(frozen=True)
class AdaptiveStep:
    """Per-step gamma supplied by a trained scaling-factor generator."""

    generator: object


# -- gradient transforms ----------------------------------------------------


@dataclass(frozen=True)
class Dim:
    """Random resize + zero-pad applied to the input with probability p."""

    p: float = 0.7
    min_fraction: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")


@dataclass(frozen=True)
class Tim:
    """Gaussian smoothing of the gradient; sigma defaults to k / 3."""

    k: int = 3
    sigma: float | None = None


@dataclass(frozen=True)
class Sim:
    """Average gradients over m dyadically scaled copies of the input."""

    m: int = 2

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")


@dataclass(frozen=True)
class Vt:
    """Variance tuning with N neighborhood samples in a beta*epsilon ball."""

    n: int = 20
    beta: float = 1.5

    def __post_init__(self):
        if self.n < 1 or self.beta < 0:
            raise ValueError("need n >= 1 and beta >= 0")


@dataclass(frozen=True)
class Emi:
    """Average gradients over N points along the previous direction."""

    n: int = 11
    eta: float = 7.0

    def __post_init__(self):
        if self.n < 1 or self.eta < 0:
            raise ValueError("need n >= 1 and eta >= 0")


@dataclass
class AttackConfig:
    """Everything run_attack needs besides the models and the input.

    momentum=None runs the plain (BIM-style) pipeline on the raw gradient;
    a float value enables the L1-normalized momentum accumulator with that
    decay.
    """

    epsilon: float
    steps: int
    step_rule: SignStep | FixedScaleStep | AdaptiveStep
    momentum: float | None = None
    transforms: tuple = ()
    targeted: bool = False
    target_label: int | None = None
    bounds: tuple[float, float] = (0.0, 255.0)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.momentum is not None and self.momentum < 0:
            raise ValueError("momentum decay must be >= 0")
        if self.targeted and self.target_label is None:
            raise ValueError("targeted attack needs a target_label")
        self.transforms = tuple(self.transforms)


@dataclass
class AttackResult:
    adversarial: np.ndarray
    step_trace: list[float]
    success: list[bool]
    final_loss: float
    early_stopped: bool = False
    steps_used: int = 0


# -- pipeline pieces --------------------------------------------------------


def momentum_accumulate(g_prev: np.ndarray, grad: np.ndarray, mu: float) -> np.ndarray:
    """mu * g_prev + grad / ||grad||_1."""
    if g_prev.shape != grad.shape:
        raise ValueError("momentum and gradient shapes differ")
    l1 = np.abs(grad).sum()
    if l1 == 0.0:
        raise DegenerateGradientError("zero gradient in momentum accumulation")
    return mu * g_prev + grad / l1


def dim_transform(x: np.ndarray, p: float, rng: np.random.Generator,
                  min_fraction: float = 0.9) -> np.ndarray:
    """With probability p, nearest-neighbor shrink then random zero-pad back."""
    if x.ndim != 3:
        raise ValueError("dim_transform expects an (H, W, C) image")
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if rng.random() >= p:
        return x
    h, w, _ = x.shape
    rh = int(rng.integers(math.ceil(min_fraction * h), h + 1))
    rw = int(rng.integers(math.ceil(min_fraction * w), w + 1))
    rows = (np.arange(rh) * h // rh).astype(int)
    cols = (np.arange(rw) * w // rw).astype(int)
    small = x[np.ix_(rows, cols)]
    top = int(rng.integers(0, h - rh + 1))
    left = int(rng.integers(0, w - rw + 1))
    out = np.zeros_like(x)
    out[top:top + rh, left:left + rw, :] = small
    return out


def tim_smooth(grad: np.ndarray, k: int, sigma: float | None = None) -> np.ndarray:
    """Per-channel Gaussian convolution with edge replication."""
    if grad.ndim != 3:
        raise ValueError("tim_smooth expects an (H, W, C) gradient")
    if sigma is None:
        sigma = k / 3.0
    kernel = gaussian_kernel_2d(k, sigma)
    out = np.empty_like(grad)
    for c in range(grad.shape[2]):
        out[:, :, c] = scipy.ndimage.convolve(grad[:, :, c], kernel, mode="nearest")
    return out


def ensemble_gradient(models, x: np.ndarray, y: int) -> np.ndarray:
    """Gradient of the mean of the per-model cross-entropy losses."""
    if not models:
        raise ValueError("need at least one source model")
    return sum(m.input_gradient(x, y) for m in models) / len(models)


def ensemble_loss(models, x: np.ndarray, y: int) -> float:
    if not models:
        raise ValueError("need at least one source model")
    return sum(m.cross_entropy_loss(x, y) for m in models) / len(models)


def sim_gradient(models, x: np.ndarray, y: int, m: int) -> np.ndarray:
    """(1/m) sum_i grad of J(f(x / 2^i)); the 1/2^i chain-rule factor stays."""
    if m < 1:
        raise ValueError("m must be >= 1")
    total = np.zeros_like(np.asarray(x, dtype=np.float64))
    for i in range(m):
        scale = 0.5 ** i
        total += scale * ensemble_gradient(models, x * scale, y)
    return total / m


def vt_gradient(models, x, y, prev_variance, n, beta, epsilon, rng):
    """Variance-tuned gradient; returns (tuned gradient, next variance)."""
    current = ensemble_gradient(models, x, y)
    tuned = current + prev_variance
    radius = beta * epsilon
    acc = np.zeros_like(current)
    for _ in range(n):
        probe = x + rng.uniform(-radius, radius, size=x.shape)
        acc += ensemble_gradient(models, probe, y)
    return tuned, acc / n - current


def emi_gradient(models, x, y, prev_grad_dir, n, eta, rng):
    """Mean gradient over n points x + c_i * eta * prev_dir, c_i ~ U[-1, 1]."""
    acc = np.zeros_like(np.asarray(x, dtype=np.float64))
    for _ in range(n):
        c = rng.uniform(-1.0, 1.0)
        acc += ensemble_gradient(models, x + c * eta * prev_grad_dir, y)
    return acc / n


def apply_step(x_adv, direction, rule, gamma_override: float | None = None):
    """One unprojected update; sign(0) = 0 in the sign rule."""
    if x_adv.shape != direction.shape:
        raise ValueError("iterate and direction shapes differ")
    if isinstance(rule, SignStep):
        return x_adv + rule.alpha * np.sign(direction)
    if isinstance(rule, FixedScaleStep):
        return x_adv + rule.gamma * direction
    if isinstance(rule, AdaptiveStep):
        if gamma_override is None:
            raise ValueError("adaptive rule needs the per-step gamma")
        return x_adv + gamma_override * direction
    raise TypeError(f"unknown step rule {rule!r}")


def project(x_adv, x_orig, epsilon):
    """Clamp per-pixel to [orig - eps, orig + eps] intersected with [0, 255]."""
    if x_adv.shape != x_orig.shape:
        raise ValueError("shapes differ in projection")
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    out = np.clip(x_adv, x_orig - epsilon, x_orig + epsilon)
    return np.clip(out, 0.0, 255.0)


# -- attack loop ------------------------------------------------------------


def _find(transforms, kind):
    for t in transforms:
        if isinstance(t, kind):
            return t
    return None


def _pipeline_gradient(models, x_eval, label, cfg, state, rng):
    """Compose the configured transforms into one gradient evaluation."""
    sim = _find(cfg.transforms, Sim)
    vt = _find(cfg.transforms, Vt)
    emi = _find(cfg.transforms, Emi)
    tim = _find(cfg.transforms, Tim)

    def base(pt):
        if sim is not None:
            return sim_gradient(models, pt, label, sim.m)
        return ensemble_gradient(models, pt, label)

    if emi is not None:
        grad = np.zeros_like(x_eval)
        for _ in range(emi.n):
            c = rng.uniform(-1.0, 1.0)
            grad += base(x_eval + c * emi.eta * state["emi_dir"])
        grad /= emi.n
    else:
        grad = base(x_eval)

    if vt is not None:
        tuned = grad + state["vt_var"]
        radius = vt.beta * cfg.epsilon
        acc = np.zeros_like(grad)
        for _ in range(vt.n):
            acc += base(x_eval + rng.uniform(-radius, radius, size=x_eval.shape))
        state["vt_var"] = acc / vt.n - grad
        grad = tuned

    if emi is not None:
        l1 = np.abs(grad).sum()
        state["emi_dir"] = grad / l1 if l1 > 0 else np.zeros_like(grad)

    if tim is not None:
        grad = tim_smooth(grad, tim.k, tim.sigma)
    return grad


def run_attack(source_models, target_models, x, y, cfg: AttackConfig,
               rng: np.random.Generator | None = None) -> AttackResult:
    """Full iterative attack; returns the final example and per-target flags.

    With steps=1, SignStep(alpha=epsilon) and no momentum this is exactly
    the one-step fast gradient sign attack.
    """
    if not source_models:
        raise ValueError("need at least one source model")
    if cfg.targeted and cfg.target_label == y:
        raise ValueError("target label must differ from the true label")
    rng = rng if rng is not None else make_rng(0)
    x = np.asarray(x, dtype=np.float64)
    x_adv = x.copy()
    attack_label = cfg.target_label if cfg.targeted else y
    flip = -1.0 if cfg.targeted else 1.0
    dim = _find(cfg.transforms, Dim)
    state = {"vt_var": np.zeros_like(x), "emi_dir": np.zeros_like(x)}
    g_mom = np.zeros_like(x)
    trace: list[float] = []
    early = False
    steps_used = 0
    for t in range(cfg.steps):
        x_eval = x_adv
        if dim is not None:
            x_eval = dim_transform(x_adv, dim.p, rng, dim.min_fraction)
        grad = flip * _pipeline_gradient(source_models, x_eval, attack_label, cfg, state, rng)
        if np.abs(grad).sum() == 0.0:
            early = True
            break
        if cfg.momentum is not None:
            g_mom = momentum_accumulate(g_mom, grad, cfg.momentum)
            direction = g_mom
        else:
            direction = grad
        rule = cfg.step_rule
        if isinstance(rule, AdaptiveStep):
            gamma = float(rule.generator.gamma_forward(t, x_adv, direction))
            x_adv = apply_step(x_adv, direction, rule, gamma_override=gamma)
            trace.append(gamma)
        else:
            x_adv = apply_step(x_adv, direction, rule)
            trace.append(rule.alpha if isinstance(rule, SignStep) else rule.gamma)
        x_adv = project(x_adv, x, cfg.epsilon)
        steps_used = t + 1

    success = []
    for tm in target_models:
        pred = tm.predict(x_adv)
        success.append(pred == cfg.target_label if cfg.targeted else pred != y)
    return AttackResult(
        adversarial=x_adv,
        step_trace=trace,
        success=success,
        final_loss=ensemble_loss(source_models, x_adv, y),
        early_stopped=early,
        steps_used=steps_used,
    )


# -- JSON config serialization ---------------------------------------------


def config_to_dict(cfg: AttackConfig) -> dict:
    rule = cfg.step_rule
    if isinstance(rule, SignStep):
        rule_doc = {"type": "sign", "alpha": rule.alpha}
    elif isinstance(rule, FixedScaleStep):
        rule_doc = {"type": "fixed", "gamma": rule.gamma}
    else:
        rule_doc = {"type": "adaptive"}
    transforms = []
    for t in cfg.transforms:
        if isinstance(t, Dim):
            transforms.append({"type": "dim", "p": t.p, "min_fraction": t.min_fraction})
        elif isinstance(t, Tim):
            transforms.append({"type": "tim", "k": t.k, "sigma": t.sigma})
        elif isinstance(t, Sim):
            transforms.append({"type": "sim", "m": t.m})
        elif isinstance(t, Vt):
            transforms.append({"type": "vt", "n": t.n, "beta": t.beta})
        elif isinstance(t, Emi):
            transforms.append({"type": "emi", "n": t.n, "eta": t.eta})
    return {
        "epsilon": cfg.epsilon,
        "steps": cfg.steps,
        "momentum": cfg.momentum,
        "step_rule": rule_doc,
        "transforms": transforms,
        "targeted": cfg.targeted,
        "target_label": cfg.target_label,
    }


def config_from_dict(doc: dict, generator=None) -> AttackConfig:
    rule_doc = doc["step_rule"]
    if rule_doc["type"] == "sign":
        rule = SignStep(alpha=rule_doc["alpha"])
    elif rule_doc["type"] == "fixed":
        rule = FixedScaleStep(gamma=rule_doc["gamma"])
    elif rule_doc["type"] == "adaptive":
        if generator is None:
            raise ValueError("adaptive step rule needs a generator instance")
        rule = AdaptiveStep(generator=generator)
    else:
        raise ValueError(f"unknown step rule type {rule_doc['type']!r}")
    transforms = []
    for t in doc.get("transforms", []):
        kind = t["type"]
        if kind == "dim":
            transforms.append(Dim(p=t["p"], min_fraction=t.get("min_fraction", 0.9)))
        elif kind == "tim":
            transforms.append(Tim(k=t["k"], sigma=t.get("sigma")))
        elif kind == "sim":
            transforms.append(Sim(m=t["m"]))
        elif kind == "vt":
            transforms.append(Vt(n=t["n"], beta=t["beta"]))
        elif kind == "emi":
            transforms.append(Emi(n=t["n"], eta=t["eta"]))
        else:
            raise ValueError(f"unknown transform type {kind!r}")
    return AttackConfig(
        epsilon=doc["epsilon"],
        steps=doc["steps"],
        step_rule=rule,
        momentum=doc.get("momentum"),
        transforms=tuple(transforms),
        targeted=doc.get("targeted", False),
        target_label=doc.get("target_label"),
    )
