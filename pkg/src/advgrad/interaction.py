"""Shapley values, pairwise interaction indices, and the closed-form
trajectory analysis of the momentum + scaled-step update.

Exact enumeration routines here serve as oracles: they are deliberately
brute-force and independent of the closed forms they verify.
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction
from dataclasses import dataclass

import numpy as np

from .numerics import make_rng

__all__ = [
    "AnalyticGame",
    "CoefficientSchedule",
    "InteractionEstimate",
    "coefficients",
    "coefficients_exact",
    "simulate_raw",
    "predicted_delta",
    "reward",
    "game_reward",
    "make_model_setfn",
    "make_game_setfn",
    "shapley_value_exact",
    "shapley_interaction_exact",
    "expected_interaction_sampled",
    "exact_mean_interaction",
    "predicted_interaction",
]

EXACT_PLAYER_LIMIT = 20


@dataclass
class AnalyticGame:
    """Quadratic loss surrogate: L(x0 + d) = L0 + g.d + d H d / 2."""

    g: np.ndarray
    H: np.ndarray
    x0: np.ndarray | None = None

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=np.float64)
        self.H = np.asarray(self.H, dtype=np.float64)
        n = self.g.size
        if self.H.shape != (n, n):
            raise ValueError("H must be square and match g")
        if not np.allclose(self.H, self.H.T, atol=1e-12):
            raise ValueError("H must be symmetric within 1e-12")
        if self.x0 is None:
            self.x0 = np.zeros(n)
        else:
            self.x0 = np.asarray(self.x0, dtype=np.float64)

    def grad_loss(self, x: np.ndarray) -> np.ndarray:
        return self.g + (np.asarray(x) - self.x0) @ self.H


@dataclass(frozen=True)
class CoefficientSchedule:
    """Closed-form weights of the first- and second-order gradient terms."""

    m: int
    mu: float
    a: float
    b: float
    c: float
    d: float


@dataclass(frozen=True)
class InteractionEstimate:
    value: float
    stderr: float
    num_pairs: int
    num_subsets: int


def coefficients_exact(m: int, mu) -> tuple[Fraction, Fraction, Fraction, Fraction]:
    """Direct summation of the four closed forms in exact rational arithmetic.

    Terms carrying the (i - 1) factor vanish at i = 1, so the mu^(i-2)
    power is never evaluated at a negative exponent; 0^0 counts as 1.
    Exact as long as mu is a float or Fraction (floats are dyadic).
    """
    if m < 1:
        raise ValueError("step index m must be >= 1")
    mu = Fraction(mu)
    a = sum((mu ** (i - 1) for i in range(1, m + 1)), Fraction(0))
    b = sum(((m - i + 1) * (i - 1) * mu ** (i - 2) for i in range(2, m + 1)), Fraction(0))
    c = sum(((m - i + 1) * mu ** (i - 1) for i in range(1, m + 1)), Fraction(0))
    d = sum(
        (Fraction((m - i + 2) * (m - i + 1) * (i - 1), 2) * mu ** (i - 2)
         for i in range(2, m + 1)),
        Fraction(0),
    )
    return a, b, c, d


def coefficients(m: int, mu: float) -> CoefficientSchedule:
    """Closed-form coefficient schedule, rounded once to 64-bit floats."""
    a, b, c, d = coefficients_exact(m, mu)
    return CoefficientSchedule(m=m, mu=mu, a=float(a), b=float(b), c=float(c), d=float(d))


def simulate_raw(game: AnalyticGame, mu: float, gamma: float, m: int):
    """Raw momentum + scaled-step dynamics without normalization or clipping.

    g_t = mu * g_{t-1} + grad L(x0 + delta_{t-1}),  delta_t += gamma * g_t.
    Exact for the quadratic game; returns (g_m, delta_m).
    """
    if m < 1:
        raise ValueError("step count m must be >= 1")
    g_acc = np.zeros_like(game.g)
    delta = np.zeros_like(game.g)
    for _ in range(m):
        g_acc = mu * g_acc + game.grad_loss(game.x0 + delta)
        delta = delta + gamma * g_acc
    return g_acc, delta


def predicted_delta(schedule: CoefficientSchedule, gamma: float,
                    game: AnalyticGame) -> np.ndarray:
    """c_m * gamma * g + d_m * gamma^2 * gH (row convention)."""
    return schedule.c * gamma * game.g + schedule.d * gamma**2 * (game.g @ game.H)


# -- reward functions -------------------------------------------------------


def reward(model, x: np.ndarray, delta_subset: np.ndarray, y: int) -> float:
    """Best wrong-class logit minus true-class logit at x + masked delta."""
    if model.num_classes < 2:
        raise ValueError("reward needs at least two classes")
    logits = model.logits(x + delta_subset)
    rivals = np.delete(logits, y)
    return float(rivals.max() - logits[y])


def game_reward(game: AnalyticGame, delta_subset: np.ndarray) -> float:
    """Quadratic surrogate reward w(d) = g.d + d H d / 2."""
    d = np.asarray(delta_subset, dtype=np.float64)
    return float(game.g @ d + 0.5 * d @ game.H @ d)


def make_model_setfn(model, x: np.ndarray, delta: np.ndarray, y: int):
    """Set function v(S) over flattened perturbation units of a classifier."""
    flat = delta.reshape(-1)

    def v(subset):
        masked = np.zeros_like(flat)
        idx = list(subset)
        masked[idx] = flat[idx]
        return reward(model, x, masked.reshape(delta.shape), y)

    return v, flat.size


def make_game_setfn(game: AnalyticGame, delta: np.ndarray):
    flat = np.asarray(delta, dtype=np.float64).reshape(-1)

    def v(subset):
        masked = np.zeros_like(flat)
        idx = list(subset)
        masked[idx] = flat[idx]
        return game_reward(game, masked)

    return v, flat.size


# -- exact Shapley machinery ------------------------------------------------


def shapley_value_exact(v, i: int, n: int) -> float:
    """Full 2^(n-1) enumeration of the Shapley attribution of player i."""
    if n > EXACT_PLAYER_LIMIT:
        raise ValueError(
            f"exact enumeration is limited to {EXACT_PLAYER_LIMIT} players; "
            "use expected_interaction_sampled for larger games"
        )
    if not 0 <= i < n:
        raise ValueError("player index out of range")
    others = [p for p in range(n) if p != i]
    total = 0.0
    fact = math.factorial
    for size in range(n):
        weight = fact(size) * fact(n - size - 1) / fact(n)
        for subset in itertools.combinations(others, size):
            total += weight * (v(subset + (i,)) - v(subset))
    return total


def shapley_interaction_exact(v, a: int, b: int, n: int) -> float:
    """Pairwise interaction: joint contribution of {a, b} as a singleton
    minus the standalone contributions with the partner removed."""
    if a == b:
        raise ValueError("interaction needs two distinct players")
    if n > EXACT_PLAYER_LIMIT:
        raise ValueError(f"exact enumeration is limited to {EXACT_PLAYER_LIMIT} players")
    others = tuple(p for p in range(n) if p not in (a, b))

    def v_joint(subset):
        # player index len(others) stands for the fused pair {a, b}
        expanded = []
        for p in subset:
            if p == len(others):
                expanded.extend((a, b))
            else:
                expanded.append(others[p])
        return v(tuple(expanded))

    phi_pair = shapley_value_exact(v_joint, len(others), len(others) + 1)

    def restricted(drop):
        keep = tuple(p for p in range(n) if p != drop)

        def vr(subset):
            return v(tuple(keep[p] for p in subset))

        return vr, keep.index

    v_no_b, idx_no_b = restricted(b)
    phi_a = shapley_value_exact(v_no_b, idx_no_b(a), n - 1)
    v_no_a, idx_no_a = restricted(a)
    phi_b = shapley_value_exact(v_no_a, idx_no_a(b), n - 1)
    return phi_pair - (phi_a + phi_b)


def expected_interaction_sampled(v, n: int, num_pairs: int, num_subsets: int,
                                 rng: np.random.Generator | None = None) -> InteractionEstimate:
    """Monte Carlo mean pairwise interaction via discrete second differences.

    Pairs are uniform over unordered distinct (a, b); per pair, subset sizes
    are uniform in {0, ..., n-2} and subsets uniform at that size.
    """
    if n < 2:
        raise ValueError("need at least two players")
    if num_pairs < 1 or num_subsets < 1:
        raise ValueError("need at least one pair and one subset")
    rng = rng if rng is not None else make_rng(0)
    samples = []
    for _ in range(num_pairs):
        a, b = (int(p) for p in rng.choice(n, size=2, replace=False))
        others = np.array([p for p in range(n) if p not in (a, b)], dtype=int)
        for _ in range(num_subsets):
            size = int(rng.integers(0, n - 1))
            subset = tuple(int(p) for p in rng.choice(others, size=size, replace=False))
            d = (
                v(subset + (a, b))
                - v(subset + (a,))
                - v(subset + (b,))
                + v(subset)
            )
            samples.append(d)
    arr = np.asarray(samples)
    stderr = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0
    return InteractionEstimate(
        value=float(arr.mean()), stderr=stderr,
        num_pairs=num_pairs, num_subsets=num_subsets,
    )


def exact_mean_interaction(game: AnalyticGame, delta: np.ndarray) -> float:
    """Mean over distinct pairs of delta_a * H_ab * delta_b (quadratic game
    identity for the exact pairwise Shapley interaction)."""
    d = np.asarray(delta, dtype=np.float64)
    n = d.size
    M = np.outer(d, d) * game.H
    return float((M.sum() - np.trace(M)) / (n * (n - 1)))


def predicted_interaction(schedule: CoefficientSchedule, gamma: float,
                          game: AnalyticGame):
    """Cubic-in-gamma interaction prediction; returns (value, A, B).

    A and B are means over distinct ordered pairs, which coincides with the
    unordered-pair mean after symmetrization.
    """
    g, H = game.g, game.H
    n = g.size
    if n < 2:
        raise ValueError("need at least two perturbation units")
    gH = g @ H
    MA = np.outer(g, g) * H
    A = schedule.c**2 * (MA.sum() - np.trace(MA)) / (n * (n - 1))
    MB = np.outer(g, gH) * H
    B = schedule.c * schedule.d * (MB.sum() - np.trace(MB)) / (n * (n - 1))
    value = A * gamma**2 + 2.0 * B * gamma**3
    return float(value), float(A), float(B)
