"""Numerical checks of the two convergence results.

* A convex quadratic testbed: gradient descent driven by a perturbed gradient
  ``grad f' = grad f + delta`` while progress is measured on ``f``.
* A Monte-Carlo check of the gradient-gap bound for the linearised one-head
  layer ``y = x A x^T x B C`` under squared loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .transformer import ContractError

DeltaPolicy = Callable[[np.ndarray, np.ndarray, np.random.Generator], np.ndarray]


@dataclass
class ConvexTestbed:
    """``f(x) = 1/2 x^T Q x - b^T x`` with ``Q`` symmetric positive definite."""

    Q: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.Q = np.asarray(self.Q, np.float64)
        self.b = np.asarray(self.b, np.float64)
        if not np.allclose(self.Q, self.Q.T):
            raise ContractError("Q must be symmetric")
        eig = np.linalg.eigvalsh(self.Q)
        if eig.min() <= 0:
            raise ContractError("Q must be positive definite")
        self.lipschitz = float(eig.max())
        self.x_star = np.linalg.solve(self.Q, self.b)
        self.f_star = self.f(self.x_star)

    @classmethod
    def random(cls, dim: int, rng: np.random.Generator, cond: float = 10.0) -> "ConvexTestbed":
        basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        eig = np.geomspace(1.0, cond, dim)
        return cls(basis @ np.diag(eig) @ basis.T, rng.standard_normal(dim))

    def f(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.Q @ x - self.b @ x)

    def grad(self, x: np.ndarray) -> np.ndarray:
        return self.Q @ x - self.b


# -- gap policies ------------------------------------------------------------


def proportional_gap(c: float) -> DeltaPolicy:
    """``delta = c * grad f'`` exactly, i.e. ``delta = c / (1 - c) * grad f``."""
    if not 0 <= c < 1:
        raise ContractError("c must lie in [0, 1)")
    return lambda x, g, rng: (c / (1.0 - c)) * g


def gradient_multiple_gap(k: float) -> DeltaPolicy:
    """``delta = k * grad f``."""
    return lambda x, g, rng: k * g


def random_direction_gap(ratio: float) -> DeltaPolicy:
    """Random direction with ``||delta||^2 = ratio * ||grad f + delta||^2``."""
    if not 0 <= ratio < 1:
        raise ContractError("ratio must lie in [0, 1)")

    def policy(x, g, rng):
        u = rng.standard_normal(g.shape)
        u /= np.linalg.norm(u)
        gu, gg = float(g @ u), float(g @ g)
        s = (ratio * gu + np.sqrt((ratio * gu) ** 2 + (1 - ratio) * ratio * gg)) / (1 - ratio)
        return s * u

    return policy


@dataclass
class DescentTrace:
    xs: list[np.ndarray]
    fs: list[float]
    delta_sq: list[float]
    grad_sq: list[float]
    grad_perturbed_sq: list[float]
    cond_main: list[bool]
    cond_appendix: list[bool]
    eq12_lhs: float
    eq12_rhs: float
    gap: float
    bound: float
    decrease_violations: list[int] = field(default_factory=list)
    bound_checked: bool = False
    bound_violated: bool = False

    @property
    def ok(self) -> bool:
        return not self.decrease_violations and not self.bound_violated


def convex_descent_experiment(
    testbed: ConvexTestbed,
    eta: float,
    k: int,
    policy: DeltaPolicy,
    x0: np.ndarray,
    rng: np.random.Generator | None = None,
) -> DescentTrace:
    """Run ``x <- x - eta * (grad f(x) + delta(x))`` for ``k`` steps and check both claims.

    (a) every step whose gap satisfied ``||delta||^2 < ||grad f'||^2 / 2``
        must strictly decrease ``f`` (unless already at the optimum);
    (b) if the per-step gap condition against ``||grad f||^2 / 2`` held at
        every step and ``eta * sum ||delta_i||^2 <= sum <delta_i, x_i - x*>``,
        then ``f(x_k) - f* <= ||x_0 - x*||^2 / (2 eta k)``.

    In the inner-product sum ``delta_i`` is the gap that produced iterate
    ``x_i``, paired with that iterate.
    """
    if eta <= 0 or eta > 1.0 / testbed.lipschitz * (1 + 1e-12):
        raise ContractError(f"step size {eta} must lie in (0, 1/L] with L = {testbed.lipschitz}")
    if k < 1:
        raise ContractError("k must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.asarray(x0, np.float64).copy()
    xs, fs = [x.copy()], [testbed.f(x)]
    d2s, g2s, p2s, main, appx = [], [], [], [], []
    violations = []
    lhs = rhs = 0.0
    for i in range(k):
        g = testbed.grad(x)
        delta = policy(x, g, rng)
        gp = g + delta
        d2, g2, p2 = float(delta @ delta), float(g @ g), float(gp @ gp)
        x_next = x - eta * gp
        f_next = testbed.f(x_next)
        d2s.append(d2)
        g2s.append(g2)
        p2s.append(p2)
        main.append(d2 < 0.5 * g2)
        appx.append(d2 < 0.5 * p2)
        if appx[-1] and p2 > 0 and not f_next < fs[-1]:
            violations.append(i)
        lhs += eta * d2
        rhs += float(delta @ (x_next - testbed.x_star))
        x = x_next
        xs.append(x.copy())
        fs.append(f_next)
    gap = fs[-1] - testbed.f_star
    bound = float(np.sum((xs[0] - testbed.x_star) ** 2) / (2 * eta * k))
    trace = DescentTrace(xs, fs, d2s, g2s, p2s, main, appx, lhs, rhs, gap, bound, violations)
    if all(main) and lhs <= rhs:
        trace.bound_checked = True
        trace.bound_violated = gap > bound * (1 + 1e-12) + 1e-12
    return trace


# ---------------------------------------------------------------------------
# gradient gap bound for the linearised layer


def _spec(m: np.ndarray) -> float:
    return float(np.linalg.norm(m, 2))


@dataclass
class LinearisedInstance:
    x: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    target: np.ndarray

    def output(self, C: np.ndarray | None = None) -> np.ndarray:
        C = self.C if C is None else C
        x = self.x
        return x @ self.A @ x.T @ x @ self.B @ C

    def loss(self, C: np.ndarray | None = None) -> float:
        r = self.output(C) - self.target
        return 0.5 * float((r * r).sum())

    def grads(self, C: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(dloss/dy, dloss/dA, dloss/dB)`` for squared loss ``1/2 ||y - target||^2``."""
        C = self.C if C is None else C
        x = self.x
        G = self.output(C) - self.target
        dA = x.T @ G @ C.T @ self.B.T @ x.T @ x
        P = x @ self.A @ x.T @ x
        dB = P.T @ G @ C.T
        return G, dA, dB


def gap_constants(inst: LinearisedInstance, C_sub: np.ndarray, lipschitz: float = 1.0) -> dict[str, float]:
    """Constants multiplying the weight gap (``k1``) and the output gap (``k2``).

    Derivation per parameter: ``||x^T (G C^T - G' C'^T) B^T x^T x||`` splits into
    an output-gradient part bounded through ``L3 ||y - y'||^2`` and a weight
    part bounded through ``||C - C'||^2``. The ``A``-constants use ``||B||``,
    the ``B``-constants use ``||A||``; the final constants are the maxima.
    """
    x6 = _spec(inst.x) ** 6
    G_sub = inst.output(C_sub) - inst.target
    g2 = float((G_sub * G_sub).sum())
    c2 = _spec(inst.C) ** 2
    b2, a2 = _spec(inst.B) ** 2, _spec(inst.A) ** 2
    out = {
        "k_output_A": lipschitz * x6 * b2 * c2,
        "k_weight_A": x6 * b2 * g2,
        "k_output_B": lipschitz * x6 * a2 * c2,
        "k_weight_B": x6 * a2 * g2,
    }
    out["k1"] = max(out["k_weight_A"], out["k_weight_B"])
    out["k2"] = max(out["k_output_A"], out["k_output_B"])
    return out


@dataclass
class GapBoundReport:
    trials: int
    violations_A: int
    violations_B: int
    max_ratio_A: float
    max_ratio_B: float
    rows: list[dict] = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return self.violations_A == 0 and self.violations_B == 0


def random_instance(d: int, rng: np.random.Generator, n: int | None = None) -> LinearisedInstance:
    n = d if n is None else n
    s = 1.0 / np.sqrt(d)
    return LinearisedInstance(
        rng.standard_normal((n, d)) * s,
        rng.standard_normal((d, d)) * s,
        rng.standard_normal((d, d)) * s,
        rng.standard_normal((d, d)) * s,
        rng.standard_normal((n, d)),
    )


def theorem2_check(
    trials: int = 100,
    sizes: Sequence[int] = (4,),
    eps1_range: tuple[float, float] = (1e-4, 1e-1),
    eps2_range: tuple[float, float] = (1.0, 1.0),
    seed: int = 0,
    k1_override: float | None = None,
) -> GapBoundReport:
    """Monte-Carlo check of ``||dL'/dA - dL/dA||^2 <= K1 eps1 + K2 eps2`` (and for ``B``).

    ``eps1`` is drawn log-uniformly from ``eps1_range`` and ``C'`` is built
    with ``||C - C'||_2^2 = eps1`` exactly; ``eps2`` is the measured
    ``||y - y'||^2`` times a factor drawn from ``eps2_range`` (1 = tightest).
    ``k1_override`` replaces the computed ``K1`` (fault injection).
    """
    rng = np.random.default_rng(seed)
    viol_a = viol_b = 0
    max_a = max_b = 0.0
    rows = []
    for t in range(trials):
        d = int(sizes[t % len(sizes)])
        inst = random_instance(d, rng)
        eps1 = float(np.exp(rng.uniform(np.log(eps1_range[0]), np.log(eps1_range[1]))))
        E = rng.standard_normal((d, d))
        E *= np.sqrt(eps1) / _spec(E)
        C_sub = inst.C + E
        y, y_sub = inst.output(), inst.output(C_sub)
        eps2 = float(((y - y_sub) ** 2).sum()) * float(rng.uniform(*eps2_range))
        _, dA, dB = inst.grads()
        _, dA_sub, dB_sub = inst.grads(C_sub)
        k = gap_constants(inst, C_sub)
        k1 = k["k1"] if k1_override is None else k1_override
        bound = k1 * eps1 + k["k2"] * eps2
        lhs_a = float(((dA_sub - dA) ** 2).sum())
        lhs_b = float(((dB_sub - dB) ** 2).sum())
        ra = lhs_a / bound if bound > 0 else (np.inf if lhs_a > 0 else 0.0)
        rb = lhs_b / bound if bound > 0 else (np.inf if lhs_b > 0 else 0.0)
        viol_a += lhs_a > bound
        viol_b += lhs_b > bound
        max_a, max_b = max(max_a, ra), max(max_b, rb)
        rows.append({"d": d, "eps1": eps1, "eps2": eps2, "k1": k1, "k2": k["k2"], "gap_A": lhs_a, "gap_B": lhs_b, "bound": bound})
    return GapBoundReport(trials, int(viol_a), int(viol_b), max_a, max_b, rows)
