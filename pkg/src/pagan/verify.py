"""Self-checks of the game-theoretic identities on finite supports."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pagan import oracle
from pagan.oracle import DiscreteJoint


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def check_optimal_discriminator(seed=0, trials=5, n=8, steps=20000, lr=20.0, tol=0.05):
    """Gradient-trained per-cell discriminators approach p1 / (p1 + p2)."""
    rng = np.random.default_rng(seed)
    worst_gap, worst_value = 0.0, -np.inf
    for _ in range(trials):
        real, fake = oracle.random_joint_pair(rng, n, n, floor=0.05)
        learned = oracle.gradient_descent_discriminator(real, fake, steps, lr)
        analytic = oracle.optimal_discriminator_table(real, fake)
        worst_gap = max(worst_gap, float(np.nanmax(np.abs(learned - analytic))))
        gain = (oracle.value_function_discrete(real, fake, learned)
                - oracle.value_function_discrete(real, fake, analytic))
        worst_value = max(worst_value, gain)
    ok = worst_gap < tol and worst_value <= 1e-9
    return CheckResult("optimal discriminator", ok,
                       f"max |D - D*| = {worst_gap:.2e} (< {tol}), "
                       f"max V(learned) - V(D*) = {worst_value:.2e} (<= 1e-9)")


def check_expected_jsd(seed=0, trials=100, tol=1e-12):
    """V(D*) = E_p*(x)[-ln 4 + 2 JSD(r(.|x) || p(.|x))]."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(trials):
        n_x, n_y = rng.integers(2, 9, size=2)
        real, fake = oracle.random_joint_pair(rng, n_x, n_y, concentration=0.5 + i % 3)
        d = oracle.optimal_discriminator_table(real, fake)
        lhs = oracle.value_function_discrete(real, fake, np.nan_to_num(d, nan=0.5))
        worst = max(worst, abs(lhs - oracle.expected_jsd_value(real, fake)))
    return CheckResult("value at D* equals expected JSD form", worst < tol,
                       f"max deviation {worst:.2e} over {trials} instances (< {tol:g})")


def degenerate_instance(n=6, seed=0):
    """Real pairs (x, x); fake pairs never hit y = x, as with a continuous generator."""
    rng = np.random.default_rng(seed)
    px = rng.dirichlet(np.ones(n))
    cond = rng.dirichlet(np.ones(n), size=n)
    np.fill_diagonal(cond, 0.0)
    cond /= cond.sum(axis=1, keepdims=True)
    return DiscreteJoint.from_conditional(px, np.eye(n)), DiscreteJoint.from_conditional(px, cond)


def check_degenerate_augmentation(n=6, seed=0):
    """r(y|x) = delta_x(y): D* is exactly the indicator I{x = y} on every cell with mass."""
    real, fake = degenerate_instance(n, seed)
    d = oracle.optimal_discriminator_table(real, fake)
    mask = (real.table > 0) | (fake.table > 0)
    ok = bool(np.array_equal(d[mask], np.eye(n)[mask]))
    return CheckResult("identity augmentation gives indicator discriminator", ok,
                       f"{int(mask.sum())} cells with mass compared exactly")


def check_gradient_penalty(lam=10.0, dim=5, seed=0):
    """Unit-gradient linear critic has zero penalty; a constant critic has exactly lam."""
    from pagan import tensor as T
    from pagan.nets import Discriminator, Linear, Sequential
    from pagan.objectives import gradient_penalty

    rng = np.random.default_rng(seed)
    layer = Linear(dim, 1, rng, dtype=np.float64)
    w = rng.standard_normal((1, dim))
    layer.weight.data = w / np.linalg.norm(w)
    critic = Discriminator(Sequential([layer], "critic"), (dim,), critic=True)
    x = T.Tensor(rng.standard_normal((16, dim)))
    unit = gradient_penalty(critic, x, lam).item()
    layer.weight.data = np.zeros((1, dim))
    const = gradient_penalty(critic, x, lam).item()
    ok = abs(unit) < 1e-9 and abs(const - lam) < 1e-9
    return CheckResult("gradient penalty endpoints", ok,
                       f"unit-gradient {unit:.2e} (0), constant {const!r} ({lam:g})")


CHECKS = (check_optimal_discriminator, check_expected_jsd, check_degenerate_augmentation,
          check_gradient_penalty)


def run_all():
    return [check() for check in CHECKS]
