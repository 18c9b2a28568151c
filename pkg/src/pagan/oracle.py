"""Brute-force verifiers on finite supports, plus a finite-difference checker.

Everything here is plain float64 numpy and deliberately shares no code
with the training path, so it can serve as an independent reference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pagan.errors import DomainError, NumericError

LN4 = float(np.log(4.0))


@dataclass(frozen=True)
class DiscreteJoint:
    """Joint table p(x, y) over a finite n_x by n_y support."""

    table: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if t.ndim != 2:
            raise ValueError(f"joint table must be 2-D, got shape {t.shape}")
        if np.any(t < 0) or abs(t.sum() - 1.0) > 1e-12:
            raise ValueError(f"joint table must be non-negative and sum to 1 (sum={t.sum()!r})")
        object.__setattr__(self, "table", t)

    @property
    def shape(self):
        return self.table.shape

    @property
    def marginal_x(self):
        return self.table.sum(axis=1)

    def conditional(self):
        """p(y | x) rows; rows with zero marginal are left at zero."""
        px = self.marginal_x[:, None]
        return np.divide(self.table, px, out=np.zeros_like(self.table), where=px > 0)

    @classmethod
    def from_conditional(cls, p_x, p_y_given_x):
        return cls(np.asarray(p_x)[:, None] * np.asarray(p_y_given_x))


def _check_prob(p, name):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name} is not a probability vector (sum={p.sum()!r})")
    return p


def kl_discrete(p, q):
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    mask = p > 0
    if np.any(q[mask] == 0):
        return np.inf
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def jsd_discrete(p, q):
    """Jensen-Shannon divergence in nats; lies in [0, ln 2]."""
    p = _check_prob(p, "p")
    q = _check_prob(q, "q")
    if p.shape != q.shape:
        raise ValueError(f"supports differ: {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)
    return 0.5 * kl_discrete(p, m) + 0.5 * kl_discrete(q, m)


def _same_support(real, fake):
    if real.shape != fake.shape:
        raise ValueError(f"support mismatch: {real.shape} vs {fake.shape}")


def optimal_discriminator_table(real, fake):
    """D*(t) = p1(t) / (p1(t) + p2(t)); NaN where both masses vanish."""
    _same_support(real, fake)
    p1, p2 = real.table, fake.table
    total = p1 + p2
    return np.divide(p1, total, out=np.full_like(p1, np.nan), where=total > 0)


def value_function_discrete(real, fake, d):
    """E_p1 log D + E_p2 log(1 - D), summed exactly over the support."""
    _same_support(real, fake)
    d = np.asarray(d, dtype=np.float64)
    p1, p2 = real.table, fake.table
    if np.any((p1 > 0) & ~(d > 0)) or np.any((p2 > 0) & ~(d < 1)):
        raise DomainError("discriminator hits 0 or 1 on a cell with positive mass")
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(p1 > 0, p1 * np.log(np.where(p1 > 0, d, 1.0)), 0.0)
        b = np.where(p2 > 0, p2 * np.log(np.where(p2 > 0, 1.0 - d, 1.0)), 0.0)
    return float(a.sum() + b.sum())


def expected_jsd_value(real, fake):
    """E_{p*(x)} [-ln 4 + 2 JSD(r(.|x) || p(.|x))], computed row by row.

    Both joints must share the x-marginal p*(x).
    """
    _same_support(real, fake)
    px = real.marginal_x
    if not np.allclose(px, fake.marginal_x, atol=1e-12):
        raise ValueError("joints must share the x-marginal")
    r, p = real.conditional(), fake.conditional()
    total = 0.0
    for i in np.flatnonzero(px > 0):
        total += px[i] * (-LN4 + 2.0 * jsd_discrete(r[i], p[i]))
    return total


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def gradient_descent_discriminator(real, fake, steps, lr=1.0, init=None, return_logits=False):
    """Per-cell sigmoid(logit) discriminator trained by gradient ascent on V.

    dV/dlogit = p1 (1 - D) - p2 D per cell, so cells with no mass under
    either joint never move.
    """
    _same_support(real, fake)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    p1, p2 = real.table, fake.table
    logits = np.zeros_like(p1) if init is None else np.array(init, dtype=np.float64)
    for _ in range(steps):
        d = _sigmoid(logits)
        logits = logits + lr * (p1 * (1.0 - d) - p2 * d)
        if not np.all(np.isfinite(logits)):
            raise NumericError("discriminator logits diverged", where="logits")
    d = _sigmoid(logits)
    return (d, logits) if return_logits else d


def random_joint_pair(rng, n_x, n_y, concentration=1.0, floor=0.0):
    """Two joints sharing p*(x): p*(x) r(y|x) and p*(x) p(y|x)."""
    px = rng.dirichlet(np.full(n_x, concentration))
    r = rng.dirichlet(np.full(n_y, concentration), size=n_x) + floor
    p = rng.dirichlet(np.full(n_y, concentration), size=n_x) + floor
    r /= r.sum(axis=1, keepdims=True)
    p /= p.sum(axis=1, keepdims=True)
    real = px[:, None] * r
    fake = px[:, None] * p
    return DiscreteJoint(real / real.sum()), DiscreteJoint(fake / fake.sum())


def finite_difference_gradient(fn, point, eps=1e-3):
    """Central differences of a scalar numpy function."""
    point = np.array(point, dtype=np.float64)
    grad = np.zeros_like(point)
    for idx in np.ndindex(point.shape):
        orig = point[idx]
        point[idx] = orig + eps
        hi = fn(point)
        point[idx] = orig - eps
        lo = fn(point)
        point[idx] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError(f"non-finite evaluation at index {idx}", where=idx)
        grad[idx] = (hi - lo) / (2 * eps)
    return grad


def relative_error(analytic, numeric):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(numeric)), initial=0.0))


def finite_difference_check(fn, point, eps=1e-3):
    """Max relative error between the autodiff and central-difference gradients.

    ``fn`` maps a float64 :class:`~pagan.tensor.Tensor` to a scalar Tensor.
    """
    from pagan import tensor as T

    point = np.asarray(point, dtype=np.float64)
    x = T.Tensor(point.copy(), requires_grad=True)
    with T.Tape() as tape:
        out = fn(x)
    if not np.isfinite(out.item()):
        raise NumericError("non-finite function value at the check point")
    if out.requires_grad:
        analytic = tape.backward(out).array(x)
    else:
        analytic = np.zeros_like(point)
    numeric = finite_difference_gradient(lambda p: fn(T.Tensor(p.copy())).item(), point, eps)
    return relative_error(analytic, numeric)
