"""Slow, literal reference implementations used as test oracles.

Everything here runs in float64 numpy with explicit loops over user/item
pairs and is only meant for small instances.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .graph import InteractionGraph
from .layers import RankformerConfig, attention_weight_neg, attention_weight_pos, gradient_step_config

MAX_PAIRS = 1_000_000


class InstanceTooLarge(ValueError):
    pass


def _check_size(g: InteractionGraph) -> None:
    if g.n * g.m > MAX_PAIRS:
        raise InstanceTooLarge(f"{g.n}x{g.m} pairs exceed oracle limit {MAX_PAIRS}")


def _normalize(Z: np.ndarray, eps: float) -> np.ndarray:
    out = Z.copy()
    for r in range(len(Z)):
        norm = np.sqrt(np.sum(Z[r] ** 2))
        if norm >= eps:
            out[r] = Z[r] / norm
    return out


def naive_benchmarks(g: InteractionGraph, Z) -> tuple[np.ndarray, np.ndarray]:
    Z = np.asarray(Z, dtype=np.float64)
    n, m = g.n, g.m
    b_pos, b_neg = np.zeros(n), np.zeros(n)
    for u in range(n):
        pos = set(g.user_items(u).tolist())
        sp, sn = 0.0, 0.0
        for i in range(m):
            s = float(Z[u] @ Z[n + i])
            if i in pos:
                sp += s
            else:
                sn += s
        if pos:
            b_pos[u] = sp / len(pos)
        if len(pos) < m:
            b_neg[u] = sn / (m - len(pos))
    return b_pos, b_neg


def naive_weights(g: InteractionGraph, Z, alpha: float) -> np.ndarray:
    """Dense (n, m) matrix of attention weights, positive pairs and negative
    pairs alike, each from its defining formula."""
    Z = np.asarray(Z, dtype=np.float64)
    _check_size(g)
    n, m = g.n, g.m
    b_pos, b_neg = naive_benchmarks(g, Z)
    omega = np.zeros((n, m))
    for u in range(n):
        pos = set(g.user_items(u).tolist())
        du = len(pos)
        for i in range(m):
            s = float(Z[u] @ Z[n + i])
            if i in pos:
                omega[u, i] = attention_weight_pos(s, b_neg[u], alpha, du)
            elif du < m:
                omega[u, i] = attention_weight_neg(s, b_pos[u], alpha, du, m)
    return omega


def naive_layer(g: InteractionGraph, Z, cfg: RankformerConfig) -> np.ndarray:
    """One Rankformer layer evaluated pair by pair, absolute values included.

    Weights and aggregated rows use the normalized embeddings (when enabled);
    the residual term uses the input rows.

    A row whose absolute weights sum to at most ``epsilon_div`` has only zero
    weights and receives no attention term.
    """
    Z = np.asarray(Z, dtype=np.float64)
    _check_size(g)
    n = g.n
    Z_in = Z
    if cfg.normalize_embeddings:
        Z = _normalize(Z, cfg.epsilon_div)
    omega = naive_weights(g, Z, cfg.alpha)
    if cfg.unit_normalizer:
        C_user, C_item = np.ones(g.n), np.ones(g.m)
    else:
        C_user = np.maximum(np.abs(omega).sum(1), cfg.epsilon_div)
        C_item = np.maximum(np.abs(omega).sum(0), cfg.epsilon_div)
    keep = 1.0 - cfg.tau * cfg.lambda_reg
    out = np.empty_like(Z)
    for u in range(n):
        acc = np.zeros(Z.shape[1])
        for i in range(g.m):
            acc += omega[u, i] * Z[n + i]
        out[u] = keep * Z_in[u] + (cfg.tau * acc / C_user[u] if C_user[u] > cfg.epsilon_div else 0.0)
    for i in range(g.m):
        acc = np.zeros(Z.shape[1])
        for u in range(n):
            acc += omega[u, i] * Z[u]
        out[n + i] = keep * Z_in[n + i] + (cfg.tau * acc / C_item[i] if C_item[i] > cfg.epsilon_div else 0.0)
    return out


def naive_warmup_layer(g: InteractionGraph, Z, tau: float) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    n = g.n
    out = Z.copy()
    for u in range(n):
        items = g.user_items(u)
        if len(items):
            out[u] = (1 - tau) * Z[u] + tau * sum(Z[n + i] for i in items) / len(items)
    for i in range(g.m):
        users = g.item_users(i)
        if len(users):
            out[n + i] = (1 - tau) * Z[n + i] + tau * sum(Z[u] for u in users) / len(users)
    return out


@dataclass
class SurrogateLossReport:
    value: float
    grad: np.ndarray
    omega_min: float
    omega_max: float
    skipped_users: list[int] = field(default_factory=list)


def surrogate_loss(g: InteractionGraph, Z, alpha: float, literal: bool = False) -> SurrogateLossReport:
    """Quadratic pairwise surrogate and its exact gradient.

    With ``delta = z_u.z_i - z_u.z_j`` over triples (u, i in N+, j in N-) and
    ``omega = delta + alpha``:

    * default: ``-sum (delta^2/2 + alpha*delta) / (d_u (m-d_u)) + ||Z||^2 / 2``.
      Its gradient is exactly ``Z - Omega Z`` with unit normalizers, i.e. one
      Rankformer layer is ``Z - tau * grad``.
    * ``literal=True``: ``-sum omega*delta / (d_u (m-d_u)) + ||Z||^2``, the
      activation ``x^2 + alpha x`` with regularizer weight 1. Its gradient is
      ``2Z - Omega' Z`` with ``omega' = 2 delta + alpha``.
    """
    Z = np.asarray(Z, dtype=np.float64)
    n, m = g.n, g.m
    Zu, Zi = Z[:n], Z[n:]
    grad = np.zeros_like(Z)
    value = 0.0
    omin, omax = np.inf, -np.inf
    skipped = []
    for u in range(n):
        P = g.user_items(u)
        du = len(P)
        if du == 0 or du == m:
            skipped.append(u)
            continue
        N = np.setdiff1d(np.arange(m), P)
        k = du * (m - du)
        s = Zi @ Zu[u]
        delta = s[P][:, None] - s[N][None, :]
        omega = delta + alpha
        omin, omax = min(omin, omega.min()), max(omax, omega.max())
        if literal:
            value -= np.sum(omega * delta) / k
            coef = (2 * delta + alpha) / k
        else:
            value -= np.sum(0.5 * delta**2 + alpha * delta) / k
            coef = omega / k
        row, col = coef.sum(1), coef.sum(0)
        grad[u] -= row @ Zi[P] - col @ Zi[N]
        grad[n + P] -= row[:, None] * Zu[u]
        grad[n + N] += col[:, None] * Zu[u]
    if literal:
        value += np.sum(Z**2)
        grad += 2 * Z
    else:
        value += 0.5 * np.sum(Z**2)
        grad += Z
    return SurrogateLossReport(float(value), grad, float(omin), float(omax), skipped)


def finite_difference_gradient(f: Callable[[np.ndarray], float], theta, h_rel: float = 1e-4) -> np.ndarray:
    """Central differences with per-coordinate step ``h_rel * (1 + |theta_k|)``."""
    theta = np.array(theta, dtype=np.float64)
    flat = theta.ravel()
    grad = np.zeros_like(flat)
    for k in range(flat.size):
        h = h_rel * (1.0 + abs(flat[k]))
        orig = flat[k]
        flat[k] = orig + h
        fp = f(theta)
        flat[k] = orig - h
        fm = f(theta)
        flat[k] = orig
        grad[k] = (fp - fm) / (2 * h)
    return grad.reshape(theta.shape)


@dataclass
class GradientStepReport:
    analytic_error: float  # naive layer vs Z - tau * analytic grad
    fd_error: float  # naive layer vs Z - tau * finite-difference grad
    fast_error: float | None = None  # fast layer vs Z - tau * analytic grad

    def passed(self, analytic_tol: float = 1e-8, fd_tol: float = 1e-4) -> bool:
        errs = [self.analytic_error] + ([self.fast_error] if self.fast_error is not None else [])
        return max(errs) <= analytic_tol and self.fd_error <= fd_tol


def gradient_step_equivalence(
    g: InteractionGraph, Z, tau: float, alpha: float, fast_layer: Callable | None = None
) -> GradientStepReport:
    """Compare one layer (unit normalizers, no row normalization, no warm-up)
    with one gradient-descent step of size ``tau`` on :func:`surrogate_loss`."""
    Z = np.asarray(Z, dtype=np.float64)
    cfg = gradient_step_config(RankformerConfig(tau=tau, alpha=alpha, layers=1))
    layer = naive_layer(g, Z, cfg)
    analytic = Z - tau * surrogate_loss(g, Z, alpha).grad
    fd = Z - tau * finite_difference_gradient(lambda z: surrogate_loss(g, z, alpha).value, Z)
    fast_err = None
    if fast_layer is not None:
        fast_err = float(np.max(np.abs(np.asarray(fast_layer(g, Z, cfg)) - analytic)))
    return GradientStepReport(
        analytic_error=float(np.max(np.abs(layer - analytic))),
        fd_error=float(np.max(np.abs(layer - fd))),
        fast_error=fast_err,
    )


def finite_difference_hessian(grad_fn: Callable[[np.ndarray], np.ndarray], theta, h_rel: float = 1e-4) -> np.ndarray:
    theta = np.array(theta, dtype=np.float64).ravel()
    p = theta.size
    H = np.zeros((p, p))
    for k in range(p):
        h = h_rel * (1.0 + abs(theta[k]))
        e = np.zeros(p)
        e[k] = h
        H[:, k] = (grad_fn(theta + e) - grad_fn(theta - e)) / (2 * h)
    return 0.5 * (H + H.T)


@dataclass
class ResidualScalingReport:
    taus: list[float]
    residuals: list[float]
    ratios: list[tuple[float, float]]  # (tau, r(2 tau) / r(tau)) for valid pairs
    coefficient: float

    def passed(self, lo: float = 3.0, hi: float = 5.0, min_pairs: int = 2) -> bool:
        return len(self.ratios) >= min_pairs and all(lo <= r <= hi for _, r in self.ratios)

    def table(self) -> list[tuple[float, float, float]]:
        return [(t, r, r / t**2) for t, r in zip(self.taus, self.residuals)]


def lookahead_residual_scaling(
    loss_fn: Callable[[np.ndarray], float],
    grad_fn: Callable[[np.ndarray], np.ndarray],
    theta,
    tau_list: Sequence[float],
    coefficient: float = 3.0,
    h_rel: float = 1e-4,
    min_tau: float = 1e-3,
    noise_floor: float = 1e-7,
) -> ResidualScalingReport:
    """Residual of the first-order expansion of the look-ahead gradient.

    ``r(tau) = || grad L_R(theta) - (I - coefficient * tau * H) grad L(theta) ||``
    where ``L_R(theta) = L(theta - tau grad L(theta))``; ``grad L_R`` comes
    from central differences and ``H`` from differencing ``grad_fn``. If the
    expansion is right to first order, ``r`` is O(tau^2) and halving tau
    divides it by ~4. Pairs with tau below ``min_tau`` or residuals below
    ``noise_floor * (1 + |grad|)`` are skipped.
    """
    theta = np.array(theta, dtype=np.float64).ravel()
    g0 = grad_fn(theta)
    H = finite_difference_hessian(grad_fn, theta, h_rel)
    taus = sorted(float(t) for t in tau_list)
    residuals = []
    for tau in taus:
        lookahead = lambda th, tau=tau: loss_fn(th - tau * grad_fn(th))  # noqa: E731
        g_r = finite_difference_gradient(lookahead, theta, h_rel)
        predicted = g0 - coefficient * tau * (H @ g0)
        residuals.append(float(np.linalg.norm(g_r - predicted)))
    floor = noise_floor * (1.0 + np.linalg.norm(g0))
    ratios = []
    for (t1, r1), (t2, r2) in zip(zip(taus, residuals), zip(taus[1:], residuals[1:])):
        if not np.isclose(t2, 2 * t1) or t1 < min_tau or r1 < floor or r2 < floor:
            continue
        ratios.append((t1, r2 / r1))
    return ResidualScalingReport(taus, residuals, ratios, coefficient)


def surrogate_residual_scaling(
    g: InteractionGraph, Z, alpha: float, tau_list: Sequence[float], coefficient: float = 3.0
) -> ResidualScalingReport:
    Z = np.asarray(Z, dtype=np.float64)
    shape = Z.shape
    if Z.size > 200:
        raise InstanceTooLarge("residual scaling needs at most 200 parameters")
    loss = lambda th: surrogate_loss(g, th.reshape(shape), alpha).value  # noqa: E731
    grad = lambda th: surrogate_loss(g, th.reshape(shape), alpha).grad.ravel()  # noqa: E731
    return lookahead_residual_scaling(loss, grad, Z.ravel(), tau_list, coefficient)


@dataclass
class QuadraticToy:
    """``L(theta) = theta^T A theta / 2 + b^T theta`` with constant Hessian ``A``."""

    A: np.ndarray
    b: np.ndarray

    @classmethod
    def random(cls, dim: int, seed: int = 0, scale: float = 1.0) -> "QuadraticToy":
        rng = np.random.default_rng(seed)
        M = rng.standard_normal((dim, dim))
        return cls(scale * (M @ M.T / dim + np.eye(dim)), rng.standard_normal(dim))

    def loss(self, theta: np.ndarray) -> float:
        return float(0.5 * theta @ self.A @ theta + self.b @ theta)

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return self.A @ theta + self.b

    def minimizer(self) -> np.ndarray:
        return -np.linalg.solve(self.A, self.b)
