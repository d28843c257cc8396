"""Verification suites run by ``rankformer verify``.

``fast`` checks the fast layer against the pairwise reference and the
gradient-step identity. ``full`` adds the look-ahead residual scaling and
the weight-sign / closed-form normalizer scans.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .graph import InteractionGraph, random_graph
from .layers import RankformerConfig, compute_benchmarks, compute_normalizers, normalize_rows, rankformer_layer
from .oracle import (
    QuadraticToy,
    gradient_step_equivalence,
    lookahead_residual_scaling,
    naive_benchmarks,
    naive_layer,
    naive_weights,
    surrogate_residual_scaling,
)

RESIDUAL_TAUS = (0.00625, 0.0125, 0.025, 0.05, 0.1)
STATED_COEFFICIENT = 3.0
CORRECTED_COEFFICIENT = 2.0


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: dict[str, float]
    tolerance: str
    detail: str = ""

    def line(self) -> str:
        vals = " ".join(f"{k}={v:.3g}" for k, v in self.measured.items())
        text = f"{'PASS' if self.passed else 'FAIL'}  {self.name}  {vals}  (tol: {self.tolerance})"
        return text + (f"  {self.detail}" if self.detail else "")


@dataclass
class VerifyReport:
    level: str
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def text(self) -> str:
        lines = [f"verify level={self.level}"] + [c.line() for c in self.checks]
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def random_instance(rng: np.random.Generator, n_max: int, m_max: int, d_max: int) -> tuple[InteractionGraph, np.ndarray]:
    """Random graph in which every user has a positive and a negative item,
    plus Gaussian embeddings."""
    while True:
        n = int(rng.integers(1, n_max + 1))
        m = int(rng.integers(2, m_max + 1))
        d = int(rng.integers(1, d_max + 1))
        E = int(rng.integers(n, n * (m - 1) + 1))
        try:
            g = random_graph(n, m, E, seed=int(rng.integers(2**31)))
        except ValueError:
            continue
        return g, rng.standard_normal((n + m, d))


FastLayer = Callable[[InteractionGraph, np.ndarray, RankformerConfig], np.ndarray]


def _fast(perturb: float) -> FastLayer:
    def layer(g, Z, cfg):
        return rankformer_layer(g, torch.from_numpy(np.asarray(Z, dtype=np.float64)), cfg).numpy() + perturb

    return layer


def check_equivalence(count: int, seed: int, fast_layer: FastLayer, alpha: float = 2.0, normalize: bool = True) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(count):
        g, Z = random_instance(rng, 50, 50, 8)
        cfg = RankformerConfig(tau=(0.3, 1.0)[k % 2], alpha=alpha, normalize_embeddings=normalize)
        ref = naive_layer(g, Z, cfg)
        got = fast_layer(g, Z, cfg)
        worst = max(worst, float(np.max(np.abs(got - ref)) / max(np.max(np.abs(ref)), 1e-300)))
    name = f"fast_naive_equivalence[alpha={alpha:g},normalize={normalize}]"
    return CheckResult(name, worst <= 1e-6, {"instances": count, "max_rel_err": worst}, "1e-6")


def check_gradient_step(count: int, seed: int, fast_layer: FastLayer) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst_a = worst_fd = worst_fast = 0.0
    for k in range(count):
        g, Z = random_instance(rng, 5, 6, 3)
        tau = float(rng.uniform(0.05, 1.0))
        rep = gradient_step_equivalence(g, Z, tau, 2.0, fast_layer=fast_layer)
        worst_a = max(worst_a, rep.analytic_error)
        worst_fd = max(worst_fd, rep.fd_error)
        worst_fast = max(worst_fast, rep.fast_error)
    ok = max(worst_a, worst_fast) <= 1e-8 and worst_fd <= 1e-4
    return CheckResult(
        "gradient_step_identity",
        ok,
        {"instances": count, "analytic_err": worst_a, "fast_err": worst_fast, "fd_err": worst_fd},
        "analytic 1e-8, finite-difference 1e-4",
    )


def check_residual_scaling(coefficient: float, instances: int, seed: int) -> CheckResult:
    """Look-ahead residual halving ratios on small surrogate instances and a
    quadratic with constant Hessian."""
    rng = np.random.default_rng(seed)
    all_ratios: list[float] = []
    ok = True
    for _ in range(instances):
        while True:
            g, Z = random_instance(rng, 4, 6, 3)
            if Z.size <= 200 and Z.size >= 12:
                break
        rep = surrogate_residual_scaling(g, Z / np.sqrt(Z.shape[1]), 2.0, RESIDUAL_TAUS, coefficient)
        ok &= rep.passed(3.0, 5.0, min_pairs=2)
        all_ratios += [r for _, r in rep.ratios]
    toy = QuadraticToy.random(6, seed)
    rep = lookahead_residual_scaling(toy.loss, toy.grad, np.ones(6), RESIDUAL_TAUS, coefficient)
    ok &= rep.passed(3.0, 5.0, min_pairs=2)
    all_ratios += [r for _, r in rep.ratios]
    label = "stated" if coefficient == STATED_COEFFICIENT else "corrected"
    return CheckResult(
        f"lookahead_residual_scaling[{label},coef={coefficient:g}]",
        bool(ok),
        {"min_ratio": min(all_ratios), "max_ratio": max(all_ratios)},
        "halving ratio in [3, 5]",
        detail=f"instances={instances}+quadratic",
    )


def check_signs_and_closed_forms(count: int, seed: int) -> CheckResult:
    """Weight signs and normalizer closed forms for alpha >= 2 and unit rows.

    No positive weight may be < 0 and no negative weight > 0; for alpha > 2
    they must also be nonzero. At alpha = 2 a weight is exactly 0 when a
    similarity of -1 (or +1) meets a benchmark at the opposite extreme, which
    only 1-d embeddings reach; such boundary zeros are counted, not failed.
    Per-side absolute sums must equal ``b+ - b- + alpha`` and the fast
    normalizers the exhaustive absolute sums.
    """
    rng = np.random.default_rng(seed)
    sign_violations = 0
    boundary_zeros = 0
    closed_err = 0.0
    norm_err = 0.0
    for k in range(count):
        g, Z = random_instance(rng, 12, 15, 6)
        alpha = (2.0, 2.5, 4.0)[k % 3]
        Zn = normalize_rows(torch.from_numpy(Z))[0].numpy()
        omega = naive_weights(g, Zn, alpha)
        b_pos, b_neg = naive_benchmarks(g, Zn)
        A = g.dense.astype(bool)
        wrong = int((omega[A] < 0).sum() + (omega[~A] > 0).sum())
        zeros = int((omega[A] == 0).sum() + (omega[~A] == 0).sum())
        sign_violations += wrong + (zeros if alpha > 2 else 0)
        boundary_zeros += zeros if alpha == 2 else 0
        target = b_pos - b_neg + alpha
        pos_sum = np.where(A, np.abs(omega), 0).sum(1)
        neg_sum = np.where(~A, np.abs(omega), 0).sum(1)
        closed_err = max(closed_err, float(np.abs(pos_sum - target).max()), float(np.abs(neg_sum - target).max()))
        Zt = torch.from_numpy(Zn)
        bp, bn = compute_benchmarks(g, Zt)
        cu, ci = compute_normalizers(g, Zt, bp, bn, alpha, RankformerConfig(alpha=alpha))
        norm_err = max(
            norm_err,
            float(np.abs(cu.numpy() - np.abs(omega).sum(1)).max()),
            float(np.abs(ci.numpy() - np.abs(omega).sum(0)).max()),
        )
    ok = sign_violations == 0 and closed_err <= 1e-8 and norm_err <= 1e-8
    return CheckResult(
        "weight_signs_and_closed_form_normalizers",
        ok,
        {
            "instances": count,
            "sign_violations": sign_violations,
            "boundary_zeros": boundary_zeros,
            "closed_form_err": closed_err,
            "normalizer_err": norm_err,
        },
        "0 violations, 1e-8",
    )


def run_verify(level: str = "fast", seed: int = 0, perturb_fast: float = 0.0) -> VerifyReport:
    """``perturb_fast`` adds a constant to every fast-layer output; it exists
    to show that the equivalence checks can fail."""
    if level not in ("fast", "full"):
        raise ValueError(f"unknown verify level {level!r}")
    fast_layer = _fast(perturb_fast)
    full = level == "full"
    report = VerifyReport(level)
    report.checks.append(check_equivalence(100 if full else 30, seed, fast_layer))
    report.checks.append(check_equivalence(30 if full else 10, seed + 1, fast_layer, alpha=1.0, normalize=True))
    report.checks.append(check_equivalence(30 if full else 10, seed + 2, fast_layer, alpha=0.5, normalize=False))
    report.checks.append(check_gradient_step(50 if full else 10, seed + 3, fast_layer))
    if full:
        report.checks.append(check_residual_scaling(STATED_COEFFICIENT, 3, seed + 4))
        report.checks.append(check_residual_scaling(CORRECTED_COEFFICIENT, 3, seed + 4))
        report.checks.append(check_signs_and_closed_forms(60, seed + 5))
    return report
