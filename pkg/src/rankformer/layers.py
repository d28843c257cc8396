"""Rankformer encoder.

Each layer moves every user (item) embedding towards its positive items
(users) and away from its negative ones, with weights derived from the
gradient of a quadratic pairwise-ranking objective::

    z_u' = (1 - tau) z_u + tau / C_u * (sum_{i in N+(u)} Wp_ui z_i + sum_{i in N-(u)} Wn_ui z_i)
    Wp_ui = (z_u.z_i - b-_u + alpha) / d_u
    Wn_ui = (z_u.z_i - b+_u - alpha) / (m - d_u)

where ``b+_u``/``b-_u`` are the user's mean similarity to its positive /
negative items and ``C`` is the sum of absolute weights. Negative sets are
complements of the (sparse) positive sets, so every sum over ``N-`` is
rewritten as "sum over all minus sum over positives" and the dense
``n x m`` weight matrix is never formed. One layer costs
O((n+m) d^2 + E d).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace

import numpy as np
import torch

from .graph import InteractionGraph

logger = logging.getLogger(__name__)

# Above this many user-item pairs the alpha<2 fallback stops computing the
# negative-side normalizer exactly.
EXACT_NORMALIZER_MAX_PAIRS = 25_000_000


class NonFiniteError(FloatingPointError):
    def __init__(self, layer: int, row: int, what: str = "embedding"):
        super().__init__(f"non-finite {what} at layer {layer}, row {row}")
        self.layer = layer
        self.row = row


@dataclass(frozen=True)
class RankformerConfig:
    tau: float = 0.5
    alpha: float = 2.0
    layers: int = 2
    lambda_reg: float = 1.0
    warmup_first_layer: bool = True
    normalize_embeddings: bool = True
    epsilon_div: float = 1e-12
    # C == 1 everywhere; turns one layer into a plain gradient step on the
    # quadratic surrogate (verification only).
    unit_normalizer: bool = False

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0, 1], got {self.tau}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.layers < 0:
            raise ValueError(f"layers must be >= 0, got {self.layers}")
        if self.epsilon_div <= 0:
            raise ValueError("epsilon_div must be > 0")

    @property
    def signs_guaranteed(self) -> bool:
        """Positive weights > 0 and negative weights < 0 for unit-norm rows."""
        return self.alpha >= 2.0 and self.normalize_embeddings


@dataclass
class LayerWorkspace:
    """Per-layer aggregates. ``W`` is the matrix attention weights are computed
    from and ``V`` the matrix being aggregated; they coincide unless weights
    are detached from the autograd graph."""

    b_pos: torch.Tensor  # (n,)
    b_neg: torch.Tensor  # (n,)
    C_user: torch.Tensor  # (n,)
    C_item: torch.Tensor  # (m,)
    sum_item_emb: torch.Tensor  # (d,)  sum_i V_i
    item_moment: torch.Tensor  # (d,d) sum_i W_i V_i^T
    user_moment_scaled: torch.Tensor  # (d,d) sum_u W_u V_u^T / (m - d_u)
    user_offset_scaled: torch.Tensor  # (d,)  sum_u (b+_u + alpha) V_u / (m - d_u)
    edge_sim: torch.Tensor  # (E,) W_u . W_i on positive pairs
    edge_pos_weight: torch.Tensor  # (E,) positive attention weight per edge
    edge_neg_form: torch.Tensor  # (E,) the negative-weight formula evaluated on positive pairs
    alpha: float


def graph_tensors(g: InteractionGraph) -> dict[str, torch.Tensor]:
    cache = g.__dict__.get("_torch_tensors")
    if cache is None:
        eu = torch.from_numpy(g.edge_user).long()
        ei = torch.from_numpy(g.edge_item).long()
        order = torch.from_numpy(g.item_order).long()
        cache = {
            "eu": eu,
            "ei": ei,
            "du": torch.from_numpy(g.d_u.astype(np.float64)),
            "di": torch.from_numpy(g.d_i.astype(np.float64)),
            "user_ptr": torch.from_numpy(g.user_ptr).long(),
            "item_order": order,
            "ui_index": torch.stack([eu, ei]),
            "iu_index": torch.stack([ei[order], eu[order]]),
        }
        g.__dict__["_torch_tensors"] = cache
    return cache


# Edge-level work goes through sparse kernels: gathering E x d rows
# (``Z[edge_index]``) allocates large temporaries and scales worse than
# linearly in E on CPU.


def edge_dot(g: InteractionGraph, A: torch.Tensor, B: torch.Tensor) -> torch.Tensor:
    """``A[u] . B[i]`` for every edge (u, i), in edge order."""
    t = graph_tensors(g)
    if g.E == 0:
        return A.new_zeros(0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        pattern = torch.sparse_csr_tensor(
            t["user_ptr"], t["ei"], A.new_zeros(g.E), (g.n, g.m), check_invariants=False
        )
        return torch.sparse.sampled_addmm(pattern, A, B.T).values()


def user_aggregate(g: InteractionGraph, values: torch.Tensor, Vi: torch.Tensor) -> torch.Tensor:
    """``out[u] = sum over edges (u, i) of values_e * Vi[i]``."""
    t = graph_tensors(g)
    A = torch.sparse_coo_tensor(t["ui_index"], values, (g.n, g.m), is_coalesced=True, check_invariants=False)
    return torch.sparse.mm(A, Vi)


def item_aggregate(g: InteractionGraph, values: torch.Tensor, Vu: torch.Tensor) -> torch.Tensor:
    """``out[i] = sum over edges (u, i) of values_e * Vu[u]``."""
    t = graph_tensors(g)
    A = torch.sparse_coo_tensor(
        t["iu_index"], values[t["item_order"]], (g.m, g.n), is_coalesced=True, check_invariants=False
    )
    return torch.sparse.mm(A, Vu)


def _as_tensor(Z) -> torch.Tensor:
    return Z if isinstance(Z, torch.Tensor) else torch.as_tensor(np.asarray(Z))


def normalize_rows(Z, epsilon_div: float = 1e-12) -> tuple[torch.Tensor, torch.Tensor]:
    """Scale every row to unit L2 norm.

    Returns ``(Z_normalized, degenerate)`` where ``degenerate`` marks rows with
    norm below ``epsilon_div``; those are returned unchanged.
    """
    Z = _as_tensor(Z)
    norms = Z.norm(dim=1, keepdim=True)
    degenerate = (norms < epsilon_div).squeeze(1)
    scale = torch.where(norms < epsilon_div, torch.ones_like(norms), norms)
    return Z / scale, degenerate


def attention_weight_pos(sim: float, b_neg: float, alpha: float, d_u: int) -> float:
    """Weight of positive pair (u, i) given ``sim = z_u . z_i``."""
    if d_u <= 0:
        raise ZeroDivisionError("user has no positive items")
    return (sim - b_neg + alpha) / d_u


def attention_weight_neg(sim: float, b_pos: float, alpha: float, d_u: int, m: int) -> float:
    """Weight of negative pair (u, i) given ``sim = z_u . z_i``."""
    if d_u >= m:
        raise ZeroDivisionError("user has no negative items")
    return (sim - b_pos - alpha) / (m - d_u)


def _degree_factors(g: InteractionGraph, dtype):
    t = graph_tensors(g)
    du = t["du"].to(dtype)
    inv_pos = torch.where(du > 0, 1.0 / du.clamp(min=1), torch.zeros_like(du))
    n_neg = g.m - du
    inv_neg = torch.where(n_neg > 0, 1.0 / n_neg.clamp(min=1), torch.zeros_like(du))
    return t["eu"], t["ei"], inv_pos, inv_neg


def _user_scatter(n: int, eu: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    out = values.new_zeros((n,) + values.shape[1:])
    return out.index_add(0, eu, values)


def compute_benchmarks(g: InteractionGraph, Z) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean similarity of each user to its positive (``b_pos``) and negative
    (``b_neg``) items. Users without positives / negatives get 0."""
    Z = _as_tensor(Z)
    eu, ei, inv_pos, inv_neg = _degree_factors(g, Z.dtype)
    Zu, Zi = Z[: g.n], Z[g.n :]
    pos_sum = user_aggregate(g, Z.new_ones(g.E), Zi)
    b_pos = inv_pos * (Zu * pos_sum).sum(1)
    b_neg = inv_neg * (Zu * (Zi.sum(0) - pos_sum)).sum(1)
    return b_pos, b_neg


def _negative_abs_sums_exact(g, W, b_pos, alpha, inv_neg, chunk=2048):
    """sum_{i in N-(u)} |Wn_ui| and sum_{u in N-(i)} |Wn_ui| by dense chunks."""
    Wu, Wi = W[: g.n], W[g.n :]
    A = torch.from_numpy(g.dense).to(W.dtype) if g.n * g.m <= 4_000_000 else None
    cu = W.new_zeros(g.n)
    ci = W.new_zeros(g.m)
    for start in range(0, g.n, chunk):
        sl = slice(start, min(start + chunk, g.n))
        S = Wu[sl] @ Wi.T
        if A is not None:
            neg_mask = 1.0 - A[sl]
        else:
            neg_mask = torch.ones_like(S)
            rows = np.arange(sl.start, sl.stop)
            for r, u in enumerate(rows):
                neg_mask[r, torch.from_numpy(g.user_items(u))] = 0.0
        w = (S - (b_pos[sl] + alpha)[:, None]).abs() * inv_neg[sl, None] * neg_mask
        cu[sl] = w.sum(1)
        ci += w.sum(0)
    return cu, ci


def build_workspace(g: InteractionGraph, W, cfg: RankformerConfig, V=None) -> LayerWorkspace:
    """Compute benchmarks, normalizers and the global sums one layer needs.

    ``W`` supplies attention weights, ``V`` (default ``W``) is aggregated.
    """
    W = _as_tensor(W)
    V = W if V is None else _as_tensor(V)
    n, alpha = g.n, cfg.alpha
    eu, ei, inv_pos, inv_neg = _degree_factors(g, W.dtype)
    Wu, Wi = W[:n], W[n:]
    Vu, Vi = V[:n], V[n:]

    b_pos, b_neg = compute_benchmarks(g, W)
    sim = edge_dot(g, Wu, Wi)
    w_pos = (sim - b_neg[eu] + alpha) * inv_pos[eu]
    w_neg_on_pos = (sim - b_pos[eu] - alpha) * inv_neg[eu]

    C_user, C_item = compute_normalizers(
        g, W, b_pos, b_neg, alpha, cfg, _edge_terms=(sim, w_pos, w_neg_on_pos)
    )
    return LayerWorkspace(
        b_pos=b_pos,
        b_neg=b_neg,
        C_user=C_user,
        C_item=C_item,
        sum_item_emb=Vi.sum(0),
        item_moment=Wi.T @ Vi,
        user_moment_scaled=(Wu * inv_neg[:, None]).T @ Vu,
        user_offset_scaled=((inv_neg * (b_pos + alpha))[:, None] * Vu).sum(0),
        edge_sim=sim,
        edge_pos_weight=w_pos,
        edge_neg_form=w_neg_on_pos,
        alpha=alpha,
    )


def compute_normalizers(
    g: InteractionGraph,
    W,
    b_pos: torch.Tensor,
    b_neg: torch.Tensor,
    alpha: float,
    cfg: RankformerConfig | None = None,
    *,
    _edge_terms=None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Sum of absolute attention weights per user (``C_user``) and item
    (``C_item``), clamped below by ``epsilon_div``.

    With ``alpha >= 2`` and unit rows the weight signs are fixed, so the
    absolute values drop out and every sum has a closed form in terms of the
    benchmarks and global sums. Otherwise the positive side is summed exactly
    over edges and the negative side exactly over dense chunks (or, beyond
    ``EXACT_NORMALIZER_MAX_PAIRS``, via the absolute value of its signed closed
    form, which is a lower bound).
    """
    cfg = cfg or RankformerConfig(alpha=alpha)
    W = _as_tensor(W)
    n, m = g.n, g.m
    eu, ei, inv_pos, inv_neg = _degree_factors(g, W.dtype)
    Wu, Wi = W[:n], W[n:]
    if cfg.unit_normalizer:
        return W.new_ones(n), W.new_ones(m)
    if _edge_terms is None:
        sim = edge_dot(g, Wu, Wi)
        w_pos = (sim - b_neg[eu] + alpha) * inv_pos[eu]
        w_neg_on_pos = (sim - b_pos[eu] - alpha) * inv_neg[eu]
    else:
        sim, w_pos, w_neg_on_pos = _edge_terms

    has_pos = (inv_pos > 0).to(W.dtype)
    has_neg = (inv_neg > 0).to(W.dtype)
    # signed sums of negative weights
    neg_user = has_neg * (b_neg - b_pos - alpha)
    neg_item = (
        Wi @ (Wu * inv_neg[:, None]).sum(0)
        - (inv_neg * (b_pos + alpha)).sum()
        - _user_scatter(m, ei, w_neg_on_pos)
    )

    if alpha >= 2.0 and cfg.normalize_embeddings:
        C_user = has_pos * (b_pos - b_neg + alpha) - neg_user
        C_item = _user_scatter(m, ei, w_pos) - neg_item
    else:
        pos_user = _user_scatter(n, eu, w_pos.abs())
        pos_item = _user_scatter(m, ei, w_pos.abs())
        if n * m <= EXACT_NORMALIZER_MAX_PAIRS:
            nu, ni = _negative_abs_sums_exact(g, W, b_pos, alpha, inv_neg)
        else:
            logger.warning("alpha < 2 or unnormalized rows at %dx%d: negative normalizer is a lower bound", n, m)
            nu, ni = neg_user.abs(), neg_item.abs()
        C_user, C_item = pos_user + nu, pos_item + ni
    eps = cfg.epsilon_div
    return C_user.clamp(min=eps), C_item.clamp(min=eps)


def aggregate(g: InteractionGraph, W, V, ws: LayerWorkspace) -> tuple[torch.Tensor, torch.Tensor]:
    """Unnormalized positive + negative aggregation for users and items."""
    n = g.n
    _, _, _, inv_neg = _degree_factors(g, V.dtype)
    Wu, Wi = W[:n], W[n:]
    Vu, Vi = V[:n], V[n:]
    # negative side for user u: sum over all items of the negative formula,
    # minus the same formula summed over u's positive items
    neg_all_u = inv_neg[:, None] * (Wu @ ws.item_moment) - (inv_neg * (ws.b_pos + ws.alpha))[:, None] * ws.sum_item_emb
    edge_w = ws.edge_pos_weight - ws.edge_neg_form
    agg_u = user_aggregate(g, edge_w, Vi) + neg_all_u
    neg_all_i = Wi @ ws.user_moment_scaled - ws.user_offset_scaled
    agg_i = item_aggregate(g, edge_w, Vu) + neg_all_i
    return agg_u, agg_i


def _normalized(agg: torch.Tensor, C: torch.Tensor, eps: float) -> torch.Tensor:
    # C at the clamp means every weight of the row is (numerically) zero:
    # the update is 0/0 and the row gets no attention term. Without this the
    # cancellation residue of the closed forms (~1e-16) would be divided by eps.
    return torch.where((C <= eps)[:, None], torch.zeros_like(agg), agg / C[:, None])


def _check_finite(Z: torch.Tensor, layer: int) -> None:
    bad = ~torch.isfinite(Z)
    if bad.any():
        row = int(bad.any(1).nonzero()[0, 0])
        raise NonFiniteError(layer, row)


def rankformer_layer(
    g: InteractionGraph,
    Z,
    cfg: RankformerConfig,
    workspace: LayerWorkspace | None = None,
    *,
    detach_weights: bool = False,
    layer_index: int = 0,
) -> torch.Tensor:
    """One full Rankformer layer (fast path).

    When ``cfg.normalize_embeddings`` is set, the unit-normalized rows are
    used for both the weights and the aggregated terms; the residual
    ``(1 - tau*lambda) z`` keeps the input row, so ``tau = 0`` is an exact
    fixed point.
    With ``detach_weights`` the attention weights, benchmarks and normalizers
    are treated as constants by autograd.
    """
    Z = _as_tensor(Z)
    V = normalize_rows(Z, cfg.epsilon_div)[0] if cfg.normalize_embeddings else Z
    W = V.detach() if detach_weights else V
    ws = workspace if workspace is not None else build_workspace(g, W, cfg, V=V)
    agg_u, agg_i = aggregate(g, W, V, ws)
    keep = 1.0 - cfg.tau * cfg.lambda_reg
    out = torch.cat(
        [
            keep * Z[: g.n] + cfg.tau * _normalized(agg_u, ws.C_user, cfg.epsilon_div),
            keep * Z[g.n :] + cfg.tau * _normalized(agg_i, ws.C_item, cfg.epsilon_div),
        ]
    )
    _check_finite(out, layer_index)
    return out


def warmup_layer(g: InteractionGraph, Z, tau: float) -> torch.Tensor:
    """Uniform positive-only aggregation: ``z' = (1-tau) z + tau * mean(neighbors)``.

    Nodes without neighbors are left unchanged.
    """
    Z = _as_tensor(Z)
    t = graph_tensors(g)
    du, di = t["du"].to(Z.dtype), t["di"].to(Z.dtype)
    Zu, Zi = Z[: g.n], Z[g.n :]
    ones = Z.new_ones(g.E)
    mean_u = user_aggregate(g, ones, Zi) / du.clamp(min=1)[:, None]
    mean_i = item_aggregate(g, ones, Zu) / di.clamp(min=1)[:, None]
    new_u = torch.where((du > 0)[:, None], (1 - tau) * Zu + tau * mean_u, Zu)
    new_i = torch.where((di > 0)[:, None], (1 - tau) * Zi + tau * mean_i, Zi)
    return torch.cat([new_u, new_i])


def forward(
    g: InteractionGraph,
    Z0,
    cfg: RankformerConfig,
    *,
    return_layers: bool = False,
    detach_weights: bool = False,
):
    """Stack ``cfg.layers`` layers (the first a warm-up layer if configured).

    Returns the final embeddings, or ``(final, [Z0, Z1, ...])`` with
    ``return_layers``. Scores are ``z_u . z_i`` on the final embeddings.
    """
    Z = _as_tensor(Z0)
    snapshots = [Z]
    for layer in range(cfg.layers):
        if layer == 0 and cfg.warmup_first_layer:
            Z = warmup_layer(g, Z, cfg.tau)
        else:
            Z = rankformer_layer(g, Z, cfg, detach_weights=detach_weights, layer_index=layer + 1)
        snapshots.append(Z)
    return (Z, snapshots) if return_layers else Z


def gradient_step_config(cfg: RankformerConfig) -> RankformerConfig:
    """Config under which one layer is exactly a surrogate gradient step."""
    return replace(cfg, unit_normalizer=True, normalize_embeddings=False, warmup_first_layer=False, lambda_reg=1.0)
