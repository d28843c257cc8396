"""Full-ranking top-K evaluation and the untrained layer-sweep experiment."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .graph import DatasetSplit, InteractionGraph

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalConfig:
    ks: tuple[int, ...] = (20,)
    mask_train: bool = True
    mask_val_at_test: bool = True
    batch_users: int = 1024

    def __post_init__(self):
        if not self.ks or min(self.ks) < 1:
            raise ValueError("ks must be a nonempty list of positive integers")


@dataclass
class EvalResult:
    recall: dict[int, float]
    ndcg: dict[int, float]
    users_evaluated: int
    per_user_recall: dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    per_user_ndcg: dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    users: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64), repr=False)


def _to_numpy(Z) -> np.ndarray:
    if isinstance(Z, torch.Tensor):
        Z = Z.detach().cpu().numpy()
    return np.asarray(Z, dtype=np.float64)


def _top_k_rows(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores per row; ties go to the lower index."""
    # stable sort on negated scores keeps ascending index order within ties
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


def score_and_rank(Z, n: int, u: int, masked: Iterable[int] = (), k: int = 20) -> np.ndarray:
    """Top-``k`` items for user ``u`` by inner product, excluding ``masked``.

    If fewer than ``k`` items are unmasked all of them are returned.
    """
    Z = _to_numpy(Z)
    if not 0 <= u < n:
        raise IndexError(f"user {u} out of range")
    scores = Z[n:] @ Z[u]
    masked = np.fromiter(masked, dtype=np.int64)
    scores[masked] = -np.inf
    available = len(scores) - len(np.unique(masked))
    if k > available:
        logger.debug("k=%d exceeds %d unmasked items for user %d", k, available, u)
        k = available
    return _top_k_rows(scores[None, :], k)[0]


def recall_at_k(topk: Sequence[int], relevant: set[int] | Sequence[int], k: int) -> float:
    relevant = set(relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    hits = len(set(list(topk)[:k]) & relevant)
    return hits / len(relevant)


def _idcg(n_rel: int, k: int) -> float:
    return sum(1.0 / math.log2(r + 1) for r in range(1, min(k, n_rel) + 1))


def ndcg_at_k(topk: Sequence[int], relevant: set[int] | Sequence[int], k: int) -> float:
    relevant = set(relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    dcg = sum(1.0 / math.log2(r + 1) for r, item in enumerate(list(topk)[:k], start=1) if item in relevant)
    return dcg / _idcg(len(relevant), k)


def evaluate(
    g_train: InteractionGraph,
    heldout: tuple[np.ndarray, np.ndarray],
    Z,
    cfg: EvalConfig = EvalConfig(),
    extra_mask: tuple[np.ndarray, np.ndarray] | None = None,
) -> EvalResult:
    """Recall@K / NDCG@K averaged over users with at least one held-out item.

    Train positives are masked when ``cfg.mask_train``; ``extra_mask`` (the
    validation edges when scoring the test split) is masked as well.
    """
    Z = _to_numpy(Z)
    n, m = g_train.n, g_train.m
    hu, hi = (np.asarray(a, dtype=np.int64) for a in heldout)
    if hu.size == 0:
        raise ValueError("held-out edge set is empty")
    kmax = min(max(cfg.ks), m)

    order = np.argsort(hu, kind="stable")
    hu, hi = hu[order], hi[order]
    users, starts = np.unique(hu, return_index=True)
    bounds = np.append(starts, len(hu))
    relevant = {int(u): set(hi[bounds[j] : bounds[j + 1]].tolist()) for j, u in enumerate(users)}

    mask_u: list[np.ndarray] = []
    mask_i: list[np.ndarray] = []
    if cfg.mask_train:
        mask_u.append(g_train.edge_user)
        mask_i.append(g_train.edge_item)
    if extra_mask is not None:
        mask_u.append(np.asarray(extra_mask[0], dtype=np.int64))
        mask_i.append(np.asarray(extra_mask[1], dtype=np.int64))
    mu = np.concatenate(mask_u) if mask_u else np.zeros(0, dtype=np.int64)
    mi = np.concatenate(mask_i) if mask_i else np.zeros(0, dtype=np.int64)
    # held-out positives must stay rankable even if they also appear in a mask
    keep = ~np.isin(mu * m + mi, hu * m + hi)
    mu, mi = mu[keep], mi[keep]

    per_recall = {k: np.zeros(len(users)) for k in cfg.ks}
    per_ndcg = {k: np.zeros(len(users)) for k in cfg.ks}
    Zu, Zi = Z[:n], Z[n:]
    for start in range(0, len(users), cfg.batch_users):
        batch = users[start : start + cfg.batch_users]
        scores = Zu[batch] @ Zi.T
        row_of = np.full(n, -1)
        row_of[batch] = np.arange(len(batch))
        sel = row_of[mu] >= 0
        scores[row_of[mu[sel]], mi[sel]] = -np.inf
        top = _top_k_rows(scores, kmax)
        finite = np.isfinite(np.take_along_axis(scores, top, axis=1))
        for r, u in enumerate(batch):
            ranked = top[r][finite[r]]
            rel = relevant[int(u)]
            for k in cfg.ks:
                per_recall[k][start + r] = recall_at_k(ranked, rel, k)
                per_ndcg[k][start + r] = ndcg_at_k(ranked, rel, k)
    return EvalResult(
        recall={k: float(v.mean()) for k, v in per_recall.items()},
        ndcg={k: float(v.mean()) for k, v in per_ndcg.items()},
        users_evaluated=len(users),
        per_user_recall=per_recall,
        per_user_ndcg=per_ndcg,
        users=users,
    )


def evaluate_split(split: DatasetSplit, Z, which: str = "test", cfg: EvalConfig = EvalConfig()) -> EvalResult:
    """Evaluate on the ``"val"`` or ``"test"`` edges of a split."""
    if which == "val":
        return evaluate(split.train, split.index_edges(split.val), Z, cfg)
    if which == "test":
        extra = split.index_edges(split.val) if cfg.mask_val_at_test and split.val else None
        return evaluate(split.train, split.index_edges(split.test), Z, cfg, extra_mask=extra)
    raise ValueError(f"unknown split part {which!r}")


def write_metrics_csv(path: str | Path, rows: Iterable[tuple[str, EvalResult]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "K", "recall", "ndcg", "users"])
        for name, res in rows:
            for k in sorted(res.recall):
                w.writerow([name, k, f"{res.recall[k]:.6f}", f"{res.ndcg[k]:.6f}", res.users_evaluated])


def init_embeddings(n_rows: int, d: int, seed: int, dtype=torch.float64) -> torch.Tensor:
    """Standard Gaussian scaled by 1/sqrt(d)."""
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.standard_normal((n_rows, d)) / math.sqrt(d)).to(dtype)


@dataclass
class SweepRow:
    encoder: str
    layers: int
    ndcg: float
    seed: int = 0


def layer_sweep(
    split: DatasetSplit,
    max_layers: int = 4,
    seed: int = 0,
    d: int = 64,
    taus: Sequence[float] = (0.3, 0.5, 0.7, 1.0),
    alpha: float = 2.0,
    encoders: Sequence[str] = ("rankformer", "lightgcn"),
    lightgcn_combine: str = "mean",
) -> list[SweepRow]:
    """Test NDCG@20 of untrained encoders for L = 0..max_layers.

    All encoders start from the same seeded Gaussian embeddings. Rankformer is
    run once per tau in ``taus`` and labelled ``rankformer_tau<tau>``.
    """
    from .baselines import BaselineConfig, baseline_forward
    from .layers import RankformerConfig, forward

    if max_layers < 1:
        raise ValueError("max_layers must be >= 1")
    g = split.train
    Z0 = init_embeddings(g.n + g.m, d, seed)
    ecfg = EvalConfig(ks=(20,))
    rows: list[SweepRow] = []
    for enc in encoders:
        if enc == "rankformer":
            for tau in taus:
                cfg = RankformerConfig(tau=tau, alpha=alpha, layers=max_layers)
                _, snaps = forward(g, Z0, cfg, return_layers=True)
                for L, Z in enumerate(snaps):
                    rows.append(SweepRow(f"rankformer_tau{tau:g}", L, evaluate_split(split, Z, "test", ecfg).ndcg[20], seed))
        elif enc == "lightgcn":
            for L in range(max_layers + 1):
                Z = baseline_forward(g, Z0, BaselineConfig("lightgcn", L, lightgcn_combine))
                rows.append(SweepRow("lightgcn", L, evaluate_split(split, Z, "test", ecfg).ndcg[20], seed))
        else:
            raise ValueError(f"unknown encoder {enc!r}")
    return rows


def write_sweep_csv(path: str | Path, rows: Iterable[SweepRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["encoder", "L", "ndcg@20"])
        for r in rows:
            w.writerow([r.encoder, r.layers, f"{r.ndcg:.6f}"])
