"""BPR training of base embeddings through an encoder (Rankformer or a
baseline), Adam with decoupled weight decay, early stopping on validation
NDCG@20."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
import torch
import torch.nn.functional as F

from .baselines import BaselineConfig, baseline_forward
from .evaluation import EvalConfig, evaluate_split, init_embeddings
from .graph import DatasetSplit, InteractionGraph
from .layers import RankformerConfig, forward

logger = logging.getLogger(__name__)

EncoderConfig = Union[RankformerConfig, BaselineConfig]

# fixed labels for deriving per-consumer RNG streams from the top-level seed
SEED_LABELS = {"split": 1, "init": 2, "sampling": 3}


def derive_rng(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng([seed, SEED_LABELS[label]])


def derive_seed(seed: int, label: str) -> int:
    return int(derive_rng(seed, label).integers(2**31 - 1))


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, last_good: "TrainState | None"):
        super().__init__(f"loss became non-finite at epoch {epoch}")
        self.epoch = epoch
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    weight_decay: float = 1e-4
    epochs: int = 200
    batch_size: int = 0  # 0 = every training edge once per step (full batch)
    negatives_per_positive: int = 1
    patience: int = 20
    seed: int = 0
    grad_mode: str = "through_layers"  # or "detached_weights"
    dim: int = 64
    dtype: str = "float32"
    eval_every: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.negatives_per_positive < 1:
            raise ValueError("negatives_per_positive must be >= 1")
        if self.grad_mode not in ("through_layers", "detached_weights"):
            raise ValueError(f"unknown grad_mode {self.grad_mode!r}")
        if self.epochs < 0 or self.batch_size < 0 or self.dim < 1:
            raise ValueError("epochs, batch_size must be >= 0 and dim >= 1")

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


@dataclass
class TrainState:
    params: torch.Tensor
    exp_avg: torch.Tensor
    exp_avg_sq: torch.Tensor
    step: int = 0
    epoch: int = 0
    best_val: float = -math.inf
    epochs_since_best: int = 0

    @classmethod
    def fresh(cls, params: torch.Tensor) -> "TrainState":
        return cls(params, torch.zeros_like(params), torch.zeros_like(params))

    def copy(self) -> "TrainState":
        return TrainState(
            self.params.clone(), self.exp_avg.clone(), self.exp_avg_sq.clone(),
            self.step, self.epoch, self.best_val, self.epochs_since_best,
        )


@dataclass
class BprBatch:
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.users)


def sample_bpr_batch(
    g: InteractionGraph, batch_size: int, negatives_per_positive: int, rng: np.random.Generator
) -> BprBatch:
    """Uniform positive edges (all edges in order when ``batch_size == 0``),
    each paired with ``negatives_per_positive`` uniform non-positive items
    drawn by rejection. Users who interacted with every item are skipped."""
    if g.E == 0:
        raise ValueError("empty graph")
    edges = np.arange(g.E) if batch_size == 0 else rng.integers(0, g.E, size=batch_size)
    u = np.repeat(g.edge_user[edges], negatives_per_positive)
    i = np.repeat(g.edge_item[edges], negatives_per_positive)
    full = g.d_u[u] >= g.m
    skipped = int(full.sum())
    u, i = u[~full], i[~full]
    j = rng.integers(0, g.m, size=len(u))
    bad = g.has_edges(u, j)
    while bad.any():
        j[bad] = rng.integers(0, g.m, size=int(bad.sum()))
        bad[bad] = g.has_edges(u[bad], j[bad])
    return BprBatch(u, i, j, skipped)


def bpr_loss(scores_pos: torch.Tensor, scores_neg: torch.Tensor) -> torch.Tensor:
    """Mean of ``-log sigmoid(pos - neg)``, computed as ``softplus(neg - pos)``."""
    if scores_pos.shape != scores_neg.shape:
        raise ValueError("score vectors differ in length")
    return F.softplus(scores_neg - scores_pos).mean()


def encode(g: InteractionGraph, Z0: torch.Tensor, cfg: EncoderConfig, grad_mode: str = "through_layers") -> torch.Tensor:
    if isinstance(cfg, RankformerConfig):
        return forward(g, Z0, cfg, detach_weights=grad_mode == "detached_weights")
    return baseline_forward(g, Z0, cfg)


def batch_loss(g: InteractionGraph, Z0: torch.Tensor, cfg: EncoderConfig, batch: BprBatch, grad_mode: str) -> torch.Tensor:
    Z = encode(g, Z0, cfg, grad_mode)
    u = torch.from_numpy(batch.users)
    zu = Z[u]
    zi = Z[g.n + torch.from_numpy(batch.pos)]
    zj = Z[g.n + torch.from_numpy(batch.neg)]
    return bpr_loss((zu * zi).sum(1), (zu * zj).sum(1))


def backward(
    g: InteractionGraph, Z0, cfg: EncoderConfig, batch: BprBatch, grad_mode: str = "through_layers"
) -> tuple[float, torch.Tensor]:
    """Batch BPR loss and its gradient w.r.t. the base embeddings.

    Weight decay is not included; it is applied (decoupled) by
    :func:`optimizer_step`.
    """
    Z0 = torch.as_tensor(Z0).detach().requires_grad_(True)
    loss = batch_loss(g, Z0, cfg, batch, grad_mode)
    (grad,) = torch.autograd.grad(loss, Z0)
    if not torch.isfinite(grad).all():
        row = int((~torch.isfinite(grad)).any(1).nonzero()[0, 0])
        raise FloatingPointError(f"non-finite gradient in row {row}")
    return float(loss.detach()), grad


def optimizer_step(
    state: TrainState,
    grads: torch.Tensor,
    lr: float,
    weight_decay: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> TrainState:
    """Adam with bias correction and decoupled weight decay (in place)."""
    b1, b2 = betas
    state.step += 1
    with torch.no_grad():
        state.exp_avg.mul_(b1).add_(grads, alpha=1 - b1)
        state.exp_avg_sq.mul_(b2).addcmul_(grads, grads, value=1 - b2)
        m_hat = state.exp_avg / (1 - b1**state.step)
        v_hat = state.exp_avg_sq / (1 - b2**state.step)
        state.params.mul_(1 - lr * weight_decay)
        state.params.sub_(lr * m_hat / (v_hat.sqrt() + eps))
    return state


@dataclass
class HistoryRow:
    epoch: int
    loss: float
    recall: float
    ndcg: float
    seconds: float


@dataclass
class TrainResult:
    best: TrainState
    history: list[HistoryRow] = field(default_factory=list)
    stopped_early: bool = False

    def encoded(self, g: InteractionGraph, cfg: EncoderConfig) -> torch.Tensor:
        with torch.no_grad():
            return encode(g, self.best.params, cfg)


def write_history(path: str | Path, history: list[HistoryRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "recall@20", "ndcg@20", "seconds"])
        for r in history:
            w.writerow([r.epoch, f"{r.loss:.6f}", f"{r.recall:.6f}", f"{r.ndcg:.6f}", f"{r.seconds:.3f}"])


def train(split: DatasetSplit, encoder_cfg: EncoderConfig, cfg: TrainConfig, Z0: torch.Tensor | None = None) -> TrainResult:
    """Train base embeddings; keep the state with the best validation NDCG@20.

    Stops after ``cfg.patience`` evaluations without improvement. With
    ``epochs == 0`` the untrained embeddings are evaluated and returned.
    """
    if not split.val:
        raise ValueError("split has no validation edges")
    g = split.train
    if Z0 is None:
        Z0 = init_embeddings(g.n + g.m, cfg.dim, derive_seed(cfg.seed, "init"))
    state = TrainState.fresh(Z0.to(cfg.torch_dtype).clone())
    rng = derive_rng(cfg.seed, "sampling")
    ecfg = EvalConfig(ks=(20,))
    result = TrainResult(best=state.copy())

    def validate() -> tuple[float, float]:
        with torch.no_grad():
            res = evaluate_split(split, encode(g, state.params, encoder_cfg), "val", ecfg)
        return res.recall[20], res.ndcg[20]

    if cfg.epochs == 0:
        rec, ndcg = validate()
        state.best_val = ndcg
        result.best = state.copy()
        result.history.append(HistoryRow(0, math.nan, rec, ndcg, 0.0))
        return result

    steps = 1 if cfg.batch_size == 0 else max(1, math.ceil(g.E / cfg.batch_size))
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        total = 0.0
        for _ in range(steps):
            batch = sample_bpr_batch(g, cfg.batch_size, cfg.negatives_per_positive, rng)
            loss, grad = backward(g, state.params, encoder_cfg, batch, cfg.grad_mode)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, result.best)
            optimizer_step(state, grad, cfg.lr, cfg.weight_decay)
            total += loss
        state.epoch = epoch
        if epoch % cfg.eval_every and epoch != cfg.epochs:
            continue
        rec, ndcg = validate()
        result.history.append(HistoryRow(epoch, total / steps, rec, ndcg, time.perf_counter() - t0))
        logger.info("epoch %d loss %.4f val recall@20 %.4f ndcg@20 %.4f", epoch, total / steps, rec, ndcg)
        if ndcg > state.best_val:
            state.best_val = ndcg
            state.epochs_since_best = 0
            result.best = state.copy()
        else:
            state.epochs_since_best += 1
            if state.epochs_since_best >= cfg.patience:
                result.stopped_early = True
                break
    return result
