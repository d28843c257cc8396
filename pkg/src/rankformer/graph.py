"""Interaction ingestion, k-core filtering, train/val/test splitting and the
bipartite graph structure shared by every encoder."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

Pair = tuple[str, str]


class DataError(ValueError):
    """Raised for malformed input files or degenerate datasets."""


@dataclass
class RawInteractions:
    pairs: list[Pair]

    def __len__(self) -> int:
        return len(self.pairs)

    def deduplicated(self) -> "RawInteractions":
        return RawInteractions(list(dict.fromkeys(self.pairs)))


def load_interactions(path: str | Path, format: str = "tsv") -> RawInteractions:
    """Read ``user<sep>item[<sep>...]`` lines; extra columns are ignored.

    Lines starting with ``#`` and blank lines are skipped.
    """
    delimiters = {"tsv": "\t", "csv": ","}
    if format not in delimiters:
        raise DataError(f"unknown format {format!r}")
    sep = delimiters[format]
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc

    pairs: list[Pair] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split(sep)
        if len(fields) < 2 or not fields[0].strip() or not fields[1].strip():
            raise DataError(f"{path}:{lineno}: expected at least 2 {format} fields")
        pairs.append((fields[0].strip(), fields[1].strip()))
    if not pairs:
        logger.warning("%s contains no interactions", path)
    logger.info("loaded %d interactions from %s", len(pairs), path)
    return RawInteractions(pairs)


def apply_k_core(raw: RawInteractions, k: int) -> RawInteractions:
    """Largest sub-log in which every user and item has at least ``k`` distinct
    interactions, found by pruning to a fixpoint."""
    if k < 1:
        raise DataError("k must be >= 1")
    pairs = raw.deduplicated().pairs
    if not pairs:
        raise DataError("k-core eliminated all data")
    users, u_idx = np.unique([p[0] for p in pairs], return_inverse=True)
    items, i_idx = np.unique([p[1] for p in pairs], return_inverse=True)
    alive = np.ones(len(pairs), dtype=bool)
    while True:
        du = np.bincount(u_idx[alive], minlength=len(users))
        di = np.bincount(i_idx[alive], minlength=len(items))
        keep = alive & (du[u_idx] >= k) & (di[i_idx] >= k)
        if keep.sum() == alive.sum():
            break
        alive = keep
    if not alive.any():
        raise DataError("k-core eliminated all data")
    return RawInteractions([p for p, a in zip(pairs, alive) if a])


@dataclass
class InteractionGraph:
    """Immutable bipartite user-item graph.

    Edges are stored user-major (CSR over users) with a companion item-major
    permutation. Users occupy rows ``0..n-1`` of an embedding matrix and items
    rows ``n..n+m-1``.
    """

    n: int
    m: int
    edge_user: np.ndarray  # (E,) sorted by (user, item)
    edge_item: np.ndarray
    user_ptr: np.ndarray  # (n+1,)
    item_ptr: np.ndarray  # (m+1,)
    item_order: np.ndarray  # edge ids sorted by (item, user)
    user_keys: list[str] = field(default_factory=list)
    item_keys: list[str] = field(default_factory=list)

    @property
    def E(self) -> int:
        return len(self.edge_user)

    @cached_property
    def d_u(self) -> np.ndarray:
        return np.diff(self.user_ptr)

    @cached_property
    def d_i(self) -> np.ndarray:
        return np.diff(self.item_ptr)

    @cached_property
    def user_index(self) -> dict[str, int]:
        return {k: i for i, k in enumerate(self.user_keys)}

    @cached_property
    def item_index(self) -> dict[str, int]:
        return {k: i for i, k in enumerate(self.item_keys)}

    def user_items(self, u: int) -> np.ndarray:
        return self.edge_item[self.user_ptr[u] : self.user_ptr[u + 1]]

    def item_users(self, i: int) -> np.ndarray:
        ids = self.item_order[self.item_ptr[i] : self.item_ptr[i + 1]]
        return self.edge_user[ids]

    @cached_property
    def edge_codes(self) -> np.ndarray:
        """Sorted ``u * m + i`` codes for O(log E) membership tests."""
        return self.edge_user.astype(np.int64) * self.m + self.edge_item

    def has_edges(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        codes = np.asarray(users, dtype=np.int64) * self.m + np.asarray(items)
        pos = np.searchsorted(self.edge_codes, codes)
        pos = np.minimum(pos, max(self.E - 1, 0))
        return self.edge_codes[pos] == codes

    @cached_property
    def dense(self) -> np.ndarray:
        """0/1 adjacency of shape (n, m); test-scale only."""
        a = np.zeros((self.n, self.m))
        a[self.edge_user, self.edge_item] = 1.0
        return a

    def to_pairs(self) -> list[Pair]:
        return [(self.user_keys[u], self.item_keys[i]) for u, i in zip(self.edge_user, self.edge_item)]


def graph_from_indices(n: int, m: int, users: Sequence[int], items: Sequence[int]) -> InteractionGraph:
    """Build a graph directly from integer edges (duplicates dropped)."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if users.size and (users.max() >= n or items.max() >= m or users.min() < 0 or items.min() < 0):
        raise DataError("edge index out of range")
    codes = np.unique(users * m + items)
    eu, ei = codes // m, codes % m
    user_ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(eu, minlength=n), out=user_ptr[1:])
    item_ptr = np.zeros(m + 1, dtype=np.int64)
    np.cumsum(np.bincount(ei, minlength=m), out=item_ptr[1:])
    item_order = np.lexsort((eu, ei))
    return InteractionGraph(
        n=n,
        m=m,
        edge_user=eu,
        edge_item=ei,
        user_ptr=user_ptr,
        item_ptr=item_ptr,
        item_order=item_order,
        user_keys=[str(u) for u in range(n)],
        item_keys=[str(i) for i in range(m)],
    )


def build_graph(
    edges: Iterable[Pair],
    user_keys: Sequence[str] | None = None,
    item_keys: Sequence[str] | None = None,
) -> InteractionGraph:
    """Index key pairs into an :class:`InteractionGraph`.

    ``user_keys``/``item_keys`` fix the node universe (e.g. every user that
    survived k-core, even if all its edges went to the test split); otherwise
    the keys seen in ``edges`` are used, in sorted order.
    """
    edges = list(edges)
    if not edges:
        raise DataError("no trainable graph: empty edge set")
    if user_keys is None:
        user_keys = sorted({u for u, _ in edges})
    if item_keys is None:
        item_keys = sorted({i for _, i in edges})
    uidx = {k: j for j, k in enumerate(user_keys)}
    iidx = {k: j for j, k in enumerate(item_keys)}
    try:
        us = [uidx[u] for u, _ in edges]
        its = [iidx[i] for _, i in edges]
    except KeyError as exc:
        raise DataError(f"edge references unknown key {exc}") from exc
    g = graph_from_indices(len(user_keys), len(item_keys), us, its)
    g.user_keys = list(user_keys)
    g.item_keys = list(item_keys)
    return g


@dataclass
class DatasetSplit:
    train: InteractionGraph
    val: list[Pair]
    test: list[Pair]
    seed: int
    mode: str = "global"

    def index_edges(self, pairs: Sequence[Pair]) -> tuple[np.ndarray, np.ndarray]:
        u = np.array([self.train.user_index[a] for a, _ in pairs], dtype=np.int64)
        i = np.array([self.train.item_index[b] for _, b in pairs], dtype=np.int64)
        return u, i

    @property
    def train_pairs(self) -> list[Pair]:
        return self.train.to_pairs()


def _ratio_counts(total: int, ratios: Sequence[float]) -> tuple[int, int]:
    s = float(sum(ratios))
    return int(np.floor(total * ratios[0] / s)), int(np.floor(total * ratios[1] / s))


def split_dataset(
    raw: RawInteractions,
    ratios: Sequence[float] = (7, 1, 2),
    seed: int = 0,
    mode: str = "global",
) -> DatasetSplit:
    """Random edge split; train/val get the floor of their share, test the rest.

    ``mode="per_user"`` applies the same rule to each user's edges separately.
    """
    pairs = raw.deduplicated().pairs
    if len(pairs) < 10:
        raise DataError("need at least 10 edges to split")
    if len(ratios) != 3 or min(ratios) < 0 or sum(ratios) <= 0:
        raise DataError(f"bad ratios {ratios}")
    rng = np.random.default_rng(seed)
    if mode == "global":
        perm = rng.permutation(len(pairs))
        n_tr, n_va = _ratio_counts(len(pairs), ratios)
        train = [pairs[j] for j in perm[:n_tr]]
        val = [pairs[j] for j in perm[n_tr : n_tr + n_va]]
        test = [pairs[j] for j in perm[n_tr + n_va :]]
    elif mode == "per_user":
        by_user: dict[str, list[Pair]] = {}
        for p in pairs:
            by_user.setdefault(p[0], []).append(p)
        train, val, test = [], [], []
        for user in sorted(by_user):
            ps = by_user[user]
            perm = rng.permutation(len(ps))
            n_tr, n_va = _ratio_counts(len(ps), ratios)
            train += [ps[j] for j in perm[:n_tr]]
            val += [ps[j] for j in perm[n_tr : n_tr + n_va]]
            test += [ps[j] for j in perm[n_tr + n_va :]]
    else:
        raise DataError(f"unknown split mode {mode!r}")

    user_keys = sorted({u for u, _ in pairs})
    item_keys = sorted({i for _, i in pairs})
    g = build_graph(train, user_keys, item_keys)
    return DatasetSplit(train=g, val=val, test=test, seed=seed, mode=mode)


def _edges_text(pairs: Sequence[Pair]) -> str:
    return "".join(f"{u}\t{i}\n" for u, i in pairs)


def save_split(split: DatasetSplit, out_dir: str | Path, **extra) -> dict:
    """Write ``train.tsv``, ``val.tsv``, ``test.tsv`` and ``split.json``.

    The manifest records seed, mode, node/edge counts and the SHA-256 of each
    edge file so reruns can be compared byte-for-byte.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest: dict = {
        "seed": split.seed,
        "mode": split.mode,
        "n_users": split.train.n,
        "n_items": split.train.m,
        **extra,
    }
    for name, pairs in (("train", split.train_pairs), ("val", split.val), ("test", split.test)):
        text = _edges_text(pairs)
        (out / f"{name}.tsv").write_text(text, encoding="utf-8")
        manifest[f"{name}_edges"] = len(pairs)
        manifest[f"{name}_sha256"] = hashlib.sha256(text.encode()).hexdigest()
    (out / "split.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_split(split_dir: str | Path) -> DatasetSplit:
    d = Path(split_dir)
    if not (d / "split.json").exists():
        raise DataError(f"no prepared split in {d}")
    manifest = json.loads((d / "split.json").read_text())
    parts = {}
    for name in ("train", "val", "test"):
        path = d / f"{name}.tsv"
        parts[name] = load_interactions(path, "tsv").pairs if path.stat().st_size else []
    everything = parts["train"] + parts["val"] + parts["test"]
    user_keys = sorted({u for u, _ in everything})
    item_keys = sorted({i for _, i in everything})
    g = build_graph(parts["train"], user_keys, item_keys)
    return DatasetSplit(g, parts["val"], parts["test"], seed=manifest["seed"], mode=manifest.get("mode", "global"))


def two_clique_interactions(
    n_users: int = 200, n_items: int = 200, density: float = 1.0, seed: int = 0
) -> RawInteractions:
    """Synthetic separable log: two user groups, each interacting only with
    its own half of the items (each in-group pair kept with prob. ``density``)."""
    rng = np.random.default_rng(seed)
    hu, hi = n_users // 2, n_items // 2
    pairs = []
    for u in range(n_users):
        lo, hi_ = (0, hi) if u < hu else (hi, n_items)
        for i in range(lo, hi_):
            if rng.random() < density:
                pairs.append((f"u{u}", f"i{i}"))
    return RawInteractions(pairs)


def random_graph(n: int, m: int, E: int, seed: int = 0) -> InteractionGraph:
    """Random bipartite graph with exactly ``E`` distinct edges, every user
    having at least one positive and one negative item."""
    if E > n * (m - 1) or E < n:
        raise ValueError("cannot place E edges")
    rng = np.random.default_rng(seed)
    base = np.arange(n) * m + rng.integers(0, m, size=n)
    extra = np.setdiff1d(np.unique(rng.integers(0, n * m, size=2 * E)), base)
    while len(extra) < E - n:
        extra = np.union1d(extra, np.setdiff1d(rng.integers(0, n * m, size=E), base))
    codes = np.concatenate([base, rng.permutation(extra)[: E - n]])
    g = graph_from_indices(n, m, codes // m, codes % m)
    if (g.d_u >= m).any():
        raise ValueError("user without negatives")
    return g
