"""Block-sharded retrieval database with exact Euclidean k-NN search."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .blocks import BlockLayout, flatten_block, partition_stack
from .manifest import read_manifest, write_manifest
from .tensor import Rng, load_tensor, save_tensor


class QueryMode(str, enum.Enum):
    FIRST_BLOCK = "first_block"
    FULL_LATENT = "full_latent"


@dataclass
class NeighborSet:
    k: int
    indices: np.ndarray  # (k,) database row ids, nearest first
    distances: np.ndarray  # (k,)
    per_block: list[np.ndarray]  # b matrices k × blockdim

    def block_tensor(self, layout: BlockLayout, i: int) -> np.ndarray:
        """Neighbors of block ``i`` shaped ``(k, C, H/g, W/g)``."""
        return self.per_block[i].reshape((self.k,) + layout.block_shape)


class RetrievalDB:
    """Shard ``i`` stacks the flattened block ``i`` of every database latent.

    Row ``j`` of every shard comes from the same latent, so a neighbor found
    through shard 0 (or the concatenated rows) can be read off every shard.
    """

    def __init__(self, shards: list[np.ndarray], layout: BlockLayout,
                 query_mode: QueryMode = QueryMode.FIRST_BLOCK):
        if len(shards) != layout.b:
            raise ValueError(f"expected {layout.b} shards, got {len(shards)}")
        rows = {s.shape[0] for s in shards}
        if len(rows) != 1:
            raise ValueError(f"shards have different row counts: {sorted(rows)}")
        for s in shards:
            if s.shape[1:] != (layout.block_dim,):
                raise ValueError(f"shard rows have shape {s.shape[1:]}, expected ({layout.block_dim},)")
        self.shards = [np.ascontiguousarray(s, dtype=np.float64) for s in shards]
        self.layout = layout
        self.query_mode = QueryMode(query_mode)
        self._full = None
        # probes for tests: how often the database was queried / sampled
        self.n_queries = 0
        self.n_pseudo = 0

    @property
    def n(self) -> int:
        return self.shards[0].shape[0]

    @property
    def b(self) -> int:
        return self.layout.b

    @property
    def full_rows(self) -> np.ndarray:
        if self._full is None:
            self._full = np.ascontiguousarray(np.hstack(self.shards))
        return self._full

    def search_matrix(self) -> np.ndarray:
        return self.shards[0] if self.query_mode is QueryMode.FIRST_BLOCK else self.full_rows

    def query_vector(self, z: np.ndarray) -> np.ndarray:
        """The retrieval key of a latent under this database's query mode."""
        blocks = partition_stack(self.layout, z)
        if self.query_mode is QueryMode.FIRST_BLOCK:
            return flatten_block(blocks[0])
        return blocks.reshape(-1).copy()

    def reset_probes(self) -> None:
        self.n_queries = 0
        self.n_pseudo = 0


def build_database(latents, layout: BlockLayout,
                   query_mode: QueryMode = QueryMode.FIRST_BLOCK) -> RetrievalDB:
    latents = list(latents)
    if not latents:
        raise ValueError("build_database needs at least one latent")
    z = np.stack([np.asarray(l, dtype=np.float64) for l in latents])
    blocks = partition_stack(layout, z)  # n, b, C, bh, bw
    n = z.shape[0]
    shards = [blocks[:, i].reshape(n, -1) for i in range(layout.b)]
    return RetrievalDB(shards, layout, query_mode)


def _sq_distances(rows: np.ndarray, query: np.ndarray) -> np.ndarray:
    diff = rows - query
    return np.einsum("ij,ij->i", diff, diff)


def query_knn(db: RetrievalDB, query: np.ndarray, k: int, exclude: int | None = None) -> NeighborSet:
    """Exact k nearest rows by Euclidean distance; ties go to the lower row id."""
    rows = db.search_matrix()
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    if query.shape[0] != rows.shape[1]:
        raise ValueError(
            f"query length {query.shape[0]} does not match {db.query_mode.value} key length {rows.shape[1]}"
        )
    available = db.n - (1 if exclude is not None and 0 <= exclude < db.n else 0)
    if k < 1 or k > available:
        raise ValueError(f"k={k} invalid: database offers {available} candidate rows")
    db.n_queries += 1
    d2 = _sq_distances(rows, query)
    order = np.argsort(d2, kind="stable")
    if exclude is not None:
        order = order[order != exclude]
    idx = order[:k]
    per_block = [shard[idx] for shard in db.shards]
    return NeighborSet(k=k, indices=idx, distances=np.sqrt(d2[idx]), per_block=per_block)


def pseudo_query(db: RetrievalDB, rng: Rng) -> tuple[np.ndarray, int]:
    """A uniformly drawn database row used as the query at generation time."""
    if db.n < 1:
        raise ValueError("cannot draw a pseudo-query from an empty database")
    db.n_pseudo += 1
    j = int(rng.integers(0, db.n))
    return db.search_matrix()[j].copy(), j


def save_database(db: RetrievalDB, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, shard in enumerate(db.shards):
        save_tensor(directory / f"shard_{i:03d}.rsslt", shard)
    write_manifest(directory / "manifest.txt", {
        "n": db.n, **db.layout.to_manifest(), "query_mode": db.query_mode.value,
    })


def load_database(directory) -> RetrievalDB:
    directory = Path(directory)
    man = read_manifest(directory / "manifest.txt")
    layout = BlockLayout.from_manifest(man)
    shards = [load_tensor(directory / f"shard_{i:03d}.rsslt") for i in range(layout.b)]
    db = RetrievalDB(shards, layout, QueryMode(man["query_mode"]))
    if db.n != int(man["n"]):
        raise ValueError(f"manifest says n={man['n']} but shards hold {db.n} rows")
    return db
