"""Phase-1 ranking: cosine similarity and top-k candidate selection.

``top_k`` runs on the selected kernel path (numba or numpy);
``brute_force_rank`` is an intentionally independent exhaustive sort kept as
the oracle for the accelerated path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .geostore import Store


@dataclass
class Ranking:
    """Ordered (reference_id, score) entries for one query, best first."""

    query_id: str
    entries: list[tuple[str, float]] = field(default_factory=list)
    k: int = 0
    reranked: bool = False

    def ids(self) -> list[str]:
        return [rid for rid, _ in self.entries]

    def validate(self) -> None:
        for (a_id, a_s), (b_id, b_s) in zip(self.entries, self.entries[1:]):
            if a_s < b_s or (a_s == b_s and a_id >= b_id):
                raise ValueError(f"ranking for '{self.query_id}' violates (score desc, id asc) order")


def cosine(u: np.ndarray, v: np.ndarray, accum32: bool = False) -> float:
    """Cosine similarity of two equal-dim vectors, clipped to [-1, 1].

    Both norms use the same accumulation, so the result is exactly symmetric
    in its arguments.
    """
    u = np.asarray(u)
    v = np.asarray(v)
    if u.ndim != 1 or v.ndim != 1 or u.shape[0] != v.shape[0]:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    if not np.any(u) or not np.any(v):
        raise ValueError("cosine undefined for zero-norm vector")
    dt = np.float32 if accum32 else np.float64
    a = u.astype(dt, copy=False)
    b = v.astype(dt, copy=False)
    score = np.dot(a, b) / (np.sqrt(np.dot(a, a)) * np.sqrt(np.dot(b, b)))
    return float(np.clip(np.float64(score), -1.0, 1.0))


def _query_scores(query_emb: np.ndarray, store: Store, accum32: bool) -> np.ndarray:
    query_emb = np.asarray(query_emb)
    if store.ref_image.shape[0] == 0:
        raise ValueError("store holds no references")
    if query_emb.ndim != 1 or query_emb.shape[0] != store.manifest.image_dim:
        raise ValueError(
            f"query dim {query_emb.shape} does not match store image_dim {store.manifest.image_dim}"
        )
    if not np.any(query_emb):
        raise ValueError("cosine undefined for zero-norm query")
    scores = kernels.cosine_scores(query_emb, store.ref_image, accum32=accum32)
    return np.clip(scores, -1.0, 1.0)


def top_k(query_emb: np.ndarray, store: Store, k: int, query_id: str = "", accum32: bool = False) -> Ranking:
    """The k most cosine-similar references; ties broken by ascending id."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores = _query_scores(query_emb, store, accum32)
    idx = kernels.top_indices(scores, store.ref_tie_rank, k)
    entries = [(store.ref_ids[i], float(scores[i])) for i in idx]
    return Ranking(query_id=query_id, entries=entries, k=k)


def brute_force_rank(query_emb: np.ndarray, store: Store, query_id: str = "") -> Ranking:
    """Exhaustive exact ordering of every reference; oracle for top_k.

    Scores and ordering are computed with plain numpy (float64), independent
    of whichever kernel path is active.
    """
    query_emb = np.asarray(query_emb)
    if store.ref_image.shape[0] == 0:
        raise ValueError("store holds no references")
    if query_emb.ndim != 1 or query_emb.shape[0] != store.manifest.image_dim:
        raise ValueError(
            f"query dim {query_emb.shape} does not match store image_dim {store.manifest.image_dim}"
        )
    if not np.any(query_emb):
        raise ValueError("cosine undefined for zero-norm query")
    q = query_emb.astype(np.float64)
    refs = store.ref_image.astype(np.float64)
    scores = (refs @ q) / (np.sqrt(np.dot(q, q)) * np.sqrt(np.einsum("ij,ij->i", refs, refs)))
    scores = np.clip(scores, -1.0, 1.0)
    order = np.lexsort((store.ref_tie_rank, -scores))
    entries = [(store.ref_ids[i], float(scores[i])) for i in order]
    return Ranking(query_id=query_id, entries=entries, k=len(entries))


def rank_store_queries(store: Store, k: int, accum32: bool = False) -> list[Ranking]:
    """top_k for every query in the store, in store order."""
    out = []
    for qid in store.query_ids:
        out.append(top_k(store.query(qid).image_emb, store, k, query_id=qid, accum32=accum32))
    return out


def restrict_ranking(ranking: Ranking, pool, k: int | None = None) -> Ranking:
    """Drop entries outside ``pool`` and truncate to k; order is untouched.

    Restricting a full ranking to a candidate pool equals ranking the pool
    directly (cosine scores do not depend on the pool), which is how
    single-positive evaluation instances are scored.
    """
    pool = set(pool)
    entries = [(rid, s) for rid, s in ranking.entries if rid in pool]
    if k is not None:
        entries = entries[:k]
    return Ranking(query_id=ranking.query_id, entries=entries, k=k if k is not None else len(entries),
                   reranked=ranking.reranked)


def save_rankings(rankings: list[Ranking], path: str | Path) -> None:
    """Line-delimited JSON, one ranking per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in rankings:
            rec = {"query_id": r.query_id, "entries": [[rid, s] for rid, s in r.entries]}
            if r.reranked:
                rec["reranked"] = True
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def load_rankings(path: str | Path) -> list[Ranking]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                rec = json.loads(raw)
                entries = [(str(rid), float(s)) for rid, s in rec["entries"]]
                out.append(
                    Ranking(
                        query_id=rec["query_id"],
                        entries=entries,
                        k=len(entries),
                        reranked=bool(rec.get("reranked", False)),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}, line {ln}: malformed ranking record ({exc})") from None
    return out
