"""Query/gallery ranking and re-identification metrics (mAP, CMC, F-score).

Conventions:

* Cross-camera filter (on by default): gallery entries with the query's
  identity *and* camera are removed before ranking.
* Junk gallery entries (person id -1) keep their place in exported rankings
  but are dropped before any metric is computed, so they neither count as
  hits nor dilute precision.
* Queries without a single relevant gallery entry are skipped and counted,
  not scored as zero.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .pooling import canonicalize_signs, projection_distance, unflatten
from .numerics import svd

JUNK_ID = -1
RANKING_HEADER = ["query", "rank", "gallery", "distance", "person_id", "camera_id", "relevant"]


class EmptyGalleryError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    descriptor: np.ndarray
    person_id: int
    camera_id: int
    tag: str = ""


@dataclass(frozen=True)
class EvalProtocol:
    mode: str = "single"
    cross_camera: bool = True
    metric: str = "euclidean"
    subspace_shape: tuple[int, int] | None = None
    max_rank: int = 20
    f_cutoff: int = 10
    multi_pool: str = "mean"

    def __post_init__(self):
        if self.mode not in ("single", "multi"):
            raise ValueError(f"mode must be 'single' or 'multi', got {self.mode!r}")
        if self.metric not in ("euclidean", "projection"):
            raise ValueError(f"metric must be 'euclidean' or 'projection', got {self.metric!r}")
        if self.metric == "projection" and self.subspace_shape is None:
            raise ValueError("projection metric needs subspace_shape=(c, k)")
        if self.multi_pool not in ("mean", "max"):
            raise ValueError(f"multi_pool must be 'mean' or 'max', got {self.multi_pool!r}")
        if self.max_rank < 1 or self.f_cutoff < 1:
            raise ValueError("max_rank and f_cutoff must be >= 1")


@dataclass
class EvalReport:
    """Aggregated metrics; ``num_queries`` counts scored (non-skipped) queries."""

    map: float
    cmc: np.ndarray
    f_score: float
    per_query_ap: np.ndarray = field(repr=False)
    num_queries: int
    num_skipped: int

    def to_dict(self) -> dict:
        return {
            "map": float(self.map),
            "cmc": [float(v) for v in self.cmc],
            "f_score": float(self.f_score),
            "num_queries": int(self.num_queries),
            "num_skipped": int(self.num_skipped),
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


class RankedList(NamedTuple):
    """Effective gallery in rank order (indices refer to the input gallery)."""

    indices: np.ndarray
    distances: np.ndarray
    relevant: np.ndarray
    junk: np.ndarray

    def scored(self) -> np.ndarray:
        """Relevance flags with junk entries removed."""
        return self.relevant[~self.junk]


def samples_from_arrays(descriptors, person_ids, camera_ids, tags=None) -> list[Sample]:
    descriptors = np.asarray(descriptors, dtype=np.float64)
    tags = tags if tags is not None else [str(i) for i in range(len(descriptors))]
    return [Sample(d, int(p), int(c), str(t))
            for d, p, c, t in zip(descriptors, person_ids, camera_ids, tags)]


def _distances(q: np.ndarray, gallery: np.ndarray, protocol: EvalProtocol) -> np.ndarray:
    if protocol.metric == "euclidean":
        diff = gallery - q[None, :]
        return np.sqrt(np.sum(diff * diff, axis=1))
    c, k = protocol.subspace_shape
    Uq = unflatten(q, c, k)
    return np.array([projection_distance(Uq, unflatten(g, c, k)) for g in gallery])


def rank_gallery(query: Sample, gallery: list[Sample], protocol: EvalProtocol) -> RankedList:
    """Sort the (filtered) gallery by ascending distance to ``query``.

    Ties keep gallery order. Raises :class:`EmptyGalleryError` if the
    cross-camera filter leaves nothing to rank.
    """
    pids = np.array([g.person_id for g in gallery], dtype=np.int64)
    cams = np.array([g.camera_id for g in gallery], dtype=np.int64)
    keep = np.ones(len(gallery), dtype=bool)
    if protocol.cross_camera:
        keep &= ~((pids == query.person_id) & (cams == query.camera_id))
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        raise EmptyGalleryError(
            f"no gallery entries left for query {query.tag!r} "
            f"(id {query.person_id}, camera {query.camera_id})"
        )
    feats = np.stack([np.asarray(gallery[i].descriptor, dtype=np.float64) for i in idx])
    q = np.asarray(query.descriptor, dtype=np.float64)
    if feats.shape[1:] != q.shape:
        raise ValueError(f"descriptor shape mismatch: query {q.shape}, gallery {feats.shape[1:]}")
    dist = _distances(q, feats, protocol)
    order = np.argsort(dist, kind="stable")
    idx, dist = idx[order], dist[order]
    junk = pids[idx] == JUNK_ID
    relevant = (pids[idx] == query.person_id) & ~junk
    return RankedList(idx, dist, relevant, junk)


def average_precision(relevant, total_relevant: int | None = None) -> float:
    """Uninterpolated AP: mean of precision@t over the ranks t of the hits.

    ``total_relevant`` defaults to the number of hits in ``relevant``;
    relevant items missing from the list contribute zero.
    """
    flags = np.asarray(relevant, dtype=bool)
    R = int(flags.sum()) if total_relevant is None else int(total_relevant)
    if R < 1:
        raise ValueError("average precision is undefined without relevant items")
    hits = np.flatnonzero(flags)
    precision = np.arange(1, len(hits) + 1) / (hits + 1)
    return float(np.sum(precision) / R)


def first_hit(relevant) -> int | None:
    """0-based rank of the first relevant item, or None."""
    hits = np.flatnonzero(np.asarray(relevant, dtype=bool))
    return int(hits[0]) if hits.size else None


def cmc(ranked, max_rank: int) -> np.ndarray:
    """CMC[r-1] = fraction of lists whose first hit is at rank <= r."""
    ranked = list(ranked)
    if not ranked:
        raise ValueError("cmc needs at least one ranked list")
    curve = np.zeros(max_rank)
    for flags in ranked:
        pos = first_hit(flags)
        if pos is not None and pos < max_rank:
            curve[pos:] += 1.0
    return curve / len(ranked)


def f_score(ranked, cutoff: int = 10) -> float:
    """Mean over lists of the harmonic mean of precision@cutoff and recall@cutoff."""
    if cutoff < 1:
        raise ValueError("cutoff must be >= 1")
    scores = []
    for flags in ranked:
        flags = np.asarray(flags, dtype=bool)
        total = int(flags.sum())
        hits = int(flags[:cutoff].sum())
        p = hits / cutoff
        r = hits / total if total else 0.0
        scores.append(2 * p * r / (p + r) if p + r > 0 else 0.0)
    if not scores:
        raise ValueError("f_score needs at least one ranked list")
    return float(np.mean(scores))


def pool_queries(queries: list[Sample], protocol: EvalProtocol) -> list[Sample]:
    """Merge queries sharing (person id, camera) into one descriptor each.

    Groups appear in order of first occurrence. With the projection metric
    the mean of the bases is re-orthonormalized to its top-k left singular
    vectors.
    """
    groups: dict[tuple[int, int], list[Sample]] = {}
    for q in queries:
        groups.setdefault((q.person_id, q.camera_id), []).append(q)
    pooled = []
    for (pid, cam), members in groups.items():
        stack = np.stack([np.asarray(m.descriptor, dtype=np.float64) for m in members])
        desc = stack.max(axis=0) if protocol.multi_pool == "max" else stack.mean(axis=0)
        if protocol.metric == "projection":
            c, k = protocol.subspace_shape
            U = svd(unflatten(desc, c, k)).U[:, :k]
            desc = canonicalize_signs(U)[0].reshape(-1, order="F")
        tag = "+".join(m.tag for m in members)
        pooled.append(Sample(desc, pid, cam, tag))
    return pooled


def _effective_queries(queries, protocol):
    return pool_queries(queries, protocol) if protocol.mode == "multi" else list(queries)


def evaluate(queries: list[Sample], gallery: list[Sample], protocol: EvalProtocol = EvalProtocol(),
             threads: int = 1) -> EvalReport:
    """Rank every (pooled) query against the gallery and aggregate metrics.

    Per-query work may run on ``threads`` workers; results are combined in
    query order, so the report does not depend on scheduling.
    """
    if not queries or not gallery:
        raise ValueError("evaluate needs non-empty queries and gallery")
    effective = _effective_queries(queries, protocol)

    def score(q):
        flags = rank_gallery(q, gallery, protocol).scored()
        return flags if flags.any() else None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(score, effective))
    else:
        results = [score(q) for q in effective]

    scored = [r for r in results if r is not None]
    skipped = len(results) - len(scored)
    if not scored:
        raise ValueError(f"all {skipped} queries lack a relevant gallery entry")
    aps = np.array([average_precision(f) for f in scored])
    return EvalReport(
        map=float(np.mean(aps)),
        cmc=cmc(scored, protocol.max_rank),
        f_score=f_score(scored, protocol.f_cutoff),
        per_query_ap=aps,
        num_queries=len(scored),
        num_skipped=skipped,
    )


class RankingRow(NamedTuple):
    query: str
    rank: int
    gallery: str
    distance: float
    person_id: int
    camera_id: int
    relevant: bool


def export_ranking(queries: list[Sample], gallery: list[Sample], protocol: EvalProtocol,
                   depth: int = 10) -> list[RankingRow]:
    """Top-``depth`` gallery rows per (pooled) query, junk entries included."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    rows = []
    for q in _effective_queries(queries, protocol):
        try:
            ranked = rank_gallery(q, gallery, protocol)
        except EmptyGalleryError:
            continue
        for r, (gi, dist, rel) in enumerate(
            zip(ranked.indices[:depth], ranked.distances[:depth], ranked.relevant[:depth]), 1
        ):
            g = gallery[gi]
            rows.append(RankingRow(q.tag, r, g.tag, float(dist), g.person_id, g.camera_id, bool(rel)))
    return rows


def ranking_to_csv(rows: list[RankingRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RANKING_HEADER)
    for row in rows:
        writer.writerow([row.query, row.rank, row.gallery, repr(row.distance),
                         row.person_id, row.camera_id, "true" if row.relevant else "false"])
    return buf.getvalue()

