"""Exhaustive gallery search, two-branch score fusion and recall metrics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np

from .embedding import EmbeddingMatrix

Modality = Literal["satellite", "map"]
Mode = Literal["street", "bev", "fused"]


class ProtocolError(Exception):
    """An evaluation split violates the gallery/positive contract."""

    def __init__(self, message: str, ids: Sequence[str] = ()):
        self.ids = list(ids)
        if ids:
            shown = ", ".join(self.ids[:10])
            more = f" (+{len(self.ids) - 10} more)" if len(self.ids) > 10 else ""
            message = f"{message}: {shown}{more}"
        super().__init__(message)


class GalleryIndex:
    """Immutable set of unit-norm reference embeddings."""

    def __init__(self, embeddings: EmbeddingMatrix, modality: Modality = "satellite", tol: float = 1e-6):
        if len(embeddings) == 0:
            raise ValueError("gallery is empty")
        if len(set(embeddings.ids)) != len(embeddings.ids):
            raise ValueError("gallery ids must be unique")
        embeddings.check_unit_norm(tol)
        self.vectors = np.array(embeddings.vectors)
        self.vectors.setflags(write=False)
        self.ids = list(embeddings.ids)
        self.modality = modality
        # position of each row in ascending-id order, used as the tie-break key
        self._id_rank = np.empty(len(self.ids), dtype=np.int64)
        self._id_rank[np.argsort(np.array(self.ids, dtype=object), kind="stable")] = np.arange(len(self.ids))

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def scores(self, query: np.ndarray) -> np.ndarray:
        query = np.asarray(query, dtype=np.float64)
        if query.shape != (self.dim,):
            raise ValueError(f"query dimension {query.shape} does not match gallery dimension {self.dim}")
        return self.vectors @ query

    def order(self, scores: np.ndarray, rows: np.ndarray | None = None) -> np.ndarray:
        """Rows sorted by descending score, ties by ascending id."""
        if rows is None:
            rows = np.arange(len(self.ids))
        return rows[np.lexsort((self._id_rank[rows], -scores[rows]))]


@dataclass(frozen=True)
class RankedEntry:
    ref_id: str
    score: float
    s1: float | None = None
    s2: float | None = None


RankedList = list  # list[RankedEntry], best first


def search(query: np.ndarray, index: GalleryIndex, k: int) -> RankedList:
    """Exact top-k by dot product."""
    if not 1 <= k <= len(index):
        raise ValueError(f"k={k} must be within [1, {len(index)}]")
    scores = index.scores(query)
    top = index.order(scores)[:k]
    return [RankedEntry(index.ids[r], float(scores[r])) for r in top]


@dataclass(frozen=True)
class FusionConfig:
    shortlist: int = 64

    def __post_init__(self):
        if self.shortlist < 1:
            raise ValueError("shortlist size M must be >= 1")


def _check_aligned(street: GalleryIndex, bev: GalleryIndex) -> None:
    if street.ids != bev.ids:
        raise ValueError("street and BEV galleries must list the same ids in the same order")


def co_retrieve(
    q_street: np.ndarray,
    q_bev: np.ndarray,
    street_index: GalleryIndex,
    bev_index: GalleryIndex,
    cfg: FusionConfig,
    k: int,
) -> RankedList:
    """Rank the top-M street candidates by the summed street and BEV scores.

    Each branch embeds the references with its own encoder, hence two
    indexes over the same ids.
    """
    _check_aligned(street_index, bev_index)
    m = min(cfg.shortlist, len(street_index))
    if k > cfg.shortlist:
        raise ValueError(f"k={k} exceeds the shortlist size M={cfg.shortlist}")
    if not 1 <= k <= len(street_index):
        raise ValueError(f"k={k} must be within [1, {len(street_index)}]")
    s1 = street_index.scores(q_street)
    s2 = bev_index.scores(q_bev)
    candidates = street_index.order(s1)[:m]
    fused = np.zeros_like(s1)
    fused[candidates] = s1[candidates] + s2[candidates]
    top = street_index.order(fused, candidates)[:k]
    return [RankedEntry(street_index.ids[r], float(fused[r]), float(s1[r]), float(s2[r])) for r in top]


def retrieve(
    mode: Mode,
    q_street: np.ndarray | None,
    q_bev: np.ndarray | None,
    street_index: GalleryIndex | None,
    bev_index: GalleryIndex | None,
    cfg: FusionConfig,
    k: int,
) -> RankedList:
    if mode == "street":
        return search(q_street, street_index, k)
    if mode == "bev":
        return search(q_bev, bev_index, k)
    if mode == "fused":
        return co_retrieve(q_street, q_bev, street_index, bev_index, cfg, k)
    raise ValueError(f"unknown retrieval mode {mode!r}")


@dataclass(frozen=True)
class RecallReport:
    r1: float
    r5: float
    r10: float
    r1pct: float
    queries: int
    gallery: int
    k_1pct: int
    protocol: str = ""

    def as_row(self) -> list:
        return [self.protocol, f"{self.r1:.2f}", f"{self.r5:.2f}", f"{self.r10:.2f}",
                f"{self.r1pct:.2f}", self.queries, self.gallery]


def one_percent_k(gallery_size: int) -> int:
    return max(1, math.ceil(0.01 * gallery_size))


def recall_at_k(
    results: Mapping[str, Sequence[RankedEntry]],
    positives: Mapping[str, Iterable[str]],
    gallery_size: int,
    protocol: str = "",
) -> RecallReport:
    """R@1, R@5, R@10 and R@1% as percentages of queries.

    A query counts as a hit at K when any of its positives appears in its
    first K results.
    """
    k1 = one_percent_k(gallery_size)
    ks = (1, 5, 10, k1)
    if max(ks) > gallery_size:
        raise ValueError(f"K={max(ks)} exceeds gallery size {gallery_size}")
    if not results:
        raise ValueError("no queries to score")
    hits = np.zeros(len(ks))
    for qid, ranked in results.items():
        pos = set(positives.get(qid, ()))
        if not pos:
            raise ValueError(f"query {qid} has no positive reference")
        first = next((r for r, e in enumerate(ranked) if e.ref_id in pos), None)
        if first is not None:
            hits += [first < k for k in ks]
    pct = 100.0 * hits / len(results)
    return RecallReport(*map(float, pct), queries=len(results), gallery=gallery_size,
                        k_1pct=k1, protocol=protocol)


def evaluate_protocol(
    query_ids: Sequence[str],
    positives: Mapping[str, Sequence[str]],
    street_queries: EmbeddingMatrix | None,
    bev_queries: EmbeddingMatrix | None,
    street_refs: EmbeddingMatrix | None,
    bev_refs: EmbeddingMatrix | None,
    reference_ids: Sequence[str],
    modes: Sequence[Mode] = ("street", "bev", "fused"),
    cfg: FusionConfig = FusionConfig(),
    excluded_ids: Iterable[str] = (),
    modality: Modality = "satellite",
    name: str = "",
) -> dict[str, RecallReport]:
    """Score a split in each retrieval mode against its own reference gallery.

    The gallery is built only from ``reference_ids``. Raises ProtocolError
    if any reference also appears in ``excluded_ids`` (e.g. training
    references) or if a query's positive is missing from the gallery.
    """
    reference_ids = list(reference_ids)
    leaked = sorted(set(reference_ids) & set(excluded_ids))
    if leaked:
        raise ProtocolError("gallery contains training references", leaked)
    gallery = set(reference_ids)
    orphaned = [q for q in query_ids if not gallery.intersection(positives.get(q, ()))]
    if orphaned:
        raise ProtocolError("positive reference absent from gallery", orphaned)

    street_index = bev_index = None
    if street_refs is not None:
        street_index = GalleryIndex(street_refs.subset(reference_ids), modality)
    if bev_refs is not None:
        bev_index = GalleryIndex(bev_refs.subset(reference_ids), modality)
    sq = street_queries.subset(query_ids) if street_queries is not None else None
    bq = bev_queries.subset(query_ids) if bev_queries is not None else None

    n = len(reference_ids)
    depth = min(n, max(10, one_percent_k(n)))
    reports = {}
    for mode in modes:
        if mode in ("street", "fused") and street_index is None:
            raise ValueError(f"mode {mode!r} needs street-branch embeddings")
        if mode in ("bev", "fused") and bev_index is None:
            raise ValueError(f"mode {mode!r} needs BEV-branch embeddings")
        k = min(depth, cfg.shortlist) if mode == "fused" else depth
        results = {}
        for row, qid in enumerate(query_ids):
            results[qid] = retrieve(
                mode,
                sq.vectors[row] if sq is not None else None,
                bq.vectors[row] if bq is not None else None,
                street_index, bev_index, cfg, k,
            )
        label = f"{name}:{mode}" if name else mode
        reports[mode] = recall_at_k(results, positives, n, protocol=label)
    return reports


REPORT_HEADER = ["protocol", "R1", "R5", "R10", "R1pct", "queries", "gallery"]


def reports_to_csv(reports: Iterable[RecallReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_HEADER)
    for rep in reports:
        writer.writerow(rep.as_row())
    return buf.getvalue()


def reports_to_table(reports: Iterable[RecallReport]) -> str:
    rows = [REPORT_HEADER] + [[str(c) for c in rep.as_row()] for rep in reports]
    widths = [max(len(r[c]) for r in rows) for c in range(len(REPORT_HEADER))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


RANKED_HEADER = ["query_id", "rank", "ref_id", "score_fused", "score_s1", "score_s2"]


def ranked_lists_to_csv(results: Mapping[str, Sequence[RankedEntry]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RANKED_HEADER)
    for qid, ranked in results.items():
        for rank, e in enumerate(ranked, start=1):
            s1 = "" if e.s1 is None else repr(e.s1)
            s2 = "" if e.s2 is None else repr(e.s2)
            writer.writerow([qid, rank, e.ref_id, repr(e.score), s1, s2])
    return buf.getvalue()
