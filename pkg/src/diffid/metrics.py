"""Exact mean average precision and CMC for retrieval evaluation.

Per query, the gallery is ranked by descending similarity with ties broken
by ascending gallery index. Under the cross-camera protocol, gallery items
sharing both identity and camera with the query are excluded from the
ranking. Queries with no relevant gallery item left are excluded from both
metrics.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument


@dataclass(frozen=True)
class RetrievalInstance:
    """(index, identity, camera) triples for both sides plus similarities."""

    query_ids: tuple
    gallery_ids: tuple
    similarity: np.ndarray

    def __post_init__(self):
        sim = np.asarray(self.similarity, dtype=np.float64)
        object.__setattr__(self, "similarity", sim)
        object.__setattr__(self, "query_ids", tuple(tuple(q) for q in self.query_ids))
        object.__setattr__(self, "gallery_ids", tuple(tuple(g) for g in self.gallery_ids))
        if sim.shape != (len(self.query_ids), len(self.gallery_ids)):
            raise InvalidArgument(
                f"similarity shape {sim.shape} does not match "
                f"{len(self.query_ids)} queries x {len(self.gallery_ids)} gallery items")

    @classmethod
    def from_arrays(cls, query_identities, gallery_identities, similarity,
                    query_cameras=None, gallery_cameras=None) -> "RetrievalInstance":
        qc = query_cameras if query_cameras is not None else [None] * len(query_identities)
        gc = gallery_cameras if gallery_cameras is not None else [None] * len(gallery_identities)
        return cls(
            query_ids=tuple((i, pid, cam) for i, (pid, cam) in enumerate(zip(query_identities, qc))),
            gallery_ids=tuple((j, pid, cam) for j, (pid, cam) in enumerate(zip(gallery_identities, gc))),
            similarity=similarity,
        )


def _ranked_relevance(inst: RetrievalInstance, cross_camera: bool):
    """Per query: boolean relevance flags down the (tie-broken) ranking.

    Queries without any relevant gallery item are dropped, per the
    standard protocol.
    """
    flags = []
    for qi, (_, q_pid, q_cam) in enumerate(inst.query_ids):
        row = inst.similarity[qi]
        order = sorted(range(len(inst.gallery_ids)),
                       key=lambda j: (-row[j], inst.gallery_ids[j][0]))
        rel = []
        for j in order:
            _, g_pid, g_cam = inst.gallery_ids[j]
            same_id = g_pid == q_pid
            if (cross_camera and same_id and q_cam is not None
                    and g_cam is not None and g_cam == q_cam):
                continue
            rel.append(same_id)
        if any(rel):
            flags.append(np.asarray(rel, dtype=bool))
    return flags


def compute_map(inst: RetrievalInstance, cross_camera: bool = True) -> float:
    """Mean over valid queries of average precision."""
    per_query = _ranked_relevance(inst, cross_camera)
    if not per_query:
        raise InvalidArgument("no query has a relevant gallery item")
    # sequential sums, so results agree bit-for-bit with a plain-loop oracle
    aps = []
    for rel in per_query:
        hits = np.cumsum(rel)
        ranks = np.arange(1, len(rel) + 1)
        precisions = hits[rel] / ranks[rel]
        aps.append(sum(precisions.tolist()) / len(precisions))
    return sum(aps) / len(aps)


def compute_cmc(inst: RetrievalInstance, max_rank: int,
                cross_camera: bool = True) -> np.ndarray:
    """cmc[r-1] = fraction of valid queries whose first match has rank <= r."""
    if max_rank < 1:
        raise InvalidArgument("max_rank must be >= 1")
    per_query = _ranked_relevance(inst, cross_camera)
    if not per_query:
        raise InvalidArgument("no query has a relevant gallery item")
    curve = np.zeros(max_rank)
    for rel in per_query:
        first = int(np.argmax(rel))  # rel has at least one True
        if first < max_rank:
            curve[first:] += 1.0
    return curve / len(per_query)


@dataclass(frozen=True)
class RetrievalResult:
    """mAP plus the CMC curve (cmc[r-1] is the rank-r value)."""

    map_score: float
    cmc: np.ndarray

    def __post_init__(self):
        cmc = np.asarray(self.cmc, dtype=np.float64)
        object.__setattr__(self, "cmc", cmc)
        if not 0.0 <= self.map_score <= 1.0:
            raise InvalidArgument("mAP must lie in [0, 1]")
        if np.any(cmc < 0.0) or np.any(cmc > 1.0) or np.any(np.diff(cmc) < 0):
            raise InvalidArgument("CMC must be non-decreasing within [0, 1]")

    def cmc_at(self, rank: int) -> float:
        if rank < 1:
            raise InvalidArgument("rank is 1-indexed")
        return float(self.cmc[min(rank, len(self.cmc)) - 1])

    @property
    def rank1(self) -> float:
        return self.cmc_at(1)


def evaluate_embeddings(query_embs, gallery_embs, query_identities, gallery_identities,
                        query_cameras=None, gallery_cameras=None,
                        max_rank: int | None = None,
                        cross_camera: bool | None = None) -> RetrievalResult:
    """Cosine-similarity retrieval between embedding matrices.

    cross_camera defaults to on exactly when camera ids are supplied.
    """
    q = np.asarray(query_embs, dtype=np.float64)
    g = np.asarray(gallery_embs, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise InvalidArgument(f"embedding widths differ: {q.shape} vs {g.shape}")
    qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
    gn = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
    inst = RetrievalInstance.from_arrays(query_identities, gallery_identities,
                                         qn @ gn.T, query_cameras, gallery_cameras)
    if cross_camera is None:
        cross_camera = query_cameras is not None and gallery_cameras is not None
    if max_rank is None:
        max_rank = len(gallery_identities)
    return RetrievalResult(
        map_score=compute_map(inst, cross_camera=cross_camera),
        cmc=compute_cmc(inst, max_rank, cross_camera=cross_camera),
    )


def evaluate_embedding_files(query_path, gallery_path,
                             max_rank: int | None = None) -> RetrievalResult:
    """Retrieval evaluation over two embedding-injection text files.

    Files use the filter stage's record format (sample id, identity,
    vector per line). Injected records carry no cameras, so cross-camera
    exclusion is off.
    """
    from .filters import read_embedding_records

    q_records = read_embedding_records(query_path)
    g_records = read_embedding_records(gallery_path)
    if not q_records or not g_records:
        raise InvalidArgument("both record files must be non-empty")
    return evaluate_embeddings(
        np.stack([r[2] for r in q_records]), np.stack([r[2] for r in g_records]),
        [r[1] for r in q_records], [r[1] for r in g_records], max_rank=max_rank)


def format_retrieval_report(result: RetrievalResult) -> str:
    return (f"map={result.map_score:.6f}\n"
            f"rank1={result.cmc_at(1):.6f}\n"
            f"rank5={result.cmc_at(5):.6f}\n"
            f"rank10={result.cmc_at(10):.6f}\n")
