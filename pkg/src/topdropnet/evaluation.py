"""Retrieval evaluation: distances, CMC/mAP, k-reciprocal re-ranking.

The protocol is the standard cross-camera one: for each query, gallery
entries sharing both its person id and camera id are junk and removed
before scoring; queries left without any correct match are skipped.
Average precision is the mean of precision measured at each correct
match's rank; CMC at rank k is the fraction of valid queries whose first
correct match lands in the top k. Distance ties break by gallery index.
"""

import csv
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EmbeddingSet:
    features: np.ndarray  # (n, d)
    person_ids: np.ndarray  # (n,)
    camera_ids: np.ndarray  # (n,)

    def __post_init__(self):
        n = self.features.shape[0]
        if self.features.ndim != 2 or self.features.shape[1] < 1:
            raise ValueError(f"features must be (n, d), got {self.features.shape}")
        if self.person_ids.shape != (n,) or self.camera_ids.shape != (n,):
            raise ValueError("metadata length mismatch")


@dataclass
class EvalResult:
    mAP: float
    cmc: np.ndarray  # ranks 1..R
    per_query_ap: np.ndarray  # NaN for skipped queries
    num_valid_queries: int


@dataclass(frozen=True)
class RerankParams:
    k1: int = 20
    k2: int = 6
    lam: float = 0.3

    def __post_init__(self):
        if self.k2 > self.k1:
            raise ValueError(f"k2 ({self.k2}) must be <= k1 ({self.k1})")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")
        if self.k1 < 1 or self.k2 < 1:
            raise ValueError("k1 and k2 must be >= 1")


def pairwise_euclidean(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Exact Euclidean distances, computed from explicit differences
    (not the quadratic expansion) for accuracy; rows are chunked to bound
    memory."""
    q = np.asarray(q, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError(f"dimension mismatch: {q.shape} vs {g.shape}")
    out = np.empty((q.shape[0], g.shape[0]))
    chunk = max(1, int(4e7) // max(1, g.shape[0] * g.shape[1]))
    for i in range(0, q.shape[0], chunk):
        diff = q[i : i + chunk, None, :] - g[None, :, :]
        out[i : i + chunk] = np.sqrt((diff**2).sum(axis=2))
    return out


def evaluate(
    dist: np.ndarray,
    query_ids,
    query_cams,
    gallery_ids,
    gallery_cams,
    max_rank: int = 50,
) -> EvalResult:
    """Score a query-gallery distance matrix under the junk-removal rule."""
    query_ids = np.asarray(query_ids)
    query_cams = np.asarray(query_cams)
    gallery_ids = np.asarray(gallery_ids)
    gallery_cams = np.asarray(gallery_cams)
    n_q, n_g = dist.shape
    if query_ids.shape != (n_q,) or gallery_ids.shape != (n_g,):
        raise ValueError("distance matrix does not match metadata")
    max_rank = min(max_rank, n_g)

    cmc_sum = np.zeros(max_rank)
    per_query_ap = np.full(n_q, np.nan)
    num_valid = 0
    for i in range(n_q):
        order = np.argsort(dist[i], kind="stable")  # ties -> lower gallery index
        junk = (gallery_ids[order] == query_ids[i]) & (gallery_cams[order] == query_cams[i])
        matches = gallery_ids[order][~junk] == query_ids[i]
        positives = np.flatnonzero(matches)
        if positives.size == 0:
            continue
        num_valid += 1
        per_query_ap[i] = np.mean((np.arange(positives.size) + 1.0) / (positives + 1.0))
        first = positives[0]
        if first < max_rank:
            cmc_sum[first:] += 1.0
    if num_valid == 0:
        raise ValueError("no query has a valid cross-camera match")
    return EvalResult(
        mAP=float(np.nanmean(per_query_ap)),
        cmc=cmc_sum / num_valid,
        per_query_ap=per_query_ap,
        num_valid_queries=num_valid,
    )


# ---------------------------------------------------------------------------
# k-reciprocal re-ranking
# ---------------------------------------------------------------------------


def _k_neighbors(order: np.ndarray, i: int, k: int) -> np.ndarray:
    return order[i, : k + 1]  # the point itself is its own nearest neighbor


def _k_reciprocal(order: np.ndarray, i: int, k: int) -> np.ndarray:
    forward = _k_neighbors(order, i, k)
    keep = [j for j in forward if i in order[j, : k + 1]]
    return np.asarray(keep, dtype=np.int64)


def rerank(q_feats: np.ndarray, g_feats: np.ndarray, params: RerankParams = RerankParams()) -> np.ndarray:
    """Refine query-gallery distances with k-reciprocal encoding.

    Over the union of query and gallery points: build k-reciprocal
    neighbor sets at k1, expand each with the half-k1 reciprocal sets of
    its members whenever the overlap is at least 2/3 of the candidate
    set, encode each point as exp(-d) softmax-normalized over its
    expanded set, average that encoding over the k2 nearest neighbors,
    and measure Jaccard distance 1 - sum(min) / sum(max) between query
    and gallery encodings. The result blends with the original distance:
    (1 - lambda) * jaccard + lambda * original.
    """
    q_feats = np.asarray(q_feats, dtype=np.float64)
    g_feats = np.asarray(g_feats, dtype=np.float64)
    n_q, n_g = q_feats.shape[0], g_feats.shape[0]
    total = n_q + n_g
    if params.k1 >= total:
        raise ValueError(f"k1 ({params.k1}) must be < number of points ({total})")

    feats = np.vstack([q_feats, g_feats])
    original = pairwise_euclidean(feats, feats)
    order = np.argsort(original, axis=1, kind="stable")

    half_k = int(np.floor(params.k1 / 2.0 + 0.5))
    reciprocal = [_k_reciprocal(order, i, params.k1) for i in range(total)]
    half_reciprocal = [_k_reciprocal(order, i, half_k) for i in range(total)]

    encoding = np.zeros((total, total))
    for i in range(total):
        expanded = set(reciprocal[i].tolist())
        for candidate in reciprocal[i]:
            candidate_set = half_reciprocal[candidate]
            overlap = np.intersect1d(candidate_set, reciprocal[i], assume_unique=True).size
            if overlap >= (2.0 / 3.0) * candidate_set.size:
                expanded.update(candidate_set.tolist())
        idx = np.fromiter(sorted(expanded), dtype=np.int64)
        weights = np.exp(-(original[i, idx] - original[i, idx].min()))
        encoding[i, idx] = weights / weights.sum()

    if params.k2 > 1:
        encoding = np.stack([encoding[order[i, : params.k2]].mean(axis=0) for i in range(total)])

    v_query = encoding[:n_q]
    v_gallery = encoding[n_q:]
    jaccard = np.empty((n_q, n_g))
    for i in range(n_q):
        minimum = np.minimum(v_query[i][None, :], v_gallery).sum(axis=1)
        maximum = np.maximum(v_query[i][None, :], v_gallery).sum(axis=1)
        jaccard[i] = 1.0 - minimum / maximum

    return (1.0 - params.lam) * jaccard + params.lam * original[:n_q, n_q:]


# ---------------------------------------------------------------------------
# Whole-run evaluation and file formats
# ---------------------------------------------------------------------------


def embed_split(model, dataset, split: str) -> EmbeddingSet:
    """Eval-mode embeddings for one split of a loaded dataset."""
    from . import network  # local import to keep this module numpy-only

    idxs = dataset.indices(split)
    if idxs.size == 0:
        raise ValueError(f"dataset has no {split!r} records")
    model.eval()
    feats = []
    for start in range(0, idxs.size, 64):
        batch = idxs[start : start + 64]
        feats.append(model.inference_embed(network.normalize_images(dataset.images[batch])))
    records = [dataset.records[i] for i in idxs]
    return EmbeddingSet(
        np.vstack(feats),
        np.array([r.person_id for r in records]),
        np.array([r.camera_id for r in records]),
    )


def evaluate_run(query: EmbeddingSet, gallery: EmbeddingSet, with_rerank: bool = False,
                 params: RerankParams = RerankParams(), max_rank: int = 50):
    """Raw and (optionally) re-ranked results from one embedding pass."""
    dist = pairwise_euclidean(query.features, gallery.features)
    raw = evaluate(dist, query.person_ids, query.camera_ids, gallery.person_ids, gallery.camera_ids, max_rank)
    reranked = None
    if with_rerank:
        dist_rr = rerank(query.features, gallery.features, params)
        reranked = evaluate(
            dist_rr, query.person_ids, query.camera_ids, gallery.person_ids, gallery.camera_ids, max_rank
        )
    return raw, reranked


def save_embeddings(path, embeddings: EmbeddingSet) -> None:
    d = embeddings.features.shape[1]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["person_id", "camera_id"] + [f"f{i}" for i in range(d)])
        for pid, cam, row in zip(embeddings.person_ids, embeddings.camera_ids, embeddings.features):
            writer.writerow([int(pid), int(cam)] + [repr(float(v)) for v in row])


def load_embeddings(path) -> EmbeddingSet:
    with open(path, "r", newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        d = len(header) - 2
        pids, cams, rows = [], [], []
        for row in reader:
            pids.append(int(row[0]))
            cams.append(int(row[1]))
            rows.append([float(v) for v in row[2 : 2 + d]])
    return EmbeddingSet(np.array(rows, dtype=np.float64), np.array(pids), np.array(cams))


def save_results(path, result: EvalResult) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "value"])
        writer.writerow(["mAP", repr(result.mAP)])
        for rank in (1, 5, 10):
            if rank <= result.cmc.size:
                writer.writerow([f"rank-{rank}", repr(float(result.cmc[rank - 1]))])
        writer.writerow(["num_valid_queries", result.num_valid_queries])
        for k, value in enumerate(result.cmc, start=1):
            writer.writerow([f"cmc_{k}", repr(float(value))])
