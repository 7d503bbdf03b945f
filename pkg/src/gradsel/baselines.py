"""Comparison selectors: random, BM25, DSIR, RDS, PPL, and LESS-style.

Each baseline returns the same SelectionResult shape as the density selector
so downstream training and evaluation treat all methods uniformly. The
similarity baselines (BM25, DSIR, RDS, LESS) rank candidates against a small
held-out query set; PPL mirrors the density criterion with perplexity in
place of gradient magnitude.
"""

from __future__ import annotations

import base64
import json
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .corpus import TokenSequence
from .rng import ROLE_GUMBEL, ROLE_PROJECT, ROLE_SELECT, substream
from .selector import (
    SelectionResult,
    kde_scores,
    select_top_density,
    silverman_bandwidth,
    subset_size,
)
from .tinylm.model import Model, forward, loss_and_grads, loss_positions_of

BM25_K1 = 1.2
BM25_B = 0.75
DSIR_BUCKETS = 4096


@dataclass(frozen=True, eq=False)
class FeatureVector:
    instance_id: str
    values: np.ndarray
    kind: str  # "representation" or "gradient"

    def __post_init__(self):
        if self.kind not in ("representation", "gradient"):
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"non-finite features for {self.instance_id}")


def _result(strategy, percent, ids, order, scores, seed=None, bandwidth=None):
    size = subset_size(len(ids), percent)
    chosen = order[:size]
    return SelectionResult(
        strategy=strategy,
        fraction_percent=percent,
        selected_ids=tuple(ids[i] for i in sorted(chosen)),
        ordered_ids=tuple(ids[i] for i in chosen),
        f_values={ids[i]: float(scores[i]) for i in range(len(ids))},
        bandwidth=bandwidth,
        seed=seed,
    )


def _rank_desc(scores) -> list[int]:
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


def select_random(ids: list[str], percent: float, seed: int) -> SelectionResult:
    """Uniform sample without replacement, deterministic per seed."""
    if not ids:
        raise ValueError("no candidates")
    rng = substream(seed, ROLE_SELECT)
    size = subset_size(len(ids), percent)
    picked = rng.sample_without_replacement(len(ids), size)
    scores = [0.0] * len(ids)
    for i in picked:
        scores[i] = 1.0
    return _result("random", percent, ids, picked + sorted(set(range(len(ids))) - set(picked)),
                   scores, seed=seed)


def bm25_scores(candidates: list[list[str]], queries: list[list[str]],
                aggregate: str = "mean") -> np.ndarray:
    """Mean (or max) BM25 of each candidate document against the query set.

    IDF uses the candidate corpus only; query terms count with multiplicity.
    """
    if not candidates or not queries:
        raise ValueError("empty corpus")
    if any(not q for q in queries):
        raise ValueError("empty query terms")
    if aggregate not in ("mean", "max"):
        raise ValueError(f"unknown aggregate {aggregate!r}")
    M = len(candidates)
    df: Counter[str] = Counter()
    for doc in candidates:
        df.update(set(doc))
    avgdl = sum(len(d) for d in candidates) / M
    tfs = [Counter(doc) for doc in candidates]

    def idf(term: str) -> float:
        d = df.get(term, 0)
        return math.log(1.0 + (M - d + 0.5) / (d + 0.5))

    out = np.zeros(M)
    for i, doc in enumerate(candidates):
        if not doc:
            continue
        norm = BM25_K1 * (1.0 - BM25_B + BM25_B * len(doc) / avgdl)
        per_query = []
        for q in queries:
            s = 0.0
            for term in q:
                tf = tfs[i].get(term, 0)
                if tf:
                    s += idf(term) * tf * (BM25_K1 + 1.0) / (tf + norm)
            per_query.append(s)
        out[i] = max(per_query) if aggregate == "max" else sum(per_query) / len(per_query)
    return out


def bm25_select(ids: list[str], candidates: list[list[str]],
                queries: list[list[str]], percent: float,
                aggregate: str = "mean") -> SelectionResult:
    scores = bm25_scores(candidates, queries, aggregate=aggregate)
    return _result("bm25", percent, ids, _rank_desc(scores), scores)


def _fnv1a(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def ngram_features(tokens: list[str], orders: tuple[int, ...] = (1, 2)) -> list[str]:
    feats = []
    for n in orders:
        for i in range(len(tokens) - n + 1):
            feats.append("\x1f".join(tokens[i : i + n]))
    return feats


def hash_bucket(feature: str, n_buckets: int) -> int:
    return _fnv1a(feature.encode("utf-8")) % n_buckets


def _bucket_counts(docs: list[list[str]], n_buckets: int,
                   orders: tuple[int, ...]) -> np.ndarray:
    counts = np.zeros(n_buckets)
    for doc in docs:
        for f in ngram_features(doc, orders):
            counts[hash_bucket(f, n_buckets)] += 1
    return counts


def dsir_log_weights(candidates: list[list[str]], target: list[list[str]],
                     n_buckets: int = DSIR_BUCKETS,
                     orders: tuple[int, ...] = (1, 2),
                     smooth_target: bool = True) -> np.ndarray:
    """Per-candidate hashed n-gram importance log-weights ln p/q.

    p is the (optionally add-1 smoothed) target bucket distribution, q the raw
    candidate distribution; raw q is safe because every feature of a candidate
    occurs in the candidate corpus by construction.
    """
    if not candidates or not target:
        raise ValueError("empty corpus")
    tc = _bucket_counts(target, n_buckets, orders)
    cc = _bucket_counts(candidates, n_buckets, orders)
    if smooth_target:
        p = (tc + 1.0) / (tc.sum() + n_buckets)
    else:
        p = tc / tc.sum()
    q = cc / cc.sum()
    out = np.zeros(len(candidates))
    for i, doc in enumerate(candidates):
        s = 0.0
        for f in ngram_features(doc, orders):
            b = hash_bucket(f, n_buckets)
            s += math.log(p[b]) - math.log(q[b])
        out[i] = s
    return out


def dsir_select(ids: list[str], candidates: list[list[str]],
                target: list[list[str]], percent: float, seed: int,
                n_buckets: int = DSIR_BUCKETS) -> SelectionResult:
    """Importance resampling: Gumbel-top-k over the log-weights."""
    logw = dsir_log_weights(candidates, target, n_buckets=n_buckets)
    rng = substream(seed, ROLE_GUMBEL)
    keys = logw + np.array([rng.gumbel() for _ in range(len(candidates))])
    return _result("dsir", percent, ids, _rank_desc(keys), logw, seed=seed)


def representation_features(model: Model, seqs: list[TokenSequence]) -> list[FeatureVector]:
    """Final-layer hidden state at each sequence's last position."""
    out = []
    for seq in seqs:
        trace = forward(model, seq)
        out.append(FeatureVector(seq.instance_id, trace.hf[-1].copy(), "representation"))
    return out


def gradient_features(model: Model, seqs: list[TokenSequence]) -> list[FeatureVector]:
    """Concatenated mean embedding-gradient (d) and mean logit-gradient (V).

    The logit part divides out the uniform loss weight so feature direction
    does not depend on response length.
    """
    out = []
    for seq in seqs:
        trace = forward(model, seq)
        res = loss_and_grads(model, seq, trace, want_param_grads=False)
        content = [t for t, r in enumerate(seq.roles) if r != "special"]
        emb_part = res.g_emb[content].mean(axis=0)
        lm_rows = res.g_lm[res.loss_positions] / res.weight
        lm_part = lm_rows.mean(axis=0)
        out.append(FeatureVector(seq.instance_id,
                                 np.concatenate([emb_part, lm_part]), "gradient"))
    return out


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(u @ v / (nu * nv))


def rds_select(candidate_feats: list[FeatureVector],
               query_feats: list[FeatureVector], percent: float) -> SelectionResult:
    """Mean cosine to the query representations; zero-norm candidates last."""
    if not candidate_feats or not query_feats:
        raise ValueError("empty feature set")
    dim = candidate_feats[0].values.shape[0]
    for f in candidate_feats + query_feats:
        if f.values.shape != (dim,):
            raise ValueError(f"feature length mismatch for {f.instance_id}")
    usable = [q for q in query_feats if np.linalg.norm(q.values) > 0]
    if not usable:
        raise ValueError("all query features have zero norm")
    ids = [f.instance_id for f in candidate_feats]
    scores = np.empty(len(candidate_feats))
    for i, f in enumerate(candidate_feats):
        if np.linalg.norm(f.values) == 0:
            scores[i] = -1.0
        else:
            scores[i] = float(np.mean([_cosine(f.values, q.values) for q in usable]))
    return _result("rds", percent, ids, _rank_desc(scores), scores)


def sign_projection(dim_in: int, dim_out: int, seed: int) -> np.ndarray:
    """Random {-1,+1}/sqrt(dim_out) matrix from the seeded stream."""
    rng = substream(seed, ROLE_PROJECT)
    signs = np.array([1.0 if rng.random() < 0.5 else -1.0
                      for _ in range(dim_in * dim_out)])
    return signs.reshape(dim_in, dim_out) / math.sqrt(dim_out)


def less_select(candidate_grads: list[FeatureVector],
                query_grads: list[FeatureVector], percent: float,
                projection_dim: int | None, seed: int) -> SelectionResult:
    """Max cosine to query gradient features, in sign-projected space."""
    if not candidate_grads or not query_grads:
        raise ValueError("empty feature set")
    dim = candidate_grads[0].values.shape[0]
    for f in candidate_grads + query_grads:
        if f.values.shape != (dim,):
            raise ValueError(f"feature length mismatch for {f.instance_id}")
    if projection_dim is not None and projection_dim > dim:
        raise ValueError("projection_dim exceeds feature dimension")
    if projection_dim is None or projection_dim == dim:
        proj = None
    else:
        proj = sign_projection(dim, projection_dim, seed)
    cmat = np.stack([f.values for f in candidate_grads])
    qmat = np.stack([f.values for f in query_grads])
    if proj is not None:
        cmat = cmat @ proj
        qmat = qmat @ proj
    ids = [f.instance_id for f in candidate_grads]
    scores = np.empty(len(ids))
    for i in range(len(ids)):
        scores[i] = max(_cosine(cmat[i], qmat[j]) for j in range(qmat.shape[0]))
    return _result("less", percent, ids, _rank_desc(scores), scores, seed=seed)


def ppl_select(ids: list[str], perplexities: list[float], percent: float) -> SelectionResult:
    """Density criterion over perplexities instead of gradient magnitudes."""
    ppl = np.asarray(perplexities, dtype=float)
    if ppl.size == 0:
        raise ValueError("no perplexities")
    if np.any(ppl <= 0):
        raise ValueError("perplexities must be positive")
    h = silverman_bandwidth(ppl)
    scores = kde_scores(ppl, h, ids=list(ids))
    res = select_top_density(scores, percent, strategy="ppl", bandwidth=h)
    return res


def sequence_perplexities(model: Model, seqs: list[TokenSequence]) -> list[float]:
    from .tinylm.model import perplexity

    return [perplexity(model, s) for s in seqs]


def write_features(feats: list[FeatureVector], path: str,
                   encoding: str = "base64") -> None:
    if encoding not in ("base64", "plain"):
        raise ValueError(f"unknown encoding {encoding!r}")
    with open(path, "w", encoding="utf-8") as fh:
        for f in feats:
            obj = {"instance_id": f.instance_id, "kind": f.kind, "encoding": encoding}
            if encoding == "base64":
                obj["values"] = base64.b64encode(
                    np.ascontiguousarray(f.values, dtype="<f8").tobytes()
                ).decode("ascii")
            else:
                obj["values"] = [float(v) for v in f.values]
            fh.write(json.dumps(obj) + "\n")


def read_features(path: str) -> list[FeatureVector]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            if obj["encoding"] == "base64":
                vals = np.frombuffer(base64.b64decode(obj["values"]), dtype="<f8")
                vals = vals.astype(np.float64)
            else:
                vals = np.asarray(obj["values"], dtype=np.float64)
            out.append(FeatureVector(obj["instance_id"], vals, obj["kind"]))
    return out
