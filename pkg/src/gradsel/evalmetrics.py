"""Text-generation metrics, greedy decoding, and the gradient-decile pilot.

Metric implementations are exact-match and token-based; scores are pure
functions of the token lists so results are reproducible across platforms.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .corpus import Tokenizer, TokenSequence
from .gradstats import GradientRecord
from .tinylm.model import Model, forward, loss_positions_of, sequence_loss

METEOR_ALPHA = 0.9
METEOR_GAMMA = 0.5
METEOR_BETA = 3.0


@dataclass(frozen=True)
class MetricReport:
    name: str
    corpus_score: float
    per_instance: tuple[float, ...]
    config: dict


def greedy_decode(model: Model, prompt_tokens: list[int], max_new: int,
                  eos_id: int = Tokenizer.eos) -> list[int]:
    """Argmax continuation of the prompt; stops at EOS or the budget."""
    ids = list(prompt_tokens)
    out: list[int] = []
    for _ in range(max_new):
        if len(ids) >= model.cfg.max_seq_len:
            break
        seq = TokenSequence("decode", tuple(ids), ("special",) * len(ids))
        trace = forward(model, seq)
        nxt = int(np.argmax(trace.logits[-1]))  # argmax takes the lowest id on ties
        if nxt == eos_id:
            break
        out.append(nxt)
        ids.append(nxt)
    return out


def _ngram_counts(tokens: list, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _clipped_matches(cand: list, ref: list, n: int) -> tuple[int, int]:
    cc = _ngram_counts(cand, n)
    rc = _ngram_counts(ref, n)
    matches = sum(min(c, rc[g]) for g, c in cc.items())
    return matches, max(len(cand) - n + 1, 0)


def _brevity_penalty(c: int, r: int) -> float:
    if c == 0:
        return 0.0
    return 1.0 if c > r else math.exp(1.0 - r / c)


def _instance_bleu(cand: list, ref: list, max_order: int) -> float:
    # add-1 smoothing on orders above 1 keeps short-text scores informative
    if not cand:
        return 0.0
    logs = 0.0
    for n in range(1, max_order + 1):
        m, tot = _clipped_matches(cand, ref, n)
        if n == 1:
            if m == 0:
                return 0.0
            p = m / tot
        else:
            p = (m + 1.0) / (tot + 1.0)
        logs += math.log(p)
    return _brevity_penalty(len(cand), len(ref)) * math.exp(logs / max_order)


def bleu(candidates: list[list], references: list[list], max_order: int = 4) -> MetricReport:
    """Corpus BLEU (unsmoothed) plus smoothed per-instance scores."""
    if not candidates:
        raise ValueError("no candidates to score")
    if len(candidates) != len(references):
        raise ValueError("candidate/reference count mismatch")
    if any(not r for r in references):
        raise ValueError("empty reference")
    match_sum = [0] * max_order
    total_sum = [0] * max_order
    for cand, ref in zip(candidates, references):
        for n in range(1, max_order + 1):
            m, tot = _clipped_matches(cand, ref, n)
            match_sum[n - 1] += m
            total_sum[n - 1] += tot
    c = sum(len(x) for x in candidates)
    r = sum(len(x) for x in references)
    if any(m == 0 for m in match_sum):
        corpus = 0.0
    else:
        logs = sum(math.log(m / t) for m, t in zip(match_sum, total_sum))
        corpus = _brevity_penalty(c, r) * math.exp(logs / max_order)
    per = tuple(_instance_bleu(cd, rf, max_order) for cd, rf in zip(candidates, references))
    return MetricReport("bleu", corpus, per, {"max_order": max_order})


def _lcs_len(a: list, b: list) -> int:
    # classic O(nm) table, rolling rows
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate: list, reference: list) -> float:
    """LCS F-measure with equal precision/recall weighting."""
    if not reference:
        raise ValueError("empty reference")
    if not candidate:
        return 0.0
    lcs = _lcs_len(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return 2.0 * p * r / (p + r)


def _min_chunks(candidate: list, reference: list, quota: Counter,
                node_cap: int = 200_000) -> int:
    """Fewest contiguous aligned runs over alignments achieving all matches.

    Exhaustive branch-and-bound; falls back to a greedy left-to-right
    alignment if the search exceeds node_cap (never hit at sane lengths).
    """
    m = sum(quota.values())
    ref_positions: dict = {}
    for j, w in enumerate(reference):
        ref_positions.setdefault(w, []).append(j)
    remaining_after: list[Counter] = [Counter() for _ in range(len(candidate) + 1)]
    for i in range(len(candidate) - 1, -1, -1):
        remaining_after[i] = remaining_after[i + 1].copy()
        remaining_after[i][candidate[i]] += 1

    best = m + 1
    nodes = 0

    def dfs(i: int, need: Counter, used: set, last_c: int, last_r: int, chunks: int):
        nonlocal best, nodes
        nodes += 1
        if nodes > node_cap:
            return
        if chunks >= best:
            return
        left = sum(need.values())
        if left == 0:
            best = min(best, chunks)
            return
        if i >= len(candidate):
            return
        # feasibility: every still-needed token must occur often enough ahead
        for w, k in need.items():
            if k > remaining_after[i][w]:
                return
        w = candidate[i]
        if need.get(w, 0) > 0:
            for j in ref_positions.get(w, ()):
                if j in used:
                    continue
                extend = (i == last_c + 1 and j == last_r + 1)
                need[w] -= 1
                used.add(j)
                dfs(i + 1, need, used, i, j, chunks if extend else chunks + 1)
                used.discard(j)
                need[w] += 1
        # skipping is allowed when this occurrence is not forced
        if need.get(w, 0) < remaining_after[i][w]:
            dfs(i + 1, need, used, last_c, last_r, chunks)

    dfs(0, quota.copy(), set(), -2, -2, 0)
    if best <= m:
        return best
    # greedy fallback: prefer continuing the current run
    need = quota.copy()
    used: set = set()
    chunks = 0
    last_c = last_r = -2
    for i, w in enumerate(candidate):
        if need.get(w, 0) <= 0:
            continue
        cont = last_r + 1
        pick = None
        if i == last_c + 1 and cont < len(reference) and reference[cont] == w and cont not in used:
            pick = cont
        else:
            for j in ref_positions.get(w, ()):
                if j not in used:
                    pick = j
                    break
        if pick is None:
            continue
        if not (i == last_c + 1 and pick == last_r + 1):
            chunks += 1
        used.add(pick)
        need[w] -= 1
        last_c, last_r = i, pick
    return chunks


def meteor_lite(candidate: list, reference: list) -> float:
    """Exact-match METEOR: harmonic mean skewed to recall, chunk penalty."""
    if not reference:
        raise ValueError("empty reference")
    if not candidate:
        return 0.0
    cc = Counter(candidate)
    rc = Counter(reference)
    quota = Counter({w: min(c, rc[w]) for w, c in cc.items() if rc[w] > 0})
    quota = +quota
    m = sum(quota.values())
    if m == 0:
        return 0.0
    p = m / len(candidate)
    r = m / len(reference)
    f_mean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r)
    chunks = _min_chunks(candidate, reference, quota)
    penalty = METEOR_GAMMA * (chunks / m) ** METEOR_BETA
    return f_mean * (1.0 - penalty)


def meteor_report(candidates: list[list], references: list[list]) -> MetricReport:
    per = tuple(meteor_lite(c, r) for c, r in zip(candidates, references))
    corpus = float(np.mean(per)) if per else 0.0
    return MetricReport("meteor_lite", corpus, per,
                        {"alpha": METEOR_ALPHA, "gamma": METEOR_GAMMA, "beta": METEOR_BETA})


def rouge_report(candidates: list[list], references: list[list]) -> MetricReport:
    per = tuple(rouge_l(c, r) for c, r in zip(candidates, references))
    corpus = float(np.mean(per)) if per else 0.0
    return MetricReport("rouge_l", corpus, per, {})


@dataclass(frozen=True)
class DecileReport:
    """Figure-style decile table: decile 1 holds the largest gradients."""

    mean_loss: tuple[float, ...]
    token_acc: tuple[float, ...]
    mean_gradient: tuple[float, ...]
    counts: tuple[int, ...]
    loss_gradient_spearman: float = field(default=float("nan"))

    def to_csv(self) -> str:
        lines = ["decile,mean_loss,token_acc,count"]
        for i in range(len(self.counts)):
            lines.append(
                f"{i + 1},{self.mean_loss[i]:.17g},{self.token_acc[i]:.17g},{self.counts[i]}"
            )
        return "\n".join(lines) + "\n"


def decile_slices(n: int, k: int = 10) -> list[int]:
    """Near-equal slice sizes; the first n%k slices take the extra item."""
    q, r = divmod(n, k)
    return [q + 1 if i < r else q for i in range(k)]


def pilot_deciles(records: list[GradientRecord], seqs: list[TokenSequence],
                  base_model: Model) -> DecileReport:
    """Mean loss and teacher-forced token accuracy per gradient decile."""
    if len(records) < 10:
        raise ValueError("need at least 10 instances for deciles")
    by_id = {s.instance_id: s for s in seqs}
    missing = [r.instance_id for r in records if r.instance_id not in by_id]
    if missing:
        raise ValueError(f"records not covered by dataset: {missing[:3]}")
    ranked = sorted(records, key=lambda r: (-r.g_grads, r.instance_id))
    sizes = decile_slices(len(ranked))
    mean_loss = []
    token_acc = []
    mean_grad = []
    counts = []
    pos = 0
    for size in sizes:
        chunk = ranked[pos : pos + size]
        pos += size
        losses = []
        correct = 0
        total = 0
        for rec in chunk:
            seq = by_id[rec.instance_id]
            trace = forward(base_model, seq)
            positions = loss_positions_of(seq)
            losses.append(sequence_loss(base_model, seq))
            for t in positions:
                total += 1
                if int(np.argmax(trace.logits[t])) == seq.tokens[t + 1]:
                    correct += 1
        mean_loss.append(float(np.mean(losses)))
        token_acc.append(correct / total if total else 0.0)
        mean_grad.append(float(np.mean([r.g_grads for r in chunk])))
        counts.append(size)
    rho = float(spearmanr(mean_grad, mean_loss).statistic)
    return DecileReport(
        mean_loss=tuple(mean_loss),
        token_acc=tuple(token_acc),
        mean_gradient=tuple(mean_grad),
        counts=tuple(counts),
        loss_gradient_spearman=rho,
    )
