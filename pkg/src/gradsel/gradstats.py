"""Collapse per-token gradient bundles into per-instance scalar records.

Two scalars per instance: the mean L2 norm of the embedding-layer gradient
over content tokens, and the mean L2 norm of the logit gradient over response
targets with the uniform loss weight divided back out. Their sum is the
selection score downstream modules rank by. Records round-trip through JSONL
with enough digits to be bit-exact.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .corpus import ROLE_SPECIAL, TokenSequence
from .tinylm.training import GradientBundle

NORM_MODES = ("mean_of_norms", "norm_of_mean")


@dataclass(frozen=True)
class GradientRecord:
    instance_id: str
    g_emb: float
    g_lm: float
    g_grads: float
    n_emb_tokens: int
    n_lm_tokens: int
    model_fingerprint: str
    step_index: int


def combine(g_emb: float, g_lm: float) -> float:
    """Plain sum of the two layer magnitudes."""
    if g_emb < 0 or g_lm < 0:
        raise ValueError("gradient magnitudes must be nonnegative")
    return g_emb + g_lm


def aggregate_instance(
    bundle: GradientBundle,
    seq: TokenSequence,
    fingerprint: str,
    norm_mode: str = "mean_of_norms",
) -> GradientRecord:
    """One scalar record from one instance's token gradients.

    Embedding side averages over every non-special token (prompt and
    response); logit side averages over response-target positions only and
    divides out the 1/n loss weight so the value reflects per-token magnitude
    rather than response length. norm_of_mean averages the vectors first and
    takes one norm, kept for sensitivity analysis.
    """
    if norm_mode not in NORM_MODES:
        raise ValueError(f"unknown norm_mode {norm_mode!r}")
    if bundle.g_emb.shape[0] != len(seq):
        raise ValueError(
            f"bundle/sequence length mismatch for {bundle.instance_id}"
        )
    content = [t for t, role in enumerate(seq.roles) if role != ROLE_SPECIAL]
    if not content:
        raise ValueError(f"no content tokens in {bundle.instance_id}")
    emb_vecs = bundle.g_emb[content]
    lm_vecs = bundle.g_lm / bundle.weight
    if norm_mode == "mean_of_norms":
        g_emb = float(np.linalg.norm(emb_vecs, axis=1).mean())
        g_lm = float(np.linalg.norm(lm_vecs, axis=1).mean())
    else:
        g_emb = float(np.linalg.norm(emb_vecs.mean(axis=0)))
        g_lm = float(np.linalg.norm(lm_vecs.mean(axis=0)))
    return GradientRecord(
        instance_id=bundle.instance_id,
        g_emb=g_emb,
        g_lm=g_lm,
        g_grads=combine(g_emb, g_lm),
        n_emb_tokens=len(content),
        n_lm_tokens=len(bundle.loss_positions),
        model_fingerprint=fingerprint,
        step_index=bundle.step_index,
    )


def aggregate_all(
    bundles: list[GradientBundle],
    seqs_by_id: dict[str, TokenSequence],
    fingerprint: str,
    norm_mode: str = "mean_of_norms",
) -> list[GradientRecord]:
    """Aggregate every bundle and sort by instance_id for determinism."""
    records = [
        aggregate_instance(b, seqs_by_id[b.instance_id], fingerprint, norm_mode)
        for b in bundles
    ]
    records.sort(key=lambda r: r.instance_id)
    return records


def _fmt(x: float) -> str:
    # 17 significant digits: enough for exact float64 round trips
    return format(x, ".17g")


def write_records(records: list[GradientRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            if not (np.isfinite(r.g_emb) and np.isfinite(r.g_lm)):
                raise ValueError(f"non-finite record for {r.instance_id}")
            fh.write(
                "{"
                f'"instance_id": {json.dumps(r.instance_id)}, '
                f'"g_emb": {_fmt(r.g_emb)}, '
                f'"g_lm": {_fmt(r.g_lm)}, '
                f'"g_grads": {_fmt(r.g_grads)}, '
                f'"n_emb_tokens": {r.n_emb_tokens}, '
                f'"n_lm_tokens": {r.n_lm_tokens}, '
                f'"model_fingerprint": {json.dumps(r.model_fingerprint)}, '
                f'"step_index": {r.step_index}'
                "}\n"
            )


def read_records(path: str, expected_fingerprint: str | None = None) -> list[GradientRecord]:
    """Load records, enforcing the sum invariant; fingerprint mismatches warn.

    Records remain usable across models (that is the point of persisting
    them); the warning only flags that the expectation was not met.
    """
    records: list[GradientRecord] = []
    mismatched: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"line {lineno}: malformed record ({exc.msg})") from exc
            rec = GradientRecord(
                instance_id=str(obj["instance_id"]),
                g_emb=float(obj["g_emb"]),
                g_lm=float(obj["g_lm"]),
                g_grads=float(obj["g_grads"]),
                n_emb_tokens=int(obj["n_emb_tokens"]),
                n_lm_tokens=int(obj["n_lm_tokens"]),
                model_fingerprint=str(obj["model_fingerprint"]),
                step_index=int(obj["step_index"]),
            )
            if rec.g_emb < 0 or rec.g_lm < 0:
                raise ValueError(f"negative magnitude in record {rec.instance_id}")
            if rec.g_grads != rec.g_emb + rec.g_lm:
                raise ValueError(
                    f"record {rec.instance_id}: g_grads does not equal g_emb + g_lm"
                )
            if not rec.n_emb_tokens >= rec.n_lm_tokens >= 1:
                raise ValueError(f"record {rec.instance_id}: bad token counts")
            if expected_fingerprint is not None and rec.model_fingerprint != expected_fingerprint:
                mismatched.add(rec.model_fingerprint)
            records.append(rec)
    if mismatched:
        warnings.warn(
            "gradient records came from a different model "
            f"(expected {expected_fingerprint}, found {sorted(mismatched)})",
            stacklevel=2,
        )
    return records
