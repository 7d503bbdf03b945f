"""Miniature decoder-only transformer with exact hand-derived backprop.

Everything is float64 numpy. The model is small enough that clarity and
auditability beat speed: forward caches every intermediate the backward pass
needs, and the backward pass mirrors the forward line by line. The payoff is
exact per-token gradients w.r.t. the embedding vectors and the logits, which
downstream code aggregates into per-instance scores.

Architecture: token + learned positional embeddings, pre-layer-norm blocks
(LN -> causal multi-head attention -> residual; LN -> GELU MLP -> residual),
final layer norm, untied linear LM head.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import erf

from ..corpus import TokenSequence
from ..rng import ROLE_INIT, substream

LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_layers: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_seq_len: int
    init_seed: int
    tie_lm_head: bool = False
    # Which space recorded logit-gradients live in. "logits" is the standard
    # cross-entropy form p - y; "probs" differentiates w.r.t. the post-softmax
    # distribution instead (-w/p at the target, 0 elsewhere). Parameter
    # gradients are unaffected.
    lm_grad_space: str = "logits"

    def validate(self) -> None:
        if min(self.d_model, self.n_layers, self.n_heads, self.d_ff,
               self.vocab_size, self.max_seq_len) < 1:
            raise ValueError("all model dimensions must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.lm_grad_space not in ("logits", "probs"):
            raise ValueError(f"unknown lm_grad_space {self.lm_grad_space!r}")


class Model:
    """Parameter container: an ordered name -> float64 array dict."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Declared tensor order; init, checkpoints, and Adam all follow it."""
    d, ff, V, S = cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.max_seq_len
    shapes: dict[str, tuple[int, ...]] = {
        "emb": (V, d),
        "pos": (S, d),
    }
    for i in range(cfg.n_layers):
        p = f"l{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        shapes[p + "wq"] = (d, d)
        shapes[p + "bq"] = (d,)
        shapes[p + "wk"] = (d, d)
        shapes[p + "bk"] = (d,)
        shapes[p + "wv"] = (d, d)
        shapes[p + "bv"] = (d,)
        shapes[p + "wo"] = (d, d)
        shapes[p + "bo"] = (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "w1"] = (d, ff)
        shapes[p + "b1"] = (ff,)
        shapes[p + "w2"] = (ff, d)
        shapes[p + "b2"] = (d,)
    shapes["lnf.g"] = (d,)
    shapes["lnf.b"] = (d,)
    if not cfg.tie_lm_head:
        shapes["lm_head"] = (d, V)
    return shapes


def init_model(cfg: ModelConfig) -> Model:
    """Scaled normal init, deterministic under cfg.init_seed.

    Weight matrices get std 0.02; residual-output projections (wo, w2) are
    shrunk by 1/sqrt(2 * n_layers) so residual variance stays bounded with
    depth. Biases start at zero, layer-norm gains at one.
    """
    cfg.validate()
    rng = substream(cfg.init_seed, ROLE_INIT)
    residual_scale = 1.0 / math.sqrt(2.0 * cfg.n_layers)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("g",):
            params[name] = np.ones(shape)
        elif leaf in ("b",) or leaf.startswith("b"):
            params[name] = np.zeros(shape)
        else:
            std = 0.02
            if leaf in ("wo", "w2"):
                std *= residual_scale
            flat = np.array([rng.normal() for _ in range(int(np.prod(shape)))])
            params[name] = (flat * std).reshape(shape)
    return Model(cfg, params)


def _layernorm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * g + b, xhat, inv


def _layernorm_backward(dy, xhat, inv, g):
    # dL/dx for y = g*xhat + b with xhat = (x-mu)/sigma
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    return inv * (dxhat - m1 - xhat * m2), dg, db


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class LayerTrace:
    h_in: np.ndarray
    a: np.ndarray           # ln1 output
    a_xhat: np.ndarray
    a_inv: np.ndarray
    q: np.ndarray            # (H, T, dh)
    k: np.ndarray
    v: np.ndarray
    att: np.ndarray          # (H, T, T)
    ctx: np.ndarray          # (T, d), heads re-merged
    h_mid: np.ndarray        # after attention residual
    bmlp: np.ndarray         # ln2 output
    b_xhat: np.ndarray
    b_inv: np.ndarray
    f1: np.ndarray           # pre-GELU
    gact: np.ndarray         # post-GELU


@dataclass
class ForwardTrace:
    e: np.ndarray            # (T, d) embedding-layer output actually used
    layers: list[LayerTrace]
    hf: np.ndarray           # final hidden states, pre-LN nomenclature below
    hf_xhat: np.ndarray
    hf_inv: np.ndarray
    h_last: np.ndarray       # input to the final layer norm
    logits: np.ndarray       # (T, V)
    probs: np.ndarray        # (T, V)


def lm_head_matrix(model: Model) -> np.ndarray:
    if model.cfg.tie_lm_head:
        return model.params["emb"].T
    return model.params["lm_head"]


def forward(model: Model, seq: TokenSequence,
            e_override: np.ndarray | None = None) -> ForwardTrace:
    """Run the model over one sequence, caching activations for backprop.

    e_override substitutes the embedding-layer output (token + positional
    rows); the finite-difference gradient checks perturb it directly.
    """
    cfg = model.cfg
    tokens = np.asarray(seq.tokens, dtype=np.int64)
    T = tokens.shape[0]
    if T > cfg.max_seq_len:
        raise ValueError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError("token id out of range")
    P = model.params
    H = cfg.n_heads
    dh = cfg.d_model // H
    scale = 1.0 / math.sqrt(dh)

    if e_override is not None:
        e = np.array(e_override, dtype=np.float64)
    else:
        e = P["emb"][tokens] + P["pos"][:T]
    h = e
    layers: list[LayerTrace] = []
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    for i in range(cfg.n_layers):
        p = f"l{i}."
        a, a_xhat, a_inv = _layernorm(h, P[p + "ln1.g"], P[p + "ln1.b"])
        q = (a @ P[p + "wq"] + P[p + "bq"]).reshape(T, H, dh).transpose(1, 0, 2)
        k = (a @ P[p + "wk"] + P[p + "bk"]).reshape(T, H, dh).transpose(1, 0, 2)
        v = (a @ P[p + "wv"] + P[p + "bv"]).reshape(T, H, dh).transpose(1, 0, 2)
        scores = np.matmul(q, k.transpose(0, 2, 1)) * scale
        scores = np.where(mask, -np.inf, scores)
        att = _softmax_rows(scores)
        ctx = np.matmul(att, v).transpose(1, 0, 2).reshape(T, cfg.d_model)
        h_mid = h + (ctx @ P[p + "wo"] + P[p + "bo"])
        b, b_xhat, b_inv = _layernorm(h_mid, P[p + "ln2.g"], P[p + "ln2.b"])
        f1 = b @ P[p + "w1"] + P[p + "b1"]
        gact = _gelu(f1)
        h_out = h_mid + (gact @ P[p + "w2"] + P[p + "b2"])
        layers.append(LayerTrace(h, a, a_xhat, a_inv, q, k, v, att, ctx,
                                 h_mid, b, b_xhat, b_inv, f1, gact))
        h = h_out
    hf, hf_xhat, hf_inv = _layernorm(h, P["lnf.g"], P["lnf.b"])
    logits = hf @ lm_head_matrix(model)
    probs = _softmax_rows(logits)
    return ForwardTrace(e, layers, hf, hf_xhat, hf_inv, h, logits, probs)


@dataclass
class BackwardResult:
    loss: float
    g_emb: np.ndarray                  # (T, d): dLoss/de[t] for every position
    g_lm: np.ndarray                   # (T, V): zero rows off loss positions
    loss_positions: list[int]
    weight: float                      # uniform per-position loss weight
    param_grads: dict[str, np.ndarray] = field(default_factory=dict)


def loss_positions_of(seq: TokenSequence) -> list[int]:
    """Positions t whose next token is a response token (the SFT loss mask)."""
    return [t for t in range(len(seq) - 1) if seq.roles[t + 1] == "response"]


def loss_and_grads(model: Model, seq: TokenSequence, trace: ForwardTrace,
                   want_param_grads: bool = True) -> BackwardResult:
    """Mean response-token cross-entropy and its exact gradients.

    The backward pass differentiates w.r.t. pre-softmax logits (form p - y,
    scaled by the uniform position weight). When cfg.lm_grad_space == "probs"
    the *recorded* g_lm instead holds d loss / d probs, which is -w/p at the
    target coordinate and zero elsewhere; everything else is unchanged.
    """
    cfg = model.cfg
    tokens = np.asarray(seq.tokens, dtype=np.int64)
    T = tokens.shape[0]
    positions = loss_positions_of(seq)
    if not positions:
        raise ValueError(f"empty response: {seq.instance_id}")
    w = 1.0 / len(positions)
    targets = tokens[[t + 1 for t in positions]]

    logp = np.zeros(len(positions))
    dlogits = np.zeros_like(trace.logits)
    for row, (t, y) in enumerate(zip(positions, targets)):
        p = trace.probs[t]
        logp[row] = math.log(p[y])
        dlogits[t] = w * p
        dlogits[t, y] -= w
    loss = float(-w * logp.sum())

    if cfg.lm_grad_space == "probs":
        g_lm = np.zeros_like(trace.logits)
        for t, y in zip(positions, targets):
            g_lm[t, y] = -w / trace.probs[t, y]
    else:
        g_lm = dlogits.copy()

    P = model.params
    H = cfg.n_heads
    hd = cfg.d_model // H
    scale = 1.0 / math.sqrt(hd)
    grads: dict[str, np.ndarray] = {}

    def acc(name: str, g: np.ndarray) -> None:
        if name in grads:
            grads[name] += g
        else:
            grads[name] = g

    Wlm = lm_head_matrix(model)
    dhf = dlogits @ Wlm.T
    if want_param_grads:
        if cfg.tie_lm_head:
            acc("emb", (trace.hf.T @ dlogits).T)
        else:
            acc("lm_head", trace.hf.T @ dlogits)
    dh, dg, db = _layernorm_backward(dhf, trace.hf_xhat, trace.hf_inv, P["lnf.g"])
    if want_param_grads:
        acc("lnf.g", dg)
        acc("lnf.b", db)

    for i in range(cfg.n_layers - 1, -1, -1):
        p = f"l{i}."
        tr = trace.layers[i]
        # MLP block: h_out = h_mid + gelu(LN2(h_mid) @ w1 + b1) @ w2 + b2
        df2 = dh
        dgact = df2 @ P[p + "w2"].T
        df1 = dgact * _gelu_grad(tr.f1)
        dbmlp = df1 @ P[p + "w1"].T
        if want_param_grads:
            acc(p + "w2", tr.gact.T @ df2)
            acc(p + "b2", df2.sum(axis=0))
            acc(p + "w1", tr.bmlp.T @ df1)
            acc(p + "b1", df1.sum(axis=0))
        dmid_ln, dg, db = _layernorm_backward(dbmlp, tr.b_xhat, tr.b_inv, P[p + "ln2.g"])
        if want_param_grads:
            acc(p + "ln2.g", dg)
            acc(p + "ln2.b", db)
        dh_mid = dh + dmid_ln

        # attention block: h_mid = h_in + (ctx @ wo + bo)
        do = dh_mid
        dctx = do @ P[p + "wo"].T
        if want_param_grads:
            acc(p + "wo", tr.ctx.T @ do)
            acc(p + "bo", do.sum(axis=0))
        T_ = dctx.shape[0]
        dctx_h = dctx.reshape(T_, H, hd).transpose(1, 0, 2)
        datt = np.matmul(dctx_h, tr.v.transpose(0, 2, 1))
        dv = np.matmul(tr.att.transpose(0, 2, 1), dctx_h)
        # softmax rows: ds = att * (datt - sum(datt * att))
        inner = (datt * tr.att).sum(axis=-1, keepdims=True)
        dscores = tr.att * (datt - inner)
        dq = np.matmul(dscores, tr.k) * scale
        dk = np.matmul(dscores.transpose(0, 2, 1), tr.q) * scale
        dq_f = dq.transpose(1, 0, 2).reshape(T_, cfg.d_model)
        dk_f = dk.transpose(1, 0, 2).reshape(T_, cfg.d_model)
        dv_f = dv.transpose(1, 0, 2).reshape(T_, cfg.d_model)
        da = dq_f @ P[p + "wq"].T + dk_f @ P[p + "wk"].T + dv_f @ P[p + "wv"].T
        if want_param_grads:
            acc(p + "wq", tr.a.T @ dq_f)
            acc(p + "bq", dq_f.sum(axis=0))
            acc(p + "wk", tr.a.T @ dk_f)
            acc(p + "bk", dk_f.sum(axis=0))
            acc(p + "wv", tr.a.T @ dv_f)
            acc(p + "bv", dv_f.sum(axis=0))
        dln1, dg, db = _layernorm_backward(da, tr.a_xhat, tr.a_inv, P[p + "ln1.g"])
        if want_param_grads:
            acc(p + "ln1.g", dg)
            acc(p + "ln1.b", db)
        dh = dh_mid + dln1

    g_emb_tokens = dh  # dLoss/de[t]: e feeds layer 0 directly
    if want_param_grads:
        demb = grads.get("emb")
        if demb is None:
            demb = np.zeros_like(P["emb"])
            grads["emb"] = demb
        for t, tok in enumerate(tokens):
            demb[tok] += g_emb_tokens[t]
        dpos = np.zeros_like(P["pos"])
        dpos[:T] = g_emb_tokens
        grads["pos"] = dpos
        # zero-fill params with no gradient path this step
        for name, arr in P.items():
            if name not in grads:
                grads[name] = np.zeros_like(arr)

    return BackwardResult(
        loss=loss,
        g_emb=g_emb_tokens,
        g_lm=g_lm,
        loss_positions=positions,
        weight=w,
        param_grads=grads,
    )


def sequence_loss(model: Model, seq: TokenSequence,
                  e_override: np.ndarray | None = None) -> float:
    """Forward-only loss; the finite-difference oracle's workhorse."""
    trace = forward(model, seq, e_override=e_override)
    positions = loss_positions_of(seq)
    if not positions:
        raise ValueError(f"empty response: {seq.instance_id}")
    tokens = seq.tokens
    w = 1.0 / len(positions)
    return float(-w * sum(
        math.log(trace.probs[t][tokens[t + 1]]) for t in positions
    ))


def perplexity(model: Model, seq: TokenSequence) -> float:
    """exp(mean response-token cross-entropy)."""
    return math.exp(sequence_loss(model, seq))


def config_to_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(**d)


def model_fingerprint(cfg: ModelConfig) -> str:
    """64-bit hex digest of the canonical config (init_seed included)."""
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


CHECKPOINT_FORMAT = "tinylm-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: Model, path: str) -> None:
    """JSON container with base64 little-endian float64 arrays, bit-exact."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config_to_dict(model.cfg),
        "params": {
            name: {
                "shape": list(arr.shape),
                "data": base64.b64encode(
                    np.ascontiguousarray(arr, dtype="<f8").tobytes()
                ).decode("ascii"),
            }
            for name, arr in model.params.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path: str) -> Model:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a model checkpoint: {path}")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    cfg = config_from_dict(payload["config"])
    cfg.validate()
    expected = param_shapes(cfg)
    params: dict[str, np.ndarray] = {}
    for name, shape in expected.items():
        entry = payload["params"].get(name)
        if entry is None:
            raise ValueError(f"checkpoint missing parameter {name}")
        arr = np.frombuffer(
            base64.b64decode(entry["data"]), dtype="<f8"
        ).astype(np.float64).reshape(entry["shape"])
        if tuple(arr.shape) != shape:
            raise ValueError(f"checkpoint shape mismatch for {name}")
        params[name] = arr.copy()
    return Model(cfg, params)
