"""Transformer tests: finite-difference oracles, analytic identities, training.

The finite-difference checks are the ground truth for every gradient the
package reports; they re-derive each derivative numerically from the loss
alone, sharing no code with the backward pass.
"""

import math

import numpy as np
import pytest

from gradsel.corpus import Instance, SynthSpec, build_vocab, encode_instance, synth_corpus
from gradsel.tinylm import (
    ModelConfig,
    TrainHyper,
    Trainer,
    extract_epoch,
    forward,
    init_model,
    load_checkpoint,
    loss_and_grads,
    loss_positions_of,
    model_fingerprint,
    param_shapes,
    perplexity,
    save_checkpoint,
    sequence_loss,
    total_update_steps,
    train,
    warmup_lr,
)
from gradsel.corpus import TokenSequence

TINY = ModelConfig(
    d_model=16, n_layers=2, n_heads=2, d_ff=32,
    vocab_size=50, max_seq_len=12, init_seed=7,
)


def _seq(tokens, roles, instance_id="t0"):
    return TokenSequence(instance_id, tuple(tokens), tuple(roles))


def _random_seq(rng: np.random.Generator, cfg: ModelConfig, t_prompt=4, t_resp=4):
    toks = [1] + list(rng.integers(5, cfg.vocab_size, t_prompt)) + [3]
    toks += list(rng.integers(5, cfg.vocab_size, t_resp)) + [2]
    roles = (
        ["special"] + ["prompt"] * t_prompt + ["special"]
        + ["response"] * t_resp + ["special"]
    )
    return _seq(toks, roles)


def test_init_deterministic_and_validated():
    a = init_model(TINY)
    b = init_model(TINY)
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])
    with pytest.raises(ValueError):
        init_model(ModelConfig(16, 1, 3, 32, 50, 12, 0))


def test_param_count_closed_form():
    cfg = ModelConfig(8, 1, 2, 16, 30, 10, 0)
    m = init_model(cfg)
    d, ff, V, S, L = 8, 16, 30, 10, 1
    expected = (
        V * d + S * d
        + L * (2 * d + 4 * (d * d + d) + 2 * d + (d * ff + ff) + (ff * d + d))
        + 2 * d
        + d * V
    )
    assert m.param_count() == expected
    tied = init_model(ModelConfig(8, 1, 2, 16, 30, 10, 0, tie_lm_head=True))
    assert tied.param_count() == expected - d * V


def test_probability_rows_sum_to_one():
    m = init_model(TINY)
    rng = np.random.default_rng(0)
    trace = forward(m, _random_seq(rng, TINY))
    np.testing.assert_allclose(trace.probs.sum(axis=1), 1.0, atol=1e-9)


def test_causality_prefix_invariance():
    m = init_model(TINY)
    toks = [1, 10, 11, 3, 12, 13]
    roles = ["special", "prompt", "prompt", "special", "response", "response"]
    short = forward(m, _seq(toks, roles))
    longer = forward(m, _seq(toks + [14, 2], roles + ["response", "special"]))
    np.testing.assert_allclose(short.logits, longer.logits[: len(toks)],
                               rtol=0, atol=1e-12)


def test_zeroed_lm_head_gives_uniform():
    m = init_model(TINY)
    m.params["lm_head"][:] = 0.0
    trace = forward(m, _random_seq(np.random.default_rng(1), TINY))
    np.testing.assert_allclose(trace.probs, 1.0 / TINY.vocab_size, atol=1e-15)


def test_forward_rejects_bad_tokens():
    m = init_model(TINY)
    with pytest.raises(ValueError, match="out of range"):
        forward(m, _seq([1, 99, 2], ["special", "response", "special"]))
    too_long = _seq([1] * 13, ["special"] * 13)
    with pytest.raises(ValueError, match="max_seq_len"):
        forward(m, too_long)


def _zeroed_model(cfg):
    m = init_model(cfg)
    for p in m.params.values():
        p[:] = 0.0
    return m


def test_g_lm_uniform_two_way_split():
    # logits (0,0), target 0, one loss position -> g_lm = [-1/2, 1/2]
    cfg = ModelConfig(4, 1, 1, 8, 2, 8, 0)
    m = _zeroed_model(cfg)
    seq = _seq([1, 1, 0], ["special", "special", "response"], "a")
    res = loss_and_grads(m, seq, forward(m, seq))
    np.testing.assert_allclose(res.g_lm[1], [-0.5, 0.5], atol=1e-12)
    assert abs(np.linalg.norm(res.g_lm[1]) - math.sqrt(0.5)) < 1e-9


def test_g_lm_hand_computed_three_way():
    # force logits (1,0,0) via lnf bias + lm_head row; target id 1
    cfg = ModelConfig(4, 1, 1, 8, 3, 8, 0)
    m = _zeroed_model(cfg)
    m.params["lnf.b"][0] = 1.0
    m.params["lm_head"][0, :] = [1.0, 0.0, 0.0]
    seq = _seq([0, 2, 1], ["special", "special", "response"], "b")
    trace = forward(m, seq)
    np.testing.assert_allclose(trace.logits[1], [1.0, 0.0, 0.0], atol=1e-12)
    res = loss_and_grads(m, seq, trace)
    np.testing.assert_allclose(
        res.g_lm[1], [0.57611688, -0.78805844, 0.21194156], atol=1e-7
    )


def test_g_lm_zero_sum_and_masked_rows():
    m = init_model(TINY)
    seq = _random_seq(np.random.default_rng(2), TINY)
    res = loss_and_grads(m, seq, forward(m, seq))
    for t in range(len(seq)):
        if t in res.loss_positions:
            assert abs(res.g_lm[t].sum()) < 1e-9
        else:
            assert np.all(res.g_lm[t] == 0.0)


def test_probs_space_switch():
    cfg = ModelConfig(16, 2, 2, 32, 50, 12, 7, lm_grad_space="probs")
    m = init_model(cfg)
    seq = _random_seq(np.random.default_rng(3), cfg)
    trace = forward(m, seq)
    res = loss_and_grads(m, seq, trace)
    for t in res.loss_positions:
        target = seq.tokens[t + 1]
        expect = -res.weight / trace.probs[t, target]
        assert res.g_lm[t, target] == pytest.approx(expect, rel=1e-12)
        off = np.delete(res.g_lm[t], target)
        assert np.all(off == 0.0)


def test_empty_response_rejected():
    m = init_model(TINY)
    seq = _seq([1, 10, 3, 2], ["special", "prompt", "special", "special"])
    with pytest.raises(ValueError, match="empty response"):
        loss_and_grads(m, seq, forward(m, seq))


def test_embedding_gradients_match_finite_differences():
    m = init_model(TINY)
    seq = _random_seq(np.random.default_rng(4), TINY)
    trace = forward(m, seq)
    res = loss_and_grads(m, seq, trace, want_param_grads=False)
    e0 = trace.e.copy()
    eps = 1e-5
    fd = np.zeros_like(e0)
    for t in range(e0.shape[0]):
        for j in range(e0.shape[1]):
            ep = e0.copy()
            ep[t, j] += eps
            em = e0.copy()
            em[t, j] -= eps
            fd[t, j] = (
                sequence_loss(m, seq, e_override=ep)
                - sequence_loss(m, seq, e_override=em)
            ) / (2 * eps)
    np.testing.assert_allclose(res.g_emb, fd, rtol=1e-4, atol=1e-8)


def test_every_parameter_gradient_matches_finite_differences():
    m = init_model(TINY)
    seq = _random_seq(np.random.default_rng(5), TINY, t_prompt=4, t_resp=5)
    res = loss_and_grads(m, seq, forward(m, seq))
    eps = 1e-5
    for name, arr in m.params.items():
        analytic = res.param_grads[name]
        fd = np.zeros_like(arr)
        flat = arr.reshape(-1)
        fd_flat = fd.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            lp = sequence_loss(m, seq)
            flat[idx] = orig - eps
            lm_ = sequence_loss(m, seq)
            flat[idx] = orig
            fd_flat[idx] = (lp - lm_) / (2 * eps)
        np.testing.assert_allclose(analytic, fd, rtol=1e-4, atol=1e-8,
                                   err_msg=f"parameter {name}")


def test_tied_head_gradients_match_finite_differences():
    cfg = ModelConfig(8, 1, 2, 16, 20, 12, 3, tie_lm_head=True)
    m = init_model(cfg)
    seq = _seq([1, 7, 3, 9, 10, 2],
               ["special", "prompt", "special", "response", "response", "special"])
    res = loss_and_grads(m, seq, forward(m, seq))
    eps = 1e-5
    arr = m.params["emb"]
    fd = np.zeros_like(arr)
    for i in range(arr.shape[0]):
        for j in range(arr.shape[1]):
            orig = arr[i, j]
            arr[i, j] = orig + eps
            lp = sequence_loss(m, seq)
            arr[i, j] = orig - eps
            lm_ = sequence_loss(m, seq)
            arr[i, j] = orig
            fd[i, j] = (lp - lm_) / (2 * eps)
    np.testing.assert_allclose(res.param_grads["emb"], fd, rtol=1e-4, atol=1e-8)


def test_perplexity_uniform_equals_vocab_size():
    m = init_model(TINY)
    m.params["lm_head"][:] = 0.0
    seq = _random_seq(np.random.default_rng(6), TINY)
    assert perplexity(m, seq) == pytest.approx(TINY.vocab_size, rel=1e-12)


def test_perplexity_at_least_one():
    m = init_model(TINY)
    for s in range(5):
        seq = _random_seq(np.random.default_rng(s), TINY)
        assert perplexity(m, seq) >= 1.0


def test_checkpoint_round_trip_bit_exact(tmp_path):
    m = init_model(TINY)
    train(m, [_random_seq(np.random.default_rng(8), TINY) for _ in range(6)],
          TrainHyper(epochs=1, batch_size=3, shuffle_seed=1))
    path = str(tmp_path / "ck.json")
    save_checkpoint(m, path)
    m2 = load_checkpoint(path)
    assert m2.cfg == m.cfg
    for k in m.params:
        assert np.array_equal(m.params[k], m2.params[k])


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"format": "something-else"}')
    with pytest.raises(ValueError, match="not a model checkpoint"):
        load_checkpoint(str(p))


def test_fingerprint_covers_config_and_seed():
    a = model_fingerprint(TINY)
    assert len(a) == 16 and int(a, 16) >= 0
    assert a == model_fingerprint(TINY)
    other = ModelConfig(16, 2, 2, 32, 50, 12, init_seed=8)
    assert model_fingerprint(other) != a


def test_train_zero_epochs_is_identity():
    m = init_model(TINY)
    before = {k: v.copy() for k, v in m.params.items()}
    train(m, [_random_seq(np.random.default_rng(9), TINY)], TrainHyper(epochs=0))
    for k in before:
        assert np.array_equal(before[k], m.params[k])


def test_train_deterministic():
    def run():
        m = init_model(TINY)
        seqs = [_random_seq(np.random.default_rng(40 + i), TINY) for i in range(10)]
        return train(m, seqs, TrainHyper(epochs=2, batch_size=4, shuffle_seed=5))

    a, b = run(), run()
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])


def test_train_loss_decreases_on_learnable_corpus():
    ds = synth_corpus(SynthSpec(50, 0, 0, seed=11))
    tok = build_vocab(ds, max_vocab=256)
    seqs = [encode_instance(tok, i, 32) for i in ds]
    cfg = ModelConfig(32, 2, 4, 64, tok.vocab_size, 32, init_seed=1)
    m = init_model(cfg)
    hyper = TrainHyper(epochs=3, batch_size=8, shuffle_seed=2)
    trainer = Trainer(m, hyper, total_update_steps(len(seqs), hyper))
    trainer.run_epochs(seqs)
    assert trainer.epoch_losses[2] < trainer.epoch_losses[0]


def test_warmup_schedule_shape():
    # 100 steps, ratio 0.1 -> ramp over 10 steps then flat
    assert warmup_lr(1.0, 1, 100, 0.1) == pytest.approx(0.1)
    assert warmup_lr(1.0, 5, 100, 0.1) == pytest.approx(0.5)
    assert warmup_lr(1.0, 10, 100, 0.1) == pytest.approx(1.0)
    assert warmup_lr(1.0, 50, 100, 0.1) == 1.0
    assert warmup_lr(1.0, 1, 100, 0.0) == 1.0


def test_extract_frozen_order_independent():
    m = init_model(TINY)
    seqs = [_random_seq(np.random.default_rng(60 + i), TINY) for i in range(8)]
    for i, s in enumerate(seqs):
        seqs[i] = TokenSequence(f"id{i}", s.tokens, s.roles)
    _, bundles = extract_epoch(m, seqs, TrainHyper(), mode="frozen")
    _, shuffled = extract_epoch(m, list(reversed(seqs)), TrainHyper(), mode="frozen")
    by_id = {b.instance_id: b for b in shuffled}
    for b in bundles:
        assert np.array_equal(b.g_emb, by_id[b.instance_id].g_emb)
        assert np.array_equal(b.g_lm, by_id[b.instance_id].g_lm)
        assert b.step_index == -1


def test_extract_online_single_batch_matches_frozen():
    seqs = [_random_seq(np.random.default_rng(70 + i), TINY) for i in range(6)]
    for i, s in enumerate(seqs):
        seqs[i] = TokenSequence(f"id{i}", s.tokens, s.roles)
    frozen_model = init_model(TINY)
    _, frozen = extract_epoch(frozen_model, seqs, TrainHyper(), mode="frozen")
    online_model = init_model(TINY)
    hyper = TrainHyper(batch_size=len(seqs), shuffle_seed=3)
    _, online = extract_epoch(online_model, seqs, hyper, mode="online")
    assert sorted(b.instance_id for b in online) == sorted(b.instance_id for b in frozen)
    fro = {b.instance_id: b for b in frozen}
    for b in online:
        assert np.array_equal(b.g_emb, fro[b.instance_id].g_emb)
        assert np.array_equal(b.g_lm, fro[b.instance_id].g_lm)


def test_extract_online_one_bundle_per_instance():
    seqs = [_random_seq(np.random.default_rng(80 + i), TINY) for i in range(7)]
    for i, s in enumerate(seqs):
        seqs[i] = TokenSequence(f"id{i}", s.tokens, s.roles)
    m = init_model(TINY)
    _, bundles = extract_epoch(m, seqs, TrainHyper(batch_size=2), mode="online")
    assert sorted(b.instance_id for b in bundles) == sorted(s.instance_id for s in seqs)
    steps = {b.instance_id: b.step_index for b in bundles}
    assert min(steps.values()) == 0
    assert max(steps.values()) == total_update_steps(len(seqs), TrainHyper(batch_size=2, epochs=1)) - 1


def test_nan_loss_aborts_with_step_index():
    m = init_model(TINY)
    m.params["lnf.g"][0] = float("nan")
    seq = _random_seq(np.random.default_rng(90), TINY)
    hyper = TrainHyper()
    trainer = Trainer(m, hyper, 1)
    with pytest.raises(RuntimeError, match="NaN loss at step 1"):
        trainer.apply_batch([seq])


def test_loss_positions_follow_response_roles():
    seq = _seq([1, 5, 3, 6, 7, 2],
               ["special", "prompt", "special", "response", "response", "special"])
    assert loss_positions_of(seq) == [2, 3]


def test_param_shapes_orders_embedding_first():
    names = list(param_shapes(TINY))
    assert names[0] == "emb" and names[1] == "pos"
    assert names[-1] == "lm_head"
