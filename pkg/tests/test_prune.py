import numpy as np
import pytest

from prunevit import ops
from prunevit.backbone import TokenState
from prunevit.prune import (PruneSchedule, apply_pruning_stage,
                            init_prune_params, merge_for_decoder,
                            prune_decoder_forward, retained_count, soft_gate,
                            topk_prune_mask, topk_threshold)
from prunevit.tensor import NumericsError, Tape, Tensor

from conftest import run_gradcheck

D, G = 8, 4


@pytest.fixture
def pparams():
    return init_prune_params(D, G, seed=21)


def rand_tokens(n, rng, dtype=np.float32):
    return Tensor(rng.uniform(-1, 1, (n, D)).astype(dtype), dtype=dtype)


def rand_seg(rng, dtype=np.float32):
    return Tensor(rng.uniform(-1, 1, (1, G)).astype(dtype), dtype=dtype)


def test_schedule_validation():
    with pytest.raises(NumericsError):
        PruneSchedule(boundaries=[4, 4], rates=[0.2, 0.2])
    with pytest.raises(NumericsError):
        PruneSchedule(boundaries=[4], rates=[1.0])
    with pytest.raises(NumericsError):
        PruneSchedule(boundaries=[4], rates=[0.5, 0.5])
    PruneSchedule(boundaries=[4, 6], rates=[0.5, 0.5]).validate_for(8)
    with pytest.raises(NumericsError):
        PruneSchedule(boundaries=[9], rates=[0.5]).validate_for(8)


def test_retained_count_examples():
    assert retained_count(64, 0.5) == 32
    assert retained_count(64, 0.6) == 26
    assert retained_count(10, 0.25) == 8
    assert retained_count(1, 0.9) == 1
    with pytest.raises(NumericsError):
        retained_count(10, 1.0)


@pytest.mark.parametrize("n", [1, 9, 64])
def test_decoder_output_shape(n, pparams, rng):
    scores = prune_decoder_forward(rand_tokens(n, rng), rand_seg(rng), pparams)
    assert scores.shape == (n,)


def test_decoder_accepts_flat_guidance(pparams, rng):
    tok = rand_tokens(3, rng)
    seg = rand_seg(rng)
    flat = Tensor(seg.data.reshape(-1))
    a = prune_decoder_forward(tok, seg, pparams).data
    b = prune_decoder_forward(tok, flat, pparams).data
    assert np.array_equal(a, b)


def test_decoder_guidance_shape_error(pparams, rng):
    with pytest.raises(NumericsError):
        prune_decoder_forward(rand_tokens(3, rng), Tensor(np.zeros((1, G + 1))),
                              pparams)


def test_zeroed_neck_gives_constant_scores(pparams, rng):
    # identical projected rows must score identically
    pparams["prune.neck.w"].data[:] = 0.0
    pparams["prune.neck.b"].data[:] = 0.0
    scores = prune_decoder_forward(rand_tokens(5, rng), rand_seg(rng), pparams).data
    assert np.all(scores == scores[0])


def test_decoder_matches_loop_oracle(rng):
    # plain numpy float64 reimplementation of the scoring pipeline
    p64 = {k: Tensor(v.data.astype(np.float64), dtype=np.float64)
           for k, v in init_prune_params(D, G, seed=33).items()}
    n = 6
    tok = rng.uniform(-1, 1, (n, D))
    seg = rng.uniform(-1, 1, (1, G))
    got = prune_decoder_forward(Tensor(tok, dtype=np.float64),
                                Tensor(seg, dtype=np.float64), p64).data

    w = {k: v.data for k, v in p64.items()}

    def lin(x, pre):
        return x @ w[f"{pre}.w"] + w[f"{pre}.b"]

    def xattn(tgt, src, pre):
        q, k, v = lin(tgt, f"{pre}.q"), lin(src, f"{pre}.k"), lin(src, f"{pre}.v")
        s = q @ k.T / np.sqrt(G)
        e = np.exp(s - s.max(axis=1, keepdims=True))
        return lin((e / e.sum(axis=1, keepdims=True)) @ v, f"{pre}.o")

    from scipy.special import erf

    def mlp(x, pre):
        h = lin(x, f"{pre}.w1")
        h = h * 0.5 * (1 + erf(h / np.sqrt(2)))
        return lin(h, f"{pre}.w2")

    timg = lin(tok, "prune.neck")
    cat = np.concatenate([w["prune.query"], seg], axis=0)
    tcat = cat + xattn(cat, cat, "prune.self.attn")
    tcat = tcat + mlp(tcat, "prune.self.ffn")
    tcat2 = tcat + xattn(tcat, timg, "prune.cat.attn")
    tcat2 = tcat2 + mlp(tcat2, "prune.cat.ffn")
    timg2 = timg + xattn(timg, tcat2, "prune.img.attn")
    expected = (timg2 @ tcat2[0:1].T).reshape(-1)
    assert np.abs(got - expected).max() < 1e-9


def test_decoder_gradcheck(rng):
    p64 = {k: Tensor(v.data.astype(np.float64), dtype=np.float64)
           for k, v in init_prune_params(D, G, seed=5).items()}

    def fn(tok, seg):
        return prune_decoder_forward(tok, seg, p64)

    run_gradcheck(fn, [rng.uniform(-1, 1, (4, D)), rng.uniform(-1, 1, (1, G))],
                  tol=1e-3)


def test_topk_examples():
    mask = topk_prune_mask(np.array([0.9, 0.1, 0.5, 0.7]), 0.5)
    assert mask.tolist() == [1, 0, 0, 1]
    # r = 0 keeps everything
    assert topk_prune_mask(np.array([3.0, -1.0]), 0.0).tolist() == [1, 1]


def test_topk_tie_breaks_to_lower_index():
    mask = topk_prune_mask(np.array([0.5, 0.5, 0.5, 0.1]), 0.5)
    assert mask.tolist() == [1, 1, 0, 0]


def test_topk_matches_sort_oracle(rng):
    for _ in range(200):
        n = int(rng.integers(1, 40))
        s = rng.uniform(-1, 1, n)
        r = float(rng.uniform(0, 0.99))
        mask = topk_prune_mask(s, r)
        k = retained_count(n, r)
        assert int(mask.sum()) == k
        kept = s[mask.astype(bool)]
        dropped = s[~mask.astype(bool)]
        if dropped.size:
            assert kept.min() >= dropped.max()


def test_threshold_is_kth_highest():
    s = np.array([0.9, 0.1, 0.5, 0.7])
    assert topk_threshold(s, 0.5) == 0.7
    assert topk_threshold(s, 0.0) == 0.1


def test_soft_gate_midpoint_and_sharpness():
    s = Tensor(np.array([0.9, 0.1, 0.5, 0.7]))
    g = soft_gate(s, 0.5, 10.0)
    # the threshold score gates to exactly 0.5
    assert abs(g.data[3] - 0.5) < 1e-7
    # away from the threshold, a sharp gate saturates to the hard mask
    hard = soft_gate(s, 0.5, 1e4).data
    assert np.allclose(hard[[0, 1, 2]], [1.0, 0.0, 0.0], atol=1e-6)


def test_soft_gate_gradient_with_constant_threshold(rng):
    # the threshold is held fixed during backward, so compare against finite
    # differences of sigmoid(alpha * (s - tau)) with tau frozen
    s = rng.uniform(-1, 1, 9)
    alpha = 7.0
    tau = topk_threshold(s, 0.5)
    w = rng.standard_normal(9)
    t = Tensor(s, requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        g = soft_gate(t, 0.5, alpha)
        tape.backward(ops.tsum(ops.mul(g, Tensor(w, dtype=np.float64))))

    def frozen(x):
        return float((w / (1 + np.exp(-alpha * (x - tau)))).sum())

    from conftest import central_diff, max_rel_err
    numeric = central_diff(lambda x: frozen(x), [s])
    assert max_rel_err([t.grad], numeric) < 1e-4


def stage_state(n, rng):
    return TokenState(active=np.ones(n, dtype=bool),
                      values=rand_tokens(n, rng))


def test_stage_infer_sets_topk_support(pparams, rng):
    state = stage_state(8, rng)
    seg = rand_seg(rng)
    new, rec = apply_pruning_stage(state, seg, pparams, 0.5, 10.0, "infer")
    assert new.active.sum() == 4
    assert np.array_equal(new.active, rec["mask"].astype(bool))
    assert np.array_equal(topk_prune_mask(rec["scores"], 0.5), rec["mask"])
    assert new.values is state.values


def test_stage_rate_zero_keeps_everything(pparams, rng):
    state = stage_state(6, rng)
    new, _ = apply_pruning_stage(state, rand_seg(rng), pparams, 0.0, 10.0, "infer")
    assert new.active.all()


def test_stage_reactivates_frozen_tokens(pparams, rng):
    # frozen token 0 scores highest under the injected scorer, so it returns
    state = TokenState(active=np.array([False, True, True, True]),
                       values=rand_tokens(4, rng))
    forced = np.array([9.0, 1.0, 2.0, 3.0], dtype=np.float32)

    def fake_scores(tokens, seg, params):
        return Tensor(forced)

    new, rec = apply_pruning_stage(state, rand_seg(rng), pparams, 0.5, 10.0,
                                   "infer", score_fn=fake_scores)
    assert new.active.tolist() == [True, False, False, True]


def test_stage_train_blends_with_entry_values(pparams, rng):
    state = stage_state(5, rng)
    prev = rand_tokens(5, rng)
    new, rec = apply_pruning_stage(state, rand_seg(rng), pparams, 0.4, 10.0,
                                   "train", prev_values=prev)
    assert new.active.all()
    g = rec["gates"].data[:, None]
    expected = g * state.values.data + (1 - g) * prev.data
    assert np.abs(new.values.data - expected).max() < 1e-6


def test_stage_train_requires_prev(pparams, rng):
    with pytest.raises(NumericsError):
        apply_pruning_stage(stage_state(4, rng), rand_seg(rng), pparams, 0.5,
                            10.0, "train")


def test_stage_bad_mode(pparams, rng):
    with pytest.raises(NumericsError):
        apply_pruning_stage(stage_state(4, rng), rand_seg(rng), pparams, 0.5,
                            10.0, "test")


def test_stage_scoring_covers_all_tokens(pparams, rng):
    def short_scores(tokens, seg, params):
        return Tensor(np.zeros(2, dtype=np.float32))

    with pytest.raises(NumericsError, match="all N"):
        apply_pruning_stage(stage_state(4, rng), rand_seg(rng), pparams, 0.5,
                            10.0, "infer", score_fn=short_scores)


def test_merge_returns_rows_in_patch_order(pparams, rng):
    state = TokenState(active=np.array([True, False, True]),
                       values=rand_tokens(3, rng))
    merged = merge_for_decoder(state)
    assert merged.data.tobytes() == state.values.data.tobytes()


def test_weight_sharing_single_decoder_instance(pparams, rng):
    # two stage applications must read the exact same parameter tensors, so a
    # gradient through both accumulates on one set of leaves
    tok = rand_tokens(4, rng)
    seg = rand_seg(rng)
    with Tape() as tape:
        s1 = prune_decoder_forward(tok, seg, pparams)
        s2 = prune_decoder_forward(ops.mul(tok, 2.0), seg, pparams)
        loss = ops.add(ops.tsum(s1), ops.tsum(s2))
        tape.backward(loss)
    only_first = init_prune_params(D, G, seed=21)
    with Tape() as tape:
        s1 = prune_decoder_forward(tok, seg, only_first)
        tape.backward(ops.tsum(s1))
    key = "prune.neck.w"
    assert not np.allclose(pparams[key].grad, only_first[key].grad)
