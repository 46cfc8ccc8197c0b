import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maligan import autodiff as ad
from maligan.models import (BOS, EOS, PAD, Discriminator, RecurrentGenerator, SequenceBatch, TabularGenerator,
                            Vocab, discriminate, make_generator, snapshot)
from maligan.oracle import all_sequences, enumerate_distribution, random_tabular


def z_within(counts, probs, n, k=4.0):
    sd = np.sqrt(n * probs * (1 - probs))
    return np.all(np.abs(counts - n * probs) <= k * np.maximum(sd, 1e-12))


def fd_grad(f, theta, h=1e-5):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def test_one_hot_model_is_deterministic():
    gen = TabularGenerator(3, 4)
    gen.params["logits"].value = np.where(np.arange(3) == 2, 50.0, -50.0) * np.ones((gen.n_contexts, 1))
    out = gen.sample(5, np.random.default_rng(0))
    np.testing.assert_array_equal(out.tokens, 2)
    np.testing.assert_array_equal(out.lengths, 4)


def test_sampling_is_reproducible():
    a = TabularGenerator(2, 3).sample(50, np.random.default_rng(11))
    b = TabularGenerator(2, 3).sample(50, np.random.default_rng(11))
    assert a.tokens.tobytes() == b.tokens.tobytes()


def test_uniform_sequence_frequencies():
    n = 10 ** 5
    s = TabularGenerator(2, 3).sample(n, np.random.default_rng(2))
    idx = s.tokens @ np.array([4, 2, 1])
    assert z_within(np.bincount(idx, minlength=8), np.full(8, 1 / 8), n)


def test_sampling_matches_exact_distribution():
    gen = random_tabular(3, 3, np.random.default_rng(5))
    n = 10 ** 5
    s = gen.sample(n, np.random.default_rng(6))
    idx = s.tokens @ np.array([9, 3, 1])
    assert z_within(np.bincount(idx, minlength=27), enumerate_distribution(gen).probs, n)


def test_clamped_sample_boundaries():
    gen = random_tabular(3, 4, np.random.default_rng(1))
    prefix = SequenceBatch.fixed([[0, 1, 2, 0], [2, 2, 1, 1]])
    full = gen.clamped_sample(prefix, 4, np.random.default_rng(0))
    np.testing.assert_array_equal(full.tokens, prefix.tokens)
    free = gen.clamped_sample(prefix, 0, np.random.default_rng(3))
    ref = gen.sample(2, np.random.default_rng(3))
    np.testing.assert_array_equal(free.tokens, ref.tokens)
    part = gen.clamped_sample(prefix, 2, np.random.default_rng(4))
    np.testing.assert_array_equal(part.tokens[:, :2], prefix.tokens[:, :2])
    np.testing.assert_array_equal(part.groups, [0, 1])
    with pytest.raises(ValueError):
        gen.clamped_sample(SequenceBatch.from_lists([[0]], width=4), 2, np.random.default_rng(0))


def test_clamped_completion_frequencies():
    gen = random_tabular(2, 3, np.random.default_rng(8))
    pp = enumerate_distribution(gen).probs.reshape(2, 4)
    n = 10 ** 5
    prefix = SequenceBatch.fixed(np.ones((n, 3), dtype=int))
    out = gen.clamped_sample(prefix, 1, np.random.default_rng(9))
    assert np.all(out.tokens[:, 0] == 1)
    idx = out.tokens[:, 1] * 2 + out.tokens[:, 2]
    assert z_within(np.bincount(idx, minlength=4), pp[1] / pp[1].sum(), n)


def test_log_prob_and_gradient_identity():
    gen = TabularGenerator(4, 3)
    x = SequenceBatch.fixed([[3, 0, 2]])
    assert gen.log_prob(x)[0] == pytest.approx(3 * np.log(0.25))
    gen = random_tabular(3, 3, np.random.default_rng(0))
    x = SequenceBatch.fixed([[2, 1, 1]])
    g = gen.grad_log_prob(x).reshape(gen.n_contexts, 3)
    probs = np.exp(gen.table_log_probs())
    expected = np.zeros_like(g)
    for t, ctx in enumerate(gen.contexts(x.tokens)[0]):
        expected[ctx] += np.eye(3)[x.tokens[0, t]] - probs[ctx]
    np.testing.assert_allclose(g, expected, atol=1e-14)


def test_low_order_contexts_share_parameters():
    gen = TabularGenerator(2, 5, order=1)
    assert gen.n_contexts == 3
    ctx = gen.contexts(np.array([[0, 1, 1, 0, 1]]))[0]
    np.testing.assert_array_equal(ctx, [0, 1, 2, 2, 1])


@pytest.mark.parametrize("seed", range(3))
def test_recurrent_gradient_matches_finite_differences(seed):
    gen = RecurrentGenerator(2, 3, embed_dim=3, hidden=4, seed=seed, init_scale=0.5)
    rng = np.random.default_rng(seed)
    batch = SequenceBatch.fixed(rng.integers(0, 2, size=(4, 3)))
    weights = rng.normal(size=(4, 3))
    g = gen.grad_weighted(batch, weights)
    theta = gen.params.flatten()

    def f(th):
        gen.params.set_flat(th)
        return gen.weighted_objective_value(batch, weights)

    num = fd_grad(f, theta)
    gen.params.set_flat(theta)
    assert np.max(np.abs(g - num)) / np.max(np.abs(num)) < 1e-4


def test_recurrent_entropy_gradient_matches_finite_differences():
    gen = RecurrentGenerator(3, 3, embed_dim=3, hidden=4, seed=1, init_scale=0.5)
    rng = np.random.default_rng(1)
    batch = SequenceBatch.fixed(rng.integers(0, 3, size=(3, 3)))
    weights = rng.uniform(size=(3, 3))
    g = gen.grad_entropy(batch, weights)
    theta = gen.params.flatten()

    def f(th):
        gen.params.set_flat(th)
        return gen.weighted_objective_value(batch, weights, entropy=True)

    num = fd_grad(f, theta)
    assert np.max(np.abs(g - num)) / np.max(np.abs(num)) < 1e-4


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_conditionals_normalize(seed):
    rng = np.random.default_rng(seed)
    tab = TabularGenerator(3, 3, rng=rng, init_scale=2.0)
    rec = RecurrentGenerator(3, 3, seed=seed, init_scale=1.0)
    toks = all_sequences(3, 3)
    for gen in (tab, rec):
        np.testing.assert_allclose(np.exp(gen.step_log_probs(toks)).sum(axis=2), 1.0, atol=1e-12)
        assert abs(np.exp(gen.log_prob(SequenceBatch.fixed(toks))).sum() - 1) < 1e-12


def test_eos_sampling_and_banned_tokens():
    gen = TabularGenerator(6, 5, order=1, eos=EOS, banned=(BOS, PAD), rng=np.random.default_rng(0),
                           init_scale=1.0)
    out = gen.sample(500, np.random.default_rng(1))
    for row, n in zip(out.tokens, out.lengths):
        assert BOS not in row[:n] and PAD not in row[:n]
        assert np.all(row[n:] == PAD)
        if n < 5:
            assert row[n - 1] == EOS
        assert EOS not in row[:n - 1]
    lp = gen.log_prob(out)
    assert np.all(np.isfinite(lp))


def test_discriminator_contracts():
    d = Discriminator(4, 3, 5, seed=0)
    batch = SequenceBatch.from_lists([[0, 1], [3, 3, 2], [0, 1]], width=4)
    s = discriminate(d, batch)
    np.testing.assert_array_equal(s, 0.5)
    d.params["head.w"].value = np.random.default_rng(0).normal(size=(10, 1))
    s = d.score(batch)
    assert s[0] == s[2]
    wide = SequenceBatch.from_lists([[0, 1], [3, 3, 2], [0, 1]], width=7)
    np.testing.assert_array_equal(d.score(wide), s)
    d.params["head.b"].value = np.array([1e4])
    assert np.all(d.score(batch) == 1 - d.delta)
    d.params["head.b"].value = np.array([-1e4])
    assert np.all(d.score(batch) == d.delta)
    with pytest.raises(ValueError):
        d.score(SequenceBatch.from_lists([[]], width=3))


@pytest.mark.parametrize("seed", range(2))
def test_discriminator_gradient_matches_finite_differences(seed):
    d = Discriminator(3, 3, 4, seed=seed, init_scale=0.5)
    rng = np.random.default_rng(seed)
    d.params["head.w"].value = rng.normal(size=(8, 1))
    batch = SequenceBatch.from_lists([[0, 2, 1], [1], [2, 2]], width=3)
    w = rng.normal(size=3)
    d.params.zero_grads()
    ad.backward(ad.reduce_sum(ad.mul(ad.log_sigmoid(d.logits(batch)), w[:, None])))
    g = d.params.flat_grad()
    theta = d.params.flatten()

    def f(th):
        d.params.set_flat(th)
        z = d.raw_logits(batch)
        return float(np.sum(-np.logaddexp(0, -z) * w))

    num = fd_grad(f, theta)
    assert np.max(np.abs(g - num)) / np.max(np.abs(num)) < 1e-4


def test_snapshot_is_frozen():
    gen = random_tabular(3, 3, np.random.default_rng(0))
    snap = snapshot(gen)
    x = SequenceBatch.fixed(all_sequences(3, 3))
    before = snap.log_prob(x).copy()
    np.testing.assert_array_equal(snap.sample(20, np.random.default_rng(1)).tokens,
                                  gen.sample(20, np.random.default_rng(1)).tokens)
    gen.apply_gradient(np.random.default_rng(2).normal(size=gen.params.size), 0.5)
    assert gen.step == snap.step + 1
    np.testing.assert_array_equal(snap.log_prob(x), before)
    assert not np.allclose(gen.log_prob(x), before)


def test_make_generator_roundtrip(tmp_path):
    for gen in (random_tabular(3, 3, np.random.default_rng(0)), RecurrentGenerator(4, 5, seed=2)):
        path = tmp_path / "g.ckpt"
        ad.save_checkpoint(path, gen.params, gen.meta())
        params, meta = ad.load_checkpoint(path)
        other = make_generator(meta, params)
        toks = np.random.default_rng(0).integers(0, gen.n_tokens, size=(6, gen.max_len))
        np.testing.assert_array_equal(other.step_log_probs(toks), gen.step_log_probs(toks))


def test_vocab_roundtrip(tmp_path):
    v = Vocab(["the", "cat", "sat"])
    assert v.itos[:3] == ["<bos>", "<eos>", "<pad>"]
    assert v.decode(v.encode(["cat", "the"])) == ["cat", "the"]
    v.save(tmp_path / "v.txt")
    assert Vocab.load(tmp_path / "v.txt").itos == v.itos
    with pytest.raises(KeyError):
        v.encode(["dog"])
