import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchforge.bow import BowMatrix
from patchforge.plsa import (
    EmConfig,
    fold_in,
    fold_in_many,
    log_likelihood,
    load_plsa,
    posterior_from_topics,
    save_plsa,
    topic_posterior,
    train_plsa,
)


def block_corpus(seed=0):
    """Two word blocks (0-4, 5-9), documents 0-3 use block A, 4-7 block B."""
    rng = np.random.default_rng(seed)
    counts = np.zeros((10, 8))
    counts[:5, :4] = rng.integers(1, 6, (5, 4))
    counts[5:, 4:] = rng.integers(1, 6, (5, 4))
    return counts


def test_single_topic_is_corpus_frequency():
    counts = np.random.default_rng(1).integers(0, 5, (7, 4)).astype(float)
    m = train_plsa(counts, 1)
    np.testing.assert_allclose(m.word_given_topic[:, 0], counts.sum(1) / counts.sum(), atol=1e-9)
    np.testing.assert_allclose(m.topic_given_doc, 1.0)


def test_block_corpus_recovers_blocks():
    counts = block_corpus()
    m = train_plsa(counts, 2, EmConfig(max_iters=500, smoothing_eps=0.0))
    W, D = m.word_given_topic, m.topic_given_doc
    a = int(np.argmax(W[:5].sum(0)))
    b = 1 - a
    # analytic solution: each topic is its block's normalised word frequency
    np.testing.assert_allclose(W[:5, a], counts[:5].sum(1) / counts[:5].sum(), atol=1e-6)
    np.testing.assert_allclose(W[5:, b], counts[5:].sum(1) / counts[5:].sum(), atol=1e-6)
    assert W[5:, a].max() < 1e-6 and W[:5, b].max() < 1e-6
    np.testing.assert_allclose(D[a, :4], 1.0, atol=1e-6)
    np.testing.assert_allclose(D[b, 4:], 1.0, atol=1e-6)


def test_fold_in_block_document():
    m = train_plsa(block_corpus(), 2)
    a = int(np.argmax(m.word_given_topic[:5].sum(0)))
    doc = np.zeros(10)
    doc[[0, 2, 3]] = [2, 1, 4]
    res = fold_in(m, doc)
    assert res.topics[a] > 0.99 and not res.degenerate


def test_fold_in_zero_document_is_uniform_and_flagged():
    m = train_plsa(block_corpus(), 2)
    res = fold_in(m, np.zeros(10))
    np.testing.assert_array_equal(res.topics, [0.5, 0.5])
    assert res.degenerate
    topics, flags = fold_in_many(m, np.zeros((10, 2)))
    assert flags.all()


def test_fold_in_training_document_fixed_point():
    rng = np.random.default_rng(4)
    counts = rng.integers(0, 6, (30, 12)).astype(float)
    m = train_plsa(counts, 3, EmConfig(max_iters=2000, rel_tol=1e-12))
    for d in range(12):
        res = fold_in(m, counts[:, d], EmConfig(max_iters=5000, rel_tol=1e-14))
        assert 0.5 * np.abs(res.topics - m.topic_given_doc[:, d]).sum() <= 1e-3


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), J=st.integers(2, 30), N=st.integers(1, 12), K=st.integers(1, 4))
def test_em_monotone_and_normalised(seed, J, N, K):
    rng = np.random.default_rng(seed)
    counts = rng.integers(0, 4, (J, N)).astype(float)
    counts[rng.integers(J), rng.integers(N)] += 1
    m = train_plsa(counts, K, EmConfig(max_iters=60, rng_seed=seed))
    tr = np.asarray(m.log_likelihood_trace)
    assert np.all(tr[1:] >= tr[:-1] - 1e-9 * np.abs(tr[:-1]))
    np.testing.assert_allclose(m.word_given_topic.sum(0), 1.0, atol=1e-9)
    np.testing.assert_allclose(m.topic_given_doc.sum(0), 1.0, atol=1e-9)
    assert (m.word_given_topic >= 0).all() and (m.topic_given_doc >= 0).all()
    res = fold_in(m, counts[:, 0])
    ft = np.asarray(res.log_likelihood_trace)
    assert np.all(ft[1:] >= ft[:-1] - 1e-9 * np.abs(ft[:-1]))


def test_log_likelihood_matches_formula():
    rng = np.random.default_rng(0)
    counts = rng.integers(0, 3, (5, 4)).astype(float)
    W = rng.dirichlet(np.ones(5), 2).T
    D = rng.dirichlet(np.ones(2), 4).T
    ref = sum(
        counts[w, d] * np.log(sum(W[w, k] * D[k, d] for k in range(2)))
        for w in range(5)
        for d in range(4)
        if counts[w, d] > 0
    )
    assert log_likelihood(counts, W, D) == pytest.approx(ref, rel=1e-12)


def test_seed_determinism(tmp_path):
    counts = block_corpus(3) + 1
    for name in ("a", "b"):
        save_plsa(tmp_path / name, train_plsa(counts, 3, EmConfig(rng_seed=5)))
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_topic_permutation_symmetry():
    rng = np.random.default_rng(2)
    counts = rng.integers(0, 5, (6, 5)).astype(float)
    W0 = rng.random((6, 2))
    D0 = rng.random((2, 5))
    a = train_plsa(counts, 2, EmConfig(max_iters=50), init=(W0, D0))
    b = train_plsa(counts, 2, EmConfig(max_iters=50), init=(W0[:, ::-1], D0[::-1]))
    np.testing.assert_allclose(b.word_given_topic, a.word_given_topic[:, ::-1], atol=1e-12)
    np.testing.assert_allclose(b.topic_given_doc, a.topic_given_doc[::-1], atol=1e-12)


class TestPosterior:
    def test_single_topic_rows(self):
        m = train_plsa(block_corpus(), 1)
        np.testing.assert_array_equal(topic_posterior(m, 3), 1.0)

    def test_degenerate_mixture(self):
        W = np.array([[0.2, 0.5], [0.8, 0.5]])
        np.testing.assert_array_equal(posterior_from_topics(W, np.array([1.0, 0.0])), [[1, 0], [1, 0]])

    def test_hand_bayes(self):
        W = np.array([[0.6, 0.1], [0.3, 0.2], [0.1, 0.7]])
        d = np.array([0.25, 0.75])
        post = posterior_from_topics(W, d)
        # word 0: 0.15 vs 0.075 -> [2/3, 1/3]; word 1: 0.075 vs 0.15; word 2: 0.025 vs 0.525
        np.testing.assert_allclose(post, [[2 / 3, 1 / 3], [1 / 3, 2 / 3], [0.025 / 0.55, 0.525 / 0.55]], atol=1e-15)

    def test_zero_rows_uniform_and_flagged(self):
        W = np.array([[0.0, 0.0], [1.0, 1.0]])
        post, flags = posterior_from_topics(W, np.array([0.5, 0.5]), return_flags=True)
        np.testing.assert_array_equal(post[0], [0.5, 0.5])
        np.testing.assert_array_equal(flags, [True, False])

    def test_bad_index(self):
        m = train_plsa(block_corpus(), 2)
        with pytest.raises(IndexError):
            topic_posterior(m, 8)


def test_errors():
    with pytest.raises(ValueError):
        train_plsa(np.zeros((3, 3)), 2)
    with pytest.raises(ValueError):
        train_plsa(np.ones((3, 3)), 0)
    with pytest.raises(ValueError):
        EmConfig(rel_tol=0)
    m = train_plsa(np.ones((3, 2)), 1)
    with pytest.raises(ValueError):
        fold_in(m, np.ones(4))


def test_snapshot_round_trip(tmp_path):
    m = train_plsa(BowMatrix(block_corpus(), list(range(8)), 10), 3)
    save_plsa(tmp_path / "m.pfp", m)
    raw = (tmp_path / "m.pfp").read_bytes()
    assert raw[:4] == b"PFP1" and len(raw) == 16 + 8 * (10 * 3 + 3 * 8)
    back = load_plsa(tmp_path / "m.pfp")
    np.testing.assert_array_equal(back.word_given_topic, m.word_given_topic)
    np.testing.assert_array_equal(back.topic_given_doc, m.topic_given_doc)
    assert back.log_likelihood_trace == m.log_likelihood_trace
    (tmp_path / "m.pfp").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_plsa(tmp_path / "m.pfp")
