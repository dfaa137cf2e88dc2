import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import assert_gradients_match
from radssl.augment import make_views
from radssl.encoder import ViewEmbedding, encode, init_encoder, reconstruct
from radssl.features import from_array
from radssl.losses import (
    LossWeights,
    discrimination_loss,
    js_div,
    js_from_logits,
    kl_div,
    pairwise_nll,
    recon_loss,
    to_prob,
    total_loss,
)

LN2 = math.log(2.0)


# -- direct-summation oracles --------------------------------------------------------


def softmax_oracle(values):
    flat = [float(v) for v in np.ravel(values)]
    m = max(flat)
    e = [math.exp(v - m) for v in flat]
    return [v / sum(e) for v in e]


def kl_oracle(p, q):
    return sum(a * math.log(a / b) for a, b in zip(p, q) if a > 0)


def js_oracle(p, q):
    z = [(a + b) / 2 for a, b in zip(p, q)]
    return 0.5 * kl_oracle(p, z) + 0.5 * kl_oracle(q, z)


def nll_oracle(anchor, others, tau):
    """others: list of (is_positive, vector)."""
    num = sum(math.exp(np.dot(anchor, v) / tau) for pos, v in others if pos)
    den = sum(math.exp(np.dot(anchor, v) / tau) for _, v in others)
    return -math.log(num / den)


def disc_oracle(views, tau):
    """views[i][j]: j-th view of subject i, exactly two views per subject."""
    m = len(views)
    total = 0.0
    for i in range(m):
        for a, b in ((0, 1), (1, 0)):
            others = [(ii == i, views[ii][jj]) for ii in range(m) for jj in range(2) if (ii, jj) != (i, a)]
            assert sum(pos for pos, _ in others) == 1 and np.array_equal(next(v for pos, v in others if pos), views[i][b])
            total += nll_oracle(views[i][a], others, tau)
    return total / (2 * m)


def unit(angle):
    return np.array([math.cos(angle), math.sin(angle)])


# -- probabilities and divergences -----------------------------------------------------


def test_to_prob_examples():
    np.testing.assert_allclose(to_prob(np.full((2, 2), 3.7)).numpy(), [0.25] * 4, atol=1e-15)
    np.testing.assert_allclose(to_prob([[0.0, math.log(3.0)]]).numpy(), [0.25, 0.75], atol=1e-15)


def test_to_prob_shift_invariance(rng):
    x = rng.normal(size=(5, 4))
    np.testing.assert_allclose(to_prob(x + 123.4).numpy(), to_prob(x).numpy(), atol=1e-12)
    np.testing.assert_allclose(to_prob(x).numpy(), softmax_oracle(x), atol=1e-15)


def test_kl_examples():
    assert kl_div([0.3, 0.7], [0.3, 0.7]).item() == 0.0
    expected = 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0)
    assert kl_div([0.5, 0.5], [0.25, 0.75]).item() == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(0.14384, abs=1e-5)
    with pytest.raises(ValueError, match="infinite divergence"):
        kl_div([1.0, 0.0], [0.0, 1.0])
    with pytest.raises(ValueError, match="length"):
        kl_div([1.0], [0.5, 0.5])


def test_kl_zero_mass_convention():
    assert kl_div([0.0, 1.0], [0.5, 0.5]).item() == pytest.approx(math.log(2.0), abs=1e-15)


def test_js_examples():
    assert js_div([0.2, 0.8], [0.2, 0.8]).item() == 0.0
    assert js_div([1.0, 0.0], [0.0, 1.0]).item() == pytest.approx(LN2, abs=1e-15)
    p, q = [0.5, 0.5], [0.9, 0.1]
    assert js_div(p, q).item() == pytest.approx(js_oracle(p, q), abs=1e-15)
    assert js_div(p, q).item() == js_div(q, p).item()


def test_js_bounds_on_random_simplex_pairs(rng):
    p = rng.dirichlet(np.ones(20), size=1000)
    q = rng.dirichlet(np.ones(20), size=1000)
    vals = np.array([js_div(a, b).item() for a, b in zip(p, q)])
    assert np.all(vals >= 0.0) and np.all(vals <= LN2)


def test_kl_nonnegative_on_random_pairs(rng):
    for _ in range(200):
        p, q = rng.dirichlet(np.ones(6), size=2)
        assert kl_div(p, q).item() >= -1e-12
        assert abs(kl_div(p, p).item()) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-20, 20)), arrays(np.float64, (3, 4), elements=st.floats(-20, 20)))
def test_log_space_js_matches_direct(x, y):
    direct = js_div(to_prob(x), to_prob(y)).item()
    assert js_from_logits(x, y).item() == pytest.approx(direct, abs=1e-12)
    assert js_from_logits(x, y).item() == pytest.approx(js_from_logits(y, x).item(), abs=1e-15)


def test_js_from_logits_no_underflow():
    # masses around exp(-800) vanish in float64; the log-space path keeps the value finite
    x = np.array([[0.0, -800.0]])
    y = np.array([[-800.0, 0.0]])
    assert js_from_logits(x, y).item() == pytest.approx(LN2, abs=1e-12)


# -- reconstruction --------------------------------------------------------------------


def test_recon_perfect_reconstruction(rng):
    x = rng.normal(size=(3, 4))
    assert recon_loss(x, [x, x, x], beta=1.0).item() == 0.0


def test_recon_distributional_identity(rng):
    x = rng.normal(size=(3, 4))
    assert abs(recon_loss(x, [x + 2.0, x - 1.0], beta=0.0).item()) <= 1e-15


def test_recon_single_view_example():
    x, x_hat = np.array([[1.0, 0.0]]), np.array([[0.0, 0.0]])
    expected = 0.5 * 1.0 + 0.5 * js_oracle(softmax_oracle(x), softmax_oracle(x_hat))
    assert recon_loss(x, [x_hat], beta=0.5).item() == pytest.approx(expected, abs=1e-15)


def test_recon_sums_over_views(rng):
    x = rng.normal(size=(3, 4))
    views = [rng.normal(size=(3, 4)) for _ in range(3)]
    each = [
        0.3 * float(((x - v) ** 2).sum()) + 0.7 * js_oracle(softmax_oracle(x), softmax_oracle(v)) for v in views
    ]
    assert recon_loss(x, views, beta=0.3).item() == pytest.approx(sum(each), rel=1e-12)


def test_recon_errors(rng):
    x = rng.normal(size=(3, 4))
    with pytest.raises(ValueError, match="shape"):
        recon_loss(x, [rng.normal(size=(3, 5))], beta=0.5)
    with pytest.raises(ValueError):
        recon_loss(x, [x], beta=1.5)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-5, 5)), st.floats(0, 1))
def test_recon_nonnegative(x_hat, beta):
    x = np.arange(6.0).reshape(2, 3)
    assert recon_loss(x, [x_hat], beta=beta).item() >= 0.0


# -- discrimination ----------------------------------------------------------------------


def _batch(vectors):
    """vectors[i][j] -> list of (subject_id, ViewEmbedding)."""
    out = []
    for i, vs in enumerate(vectors):
        for v in vs:
            emb = ViewEmbedding(per_roi=torch.as_tensor(v)[None, :], flat_normalized=torch.as_tensor(v))
            out.append((f"s{i}", emb))
    return out


def test_pairwise_nll_matches_oracle():
    vecs = [[unit(0.1), unit(0.5)], [unit(2.0), unit(-1.3)]]
    batch = _batch(vecs)
    anchor = batch[0][1]
    others = [(i == 0, vecs[i][j]) for i in range(2) for j in range(2) if (i, j) != (0, 0)]
    assert pairwise_nll(anchor, batch, "s0", 0.1).item() == pytest.approx(nll_oracle(vecs[0][0], others, 0.1), abs=1e-12)


def test_pairwise_nll_ordering():
    a = unit(0.0)
    good = _batch([[a, a], [unit(math.pi / 2), unit(-math.pi / 2)]])
    bad = _batch([[a, unit(math.pi / 2)], [a, a]])
    assert pairwise_nll(good[0][1], good, "s0", 0.1) < pairwise_nll(bad[0][1], bad, "s0", 0.1)


def test_pairwise_nll_is_asymmetric():
    vecs = [[unit(0.0), unit(0.4)], [unit(1.0)], [unit(2.5)]]
    batch = _batch(vecs)
    a, b = batch[0][1], batch[1][1]
    assert abs(pairwise_nll(a, batch, "s0", 0.1).item() - pairwise_nll(b, batch, "s0", 0.1).item()) > 1e-6


def test_pairwise_nll_errors():
    batch = _batch([[unit(0.0)], [unit(1.0)]])
    with pytest.raises(ValueError, match="positive"):
        pairwise_nll(batch[0][1], batch, "s0", 0.1)
    only = _batch([[unit(0.0), unit(1.0)]])
    with pytest.raises(ValueError, match="negative"):
        pairwise_nll(only[0][1], only, "s0", 0.1)


def test_discrimination_matches_oracle_on_random_batches():
    gen = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        vecs = [[unit(a) for a in gen.uniform(-math.pi, math.pi, 2)] for _ in range(2)]
        tau = gen.uniform(0.05, 1.0)
        got = discrimination_loss(_batch(vecs), tau).item()
        worst = max(worst, abs(got - disc_oracle(vecs, tau)))
    assert worst <= 1e-9


def test_discrimination_oracle_three_subjects():
    gen = np.random.default_rng(1)
    vecs = [[unit(a) for a in gen.uniform(-3, 3, 2)] for _ in range(3)]
    assert discrimination_loss(_batch(vecs), 0.1).item() == pytest.approx(disc_oracle(vecs, 0.1), abs=1e-10)


def test_discrimination_subject_order_invariant(rng):
    vecs = [[unit(a) for a in rng.uniform(-3, 3, 2)] for _ in range(4)]
    a = discrimination_loss(_batch(vecs), 0.1).item()
    b = discrimination_loss(_batch(vecs[::-1]), 0.1).item()
    assert a == pytest.approx(b, abs=1e-12)


def test_discrimination_decreases_with_alignment():
    # same-subject pair moves closer, every cross-subject inner product is unchanged
    e = np.eye(4)
    neg = [e[2], e[3]]

    def loss(c):
        second = c * e[0] + math.sqrt(1 - c * c) * e[1]
        return discrimination_loss(_batch([[e[0], second], neg]), 0.1).item()

    vals = [loss(c) for c in (0.0, 0.3, 0.6, 0.9)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_discrimination_preconditions():
    with pytest.raises(ValueError):
        discrimination_loss(_batch([[unit(0.0), unit(1.0)]]), 0.1)
    with pytest.raises(ValueError):
        discrimination_loss(_batch([[unit(0.0), unit(1.0)], [unit(2.0)]]), 0.1)


# -- joint objective ------------------------------------------------------------------------


def test_total_loss_examples():
    r, d = torch.tensor(1.25, dtype=torch.float64), torch.tensor(7.5, dtype=torch.float64)
    assert total_loss(r, d, 0.0) is r
    assert total_loss(r, d, 1.0).item() == 1.25 + 7.5
    assert total_loss(2.0, 3.0, 0.5) == 3.5
    with pytest.raises(ValueError):
        total_loss(1.0, 1.0, -0.1)


def test_loss_weight_ranges():
    assert LossWeights() == LossWeights(beta=0.5, lam=1.0, tau=0.1)
    for bad in (dict(beta=-0.1), dict(beta=1.1), dict(lam=-1.0), dict(tau=0.0)):
        with pytest.raises(ValueError):
            LossWeights(**bad)


# -- gradients through the toy encoder --------------------------------------------------------


@pytest.fixture
def toy_batch(toy_config):
    gen = np.random.default_rng(3)
    enc = init_encoder(toy_config, seed=5)
    d = from_array(gen.normal(size=(2, 4, 10)))
    views = {m.subject_id: make_views(m, 1, 2, gen) for m in d.maps}
    return enc, d, views


def _recon(enc, d, views):
    return sum(
        recon_loss(m, [reconstruct(enc, encode(enc, v)) for v in views[m.subject_id]], beta=0.5) for m in d.maps
    )


def _disc(enc, d, views):
    return discrimination_loss([(sid, encode(enc, v)) for sid, vs in views.items() for v in vs], tau=0.1)


def test_reconstruction_loss_gradient(toy_batch):
    enc, d, views = toy_batch
    assert_gradients_match(lambda: _recon(enc, d, views), enc)


def test_discrimination_loss_gradient(toy_batch):
    enc, d, views = toy_batch
    assert_gradients_match(lambda: _disc(enc, d, views), enc)


def test_total_loss_gradient(toy_batch):
    enc, d, views = toy_batch
    assert_gradients_match(lambda: total_loss(_recon(enc, d, views), _disc(enc, d, views), 1.0), enc)
