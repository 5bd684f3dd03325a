"""Private compare and the three-operand wrap protocol vs plain oracles."""

import numpy as np
import pytest

from falcon import protocols as P
from falcon.oracle import oracle_compare
from falcon.prep import DealerPrep
from falcon.rings import RingParams, bit_decompose, wrap3
from falcon.rss import share_components, share_secret
from falcon.session import ThreatModel, run_three_parties
from conftest import reconstruct_all

from test_protocols import run_shared


def _share_bits(sess, xs, params):
    bits = bit_decompose(np.asarray(xs, np.uint64), params)
    return share_secret(bits, params.p, sess.shared_rng)[sess.party.index - 1]


def test_private_compare_examples():
    params = RingParams(ell=8, p=37, fp=4)

    def job(sess):
        x = np.array([5, 0], np.uint64)
        r = np.array([3, 0], np.uint64)
        bits = _share_bits(sess, x, sess.params)
        out = P.private_compare(sess, bits, r)
        return P.reconstruct(sess, out)

    got = run_shared(params, job)[0]
    assert list(got) == [1, 1]  # 5 >= 3 and 0 >= 0


@pytest.mark.parametrize("threat", [ThreatModel.SEMI_HONEST, ThreatModel.MALICIOUS])
def test_private_compare_exhaustive_8bit(threat):
    # all x in [0, 256) against 64 targets, fresh random beta/m/shares each
    params = RingParams(ell=8, p=37, fp=4)
    xs = np.tile(np.arange(256, dtype=np.uint64), 64)
    rng = np.random.default_rng(123)
    rs = np.repeat(
        np.concatenate([rng.integers(0, 257, 60, dtype=np.uint64), [0, 255, 256, 1]]), 256
    ).astype(np.uint64)

    def job(sess):
        bits = _share_bits(sess, xs, sess.params)
        out = P.private_compare(sess, bits, rs)
        return P.reconstruct(sess, out)

    got = run_shared(params, job, threat=threat)[0]
    assert np.array_equal(got, oracle_compare(xs, rs))


def test_private_compare_reveal_blinded():
    # for fixed (x, r) the revealed product is 0 about half the time (the
    # blinding bit flips) and uniform-looking over Z_p^* otherwise; the
    # output is correct regardless
    from scipy import stats

    params = RingParams(ell=8, p=37, fp=4)
    n = 7400
    xs = np.full(n, 77, np.uint64)
    rs = np.full(n, 20, np.uint64)

    def job(sess):
        bits = _share_bits(sess, xs, sess.params)
        sink = []
        out = P.private_compare(sess, bits, rs, reveal_sink=sink)
        return P.reconstruct(sess, out), sink[0]

    got, d = run_shared(params, job)[0]
    assert np.all(got == 1)  # 77 >= 20 regardless of blinding
    zero_frac = float((d == 0).mean())
    assert 0.45 < zero_frac < 0.55
    nonzero = d[d != 0].astype(int)
    counts = np.bincount(nonzero, minlength=37)[1:]
    assert stats.chisquare(counts).pvalue > 1e-4


def test_private_compare_rounds():
    params = RingParams(ell=32, p=37, fp=13)

    def job(sess):
        xs = np.arange(8, dtype=np.uint64)
        bits = _share_bits(sess, xs, sess.params)
        r0 = sess.meter.rounds
        P.private_compare(sess, bits, np.full(8, 5, np.uint64))
        return sess.meter.rounds - r0

    rounds = run_shared(params, job)[0]
    # flip mult + product tree + reveal; inside 1.25x of 2 + log2(ell)
    assert rounds <= 1.25 * (2 + 5)


def _random_sharings(params, n, rng):
    comps = [rng.integers(0, params.L, n, dtype=np.uint64) for _ in range(3)]
    return comps


@pytest.mark.parametrize("ell", [16, 32])
def test_wrap3_matches_exact_wrap(ell):
    params = RingParams(ell=ell, p=37, fp=min(13, ell - 3))
    n = 10_000
    rng = np.random.default_rng(ell)
    comps = _random_sharings(params, n, rng)
    expect = wrap3(comps[0], comps[1], comps[2], params.L)

    def job(sess):
        a = share_components(sess.party, tuple(comps), params.L)
        theta = P.wrap3_protocol(sess, a)
        return P.reconstruct(sess, theta)

    got = run_shared(params, job)[0]
    assert np.array_equal(got, expect)


def test_wrap3_fixed_cases():
    params = RingParams(ell=8, p=37, fp=4)

    # zero components and one wrapping combo
    def job(sess):
        outs = []
        for comps in ((0, 0, 0), (200, 100, 0)):
            arr = tuple(np.uint64(c) for c in comps)
            a = share_components(sess.party, arr, params.L)
            outs.append(P.reconstruct(sess, P.wrap3_protocol(sess, a)))
        return outs

    outs = run_shared(params, job)[0]
    assert outs[0] == 0
    assert outs[1] == 1  # 300 in [256, 512)


def test_wrap3_identity_on_transcripts():
    # theta = beta1 + beta2 + beta3 + delta - eta - alpha (mod 2), per run
    params = RingParams(ell=16, p=37, fp=8)
    n = 500
    rng = np.random.default_rng(77)
    comps = _random_sharings(params, n, rng)

    def job(sess):
        a = share_components(sess.party, tuple(comps), params.L)
        theta, tr = P.wrap3_protocol(sess, a, want_transcript=True)
        return theta, tr

    res = run_three_parties(_with_dealer(params, job), params, session_seed=0)
    thetas = [r[0] for r in res]
    trs = [r[1] for r in res]
    theta = reconstruct_all(thetas)
    beta_sum = reconstruct_all([t.beta_bits for t in trs])
    eta = reconstruct_all([t.eta for t in trs])
    alpha = reconstruct_all([t.alpha for t in trs])
    delta = trs[0].delta
    assert np.array_equal(theta, (beta_sum + delta + eta + alpha) % 2)
    # and theta is the true wrap of the inputs
    assert np.array_equal(theta, wrap3(comps[0], comps[1], comps[2], params.L))


def _with_dealer(params, fn, seed=0):
    def wrapped(sess):
        sess.prep = DealerPrep(sess.party, params, seed=seed)
        return fn(sess)

    return wrapped
