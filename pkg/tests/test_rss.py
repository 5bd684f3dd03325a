"""Replicated sharing: creation, linear homomorphism, PRF randomness."""

import numpy as np
import pytest
from scipy import stats

from falcon.rings import RingError, add_mod
from falcon.rss import (
    PartyId,
    PrfState,
    RssShare,
    add_shares,
    linear_combine,
    local_bit_share,
    public_share,
    scale_share,
    share_secret,
    zero_randomness_2of3,
    zero_randomness_3of3,
)
from conftest import reconstruct_all


def _make_prfs(seed=0):
    seeds = PrfState.setup_seeds(seed)
    return [PrfState.from_seeds(seeds[i - 1], seeds[i - 2]) for i in (1, 2, 3)]


def test_party_id_cycles():
    p = PartyId(1)
    assert p.next.index == 2 and p.prev.index == 3
    assert PartyId(3).next.index == 1
    for i in (1, 2, 3):
        assert PartyId(i).next.next.next == PartyId(i)


def test_share_reconstruct():
    rng = np.random.default_rng(0)
    for x in (2, 0, 255):
        shares = share_secret(np.uint64(x), 256, rng)
        assert reconstruct_all(shares) == x


def test_share_components_uniformish():
    # a single party's pair of a fresh sharing of a fixed secret is uniform
    rng = np.random.default_rng(1)
    los = np.array([share_secret(np.uint64(7), 256, rng)[0].lo for _ in range(4000)])
    counts = np.bincount(los.astype(int), minlength=256)
    assert stats.chisquare(counts).pvalue > 1e-4


def test_linear_combine():
    rng = np.random.default_rng(2)
    mod = 2**32
    xs = share_secret(np.uint64(2), mod, rng)
    ys = share_secret(np.uint64(3), mod, rng)
    out = [linear_combine(PartyId(i + 1), 1, 1, 0, xs[i], ys[i], mod) for i in range(3)]
    assert reconstruct_all(out) == 5
    # constant injection: a = b = 0, c = 7
    const = [public_share(PartyId(i + 1), np.uint64(7), mod) for i in range(3)]
    assert reconstruct_all(const) == 7
    # negation of x = 2
    neg = [scale_share(mod - 1, xs[i]) for i in range(3)]
    assert reconstruct_all(neg) == mod - 2


def test_linear_homomorphism_exhaustive_small():
    # reconstruction commutes with arbitrary linear sequences
    # (exhaustive over the smallest supported ring, ell = 8)
    mod = 256
    rng = np.random.default_rng(3)
    for x in range(0, 256, 17):
        for y in range(0, 256, 23):
            xs = share_secret(np.uint64(x), mod, rng)
            ys = share_secret(np.uint64(y), mod, rng)
            out = [linear_combine(PartyId(i + 1), 3, 5, 11, xs[i], ys[i], mod) for i in range(3)]
            assert reconstruct_all(out) == (3 * x + 5 * y + 11) % 256


def test_modulus_mixing_rejected():
    rng = np.random.default_rng(4)
    xs = share_secret(np.uint64(1), 256, rng)
    ys = share_secret(np.uint64(1), 37, rng)
    with pytest.raises(RingError):
        add_shares(xs[0], ys[0])


def test_zero_randomness_3of3_sums_to_zero():
    prfs = _make_prfs()
    vals = [zero_randomness_3of3(p, 64, 2**32) for p in prfs]
    total = add_mod(add_mod(vals[0], vals[1], 2**32), vals[2], 2**32)
    assert np.all(total == 0)


def test_zero_randomness_3of3_deterministic():
    a = zero_randomness_3of3(_make_prfs()[0], 16, 2**32)
    b = zero_randomness_3of3(_make_prfs()[0], 16, 2**32)
    assert np.array_equal(a, b)


def test_zero_randomness_3of3_independent_draws():
    prf = _make_prfs()[0]
    draws = prf.with_next.draw_mod(10**4, 256)
    counts = np.bincount(draws.astype(int), minlength=256)
    assert stats.chisquare(counts).pvalue > 1e-4
    again = prf.with_next.draw_mod(10**4, 256)
    assert not np.array_equal(draws, again)


def test_zero_randomness_2of3_replicated_layout():
    # adjacent components agree across parties and the triple is a valid RSS
    prfs = _make_prfs()
    shares = [zero_randomness_2of3(p, 32, 2**32) for p in prfs]
    reconstruct_all(shares)  # asserts hi_i == lo_{i+1}


def test_local_bit_share():
    mod = 2
    for comp, bit in ((1, 1), (2, 0), (3, 1)):
        shares = [local_bit_share(PartyId(i), comp, np.uint64(bit), mod) for i in (1, 2, 3)]
        assert reconstruct_all(shares) == bit
    # XOR of three single-component sharings
    b = [1, 0, 1]
    shares = [
        RssShare(
            sum(local_bit_share(PartyId(i), j + 1, np.uint64(b[j]), 2).lo for j in range(3)) % 2,
            sum(local_bit_share(PartyId(i), j + 1, np.uint64(b[j]), 2).hi for j in range(3)) % 2,
            2,
        )
        for i in (1, 2, 3)
    ]
    assert reconstruct_all(shares) == (b[0] ^ b[1] ^ b[2])
