"""The comparison stack: private compare, the wrap bit, DReLU and ReLU.

Comparisons never reveal operands: private compare multiplies masked
per-bit differences into a single blinded product, the wrap protocol
turns share-carry algebra into a sign bit, and ReLU is one oblivious
select on top. Round counts follow 5 + log2(ell).
"""

import numpy as np

from falcon import protocols as P
from falcon.prep import DealerPrep
from falcon.rings import RingParams, bit_decompose, decode_fixed, encode_fixed
from falcon.rss import share_secret
from falcon.session import run_three_parties

params = RingParams(ell=32, p=37, fp=13)


def job(sess):
    sess.prep = DealerPrep(sess.party, params, seed=1)

    # private compare: shared bits of x against a public threshold
    xs = np.array([3, 41, 100, 100], np.uint64)
    ts = np.array([10, 17, 100, 101], np.uint64)
    bits = share_secret(bit_decompose(xs, params), params.p,
                        sess.shared_rng)[sess.party.index - 1]
    ge = P.reconstruct(sess, P.private_compare(sess, bits, ts))

    # ReLU over a fixed-point vector, with the round meter
    vals = encode_fixed(np.array([-3.5, -0.25, 0.0, 0.25, 7.75]), params)
    a = share_secret(vals, params.L, sess.shared_rng)[sess.party.index - 1]
    r0 = sess.meter.rounds
    out = P.relu(sess, a)
    relu_rounds = sess.meter.rounds - r0
    return ge, P.reconstruct(sess, out), relu_rounds


if __name__ == "__main__":
    ge, relu_vals, rounds = run_three_parties(job, params, session_seed=7)[0]
    print("x >= t for (3,10) (41,17) (100,100) (100,101):", list(ge))
    print("relu(-3.5, -0.25, 0, 0.25, 7.75) =", list(decode_fixed(relu_vals, params)))
    print(f"relu used {rounds} rounds = 5 + log2({params.ell})")
