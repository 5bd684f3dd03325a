"""Secure neural-network engine: forward, backward, SGD, loss gradient.

Layers evaluate batch-first: images as (B, C, H, W) shares, flat
activations as (B, D). The forward pass caches whatever the backward pass
reuses (ReLU derivative bits, maxpool one-hots, batch-norm normalized
activations and inverse sigma), mirroring the fused forward/backward
optimization of the cost model. Learning rates are powers of two; an SGD
step is a subtraction after an arithmetic shift of the gradient.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .netspec import LayerSpec, NetworkSpec, init_float_params, param_shapes, _propagate
from .numeric import divide, rescale
from .protocols import (
    _im2col,
    col2im,
    conv2d,
    drelu,
    matmul,
    maxpool_argmax,
    mult,
    relu,
    select_shares,
    truncate,
)
from .numeric import batch_norm_forward
from .rings import UINT, RingParams, encode_fixed, reduce_mod
from .rss import (
    RssShare,
    add_public,
    add_shares,
    public_share,
    scale_share,
    share_secret,
    sub_shares,
)
from .session import PartySession, open_share


class MissingCacheError(RuntimeError):
    """backward() requires the caches of the most recent forward()."""


@dataclass
class LayerState:
    params: dict = field(default_factory=dict)  # name -> RssShare
    cache: dict = field(default_factory=dict)   # forward intermediates


@dataclass
class NetState:
    net: NetworkSpec
    layers: list  # of LayerState


def transpose(x: RssShare) -> RssShare:
    return RssShare(x.lo.T, x.hi.T, x.mod)


def init_state(sess: PartySession, net: NetworkSpec, float_params: dict | None = None,
               seed: int = 0) -> NetState:
    """Share the (possibly imported) float parameters under fixed-point encoding."""
    if float_params is None:
        float_params = init_float_params(net, seed)
    layers = []
    shape = tuple(net.input_shape)
    for i, layer in enumerate(net.layers):
        st = LayerState()
        for name in param_shapes(layer, shape):
            raw = encode_fixed(float_params[f"{i}.{name}"], sess.params)
            st.params[name] = share_secret(raw, sess.params.L, sess.shared_rng)[sess.party.index - 1]
        layers.append(st)
        shape = _propagate(layer, shape, i)
    return NetState(net, layers)


# ---------------------------------------------------------------------------
# forward


def forward(sess: PartySession, state: NetState, batch: RssShare) -> RssShare:
    """Secure forward pass; returns logits (B, classes) and fills caches."""
    x = batch
    if len(state.net.input_shape) == 1 and x.lo.ndim != 2:
        x = x.reshape(x.shape[0], -1)
    for layer, st in zip(state.net.layers, state.layers):
        st.cache = {}
        x = _layer_forward(sess, layer, st, x)
    if x.lo.ndim > 2:
        x = x.reshape(x.shape[0], -1)
    return x


def _layer_forward(sess: PartySession, layer: LayerSpec, st: LayerState, x: RssShare) -> RssShare:
    if layer.kind == "fc":
        if x.lo.ndim > 2:
            x = x.reshape(x.shape[0], -1)
        st.cache["a_in"] = x
        out = matmul(sess, x, st.params["w"], truncate_after=True)
        return add_shares(out, _row_broadcast(st.params["b"], out.shape))
    if layer.kind == "conv":
        st.cache["a_in"] = x
        return conv2d(sess, x, st.params["w"], st.params["b"],
                      stride=layer.stride, padding=layer.pad)
    if layer.kind == "relu":
        bits = drelu(sess, x)
        st.cache["drelu"] = bits
        zero = public_share(sess.party, np.uint64(0), x.mod, shape=x.shape)
        return select_shares(sess, zero, x, bits)
    if layer.kind == "maxpool":
        B, C, H, W = x.shape
        Ho = (H - layer.window) // layer.stride + 1
        Wo = (W - layer.window) // layer.stride + 1
        windows = _pool_windows(x, layer.window, layer.stride, Ho, Wo)
        mx, onehot = maxpool_argmax(sess, windows)
        st.cache["onehot"] = onehot
        st.cache["in_shape"] = (B, C, H, W)
        return mx.reshape(B, C, Ho, Wo)
    if layer.kind == "bn":
        grouped, restore = _channels_first(x)
        out, z, inv = batch_norm_forward(sess, grouped, st.params["gamma"],
                                         st.params["beta"], want_cache=True)
        st.cache["z"] = z
        st.cache["inv"] = inv
        st.cache["m"] = grouped.shape[-1]
        return restore(out)
    raise ValueError(f"unknown layer kind {layer.kind!r}")


def _row_broadcast(b: RssShare, shape) -> RssShare:
    return RssShare(np.broadcast_to(b.lo, shape), np.broadcast_to(b.hi, shape), b.mod)


def _pool_windows(x: RssShare, window: int, stride: int, Ho: int, Wo: int) -> RssShare:
    # (B, C, Ho, Wo, window*window), pure indexing
    def gather(a):
        B, C, H, W = a.shape
        out = np.empty((B, C, Ho, Wo, window * window), dtype=UINT)
        k = 0
        for i in range(window):
            for j in range(window):
                out[..., k] = a[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
                k += 1
        return out

    return RssShare(gather(x.lo), gather(x.hi), x.mod)


def _channels_first(x: RssShare):
    """Group activations per channel/feature: (C, B*spatial) plus a restorer."""
    if x.lo.ndim == 2:  # (B, D) -> (D, B)
        grouped = transpose(x)

        def restore(y: RssShare) -> RssShare:
            return transpose(y)

        return grouped, restore
    B, C, H, W = x.shape

    def to_grouped(a):
        return a.transpose(1, 0, 2, 3).reshape(C, B * H * W)

    def from_grouped(a):
        return a.reshape(C, B, H, W).transpose(1, 0, 2, 3)

    grouped = RssShare(to_grouped(x.lo), to_grouped(x.hi), x.mod)

    def restore(y: RssShare) -> RssShare:
        return RssShare(from_grouped(y.lo), from_grouped(y.hi), y.mod)

    return grouped, restore


# ---------------------------------------------------------------------------
# backward


def backward(sess: PartySession, state: NetState, loss_grad: RssShare) -> dict:
    """Chain rule through the cached forward pass; returns {layer.param: grad}."""
    grads: dict = {}
    delta = loss_grad
    for i in range(len(state.net.layers) - 1, -1, -1):
        layer = state.net.layers[i]
        st = state.layers[i]
        if layer.kind != "bn" and layer.kind in ("fc", "conv") and "a_in" not in st.cache:
            raise MissingCacheError("forward() must run before backward()")
        delta = _layer_backward(sess, layer, st, delta, grads, i)
    return grads


def _layer_backward(sess: PartySession, layer: LayerSpec, st: LayerState, delta: RssShare,
                    grads: dict, idx: int) -> RssShare:
    params = sess.params
    if layer.kind == "fc":
        if delta.lo.ndim > 2:
            delta = delta.reshape(delta.shape[0], -1)
        a_in = st.cache["a_in"]
        grads[f"{idx}.w"] = matmul(sess, transpose(a_in), delta, truncate_after=True)
        grads[f"{idx}.b"] = _sum_rows(delta)
        return matmul(sess, delta, transpose(st.params["w"]), truncate_after=True)
    if layer.kind == "conv":
        a_in = st.cache["a_in"]
        B, C, H, W = a_in.shape
        Cout = layer.out_ch
        F, S, Pd = layer.kernel, layer.stride, layer.pad
        Ho = (H - F + 2 * Pd) // S + 1
        Wo = (W - F + 2 * Pd) // S + 1
        if delta.lo.ndim == 2:
            delta = delta.reshape(B, Cout, Ho, Wo)
        # delta as (Cout, B*Ho*Wo)
        dmat = RssShare(
            delta.lo.transpose(1, 0, 2, 3).reshape(Cout, -1),
            delta.hi.transpose(1, 0, 2, 3).reshape(Cout, -1),
            delta.mod,
        )
        cols = RssShare(_im2col(a_in.lo, F, S, Pd, Ho, Wo), _im2col(a_in.hi, F, S, Pd, Ho, Wo), a_in.mod)
        dw = matmul(sess, dmat, transpose(cols), truncate_after=True)
        grads[f"{idx}.w"] = dw.reshape(Cout, C, F, F)
        grads[f"{idx}.b"] = _sum_last(dmat)
        dcols = matmul(sess, transpose(st.params["w"].reshape(Cout, C * F * F)), dmat,
                       truncate_after=True)
        dx_lo = col2im(dcols.lo, (B, C, H, W), F, S, Pd, a_in.mod)
        dx_hi = col2im(dcols.hi, (B, C, H, W), F, S, Pd, a_in.mod)
        return RssShare(dx_lo, dx_hi, a_in.mod)
    if layer.kind == "relu":
        if "drelu" not in st.cache:
            raise MissingCacheError("relu backward needs the cached derivative bits")
        bits = st.cache["drelu"]
        if bits.shape != delta.shape:
            delta = delta.reshape(bits.shape)
        zero = public_share(sess.party, np.uint64(0), delta.mod, shape=delta.shape)
        return select_shares(sess, zero, delta, bits)
    if layer.kind == "maxpool":
        if "onehot" not in st.cache:
            raise MissingCacheError("maxpool backward needs the cached one-hots")
        onehot = st.cache["onehot"]  # (B, C, Ho, Wo, F*F), integer 0/1
        B, C, H, W = st.cache["in_shape"]
        if delta.lo.ndim == 2:
            delta = delta.reshape(onehot.shape[:-1])
        routed = mult(sess, onehot, _expand_last(delta, onehot.shape))
        # scatter back (adjoint of the window gather)
        def scatter(a):
            out = np.zeros((B, C, H, W), dtype=UINT)
            k = 0
            with np.errstate(over="ignore"):
                for i in range(layer.window):
                    for j in range(layer.window):
                        Ho, Wo = a.shape[2], a.shape[3]
                        out[:, :, i : i + layer.stride * Ho : layer.stride,
                            j : j + layer.stride * Wo : layer.stride] += a[..., k]
                        k += 1
            return reduce_mod(out, delta.mod)

        return RssShare(scatter(routed.lo), scatter(routed.hi), delta.mod)
    if layer.kind == "bn":
        return _bn_backward(sess, layer, st, delta, grads, idx)
    raise ValueError(f"unknown layer kind {layer.kind!r}")


def _bn_backward(sess: PartySession, layer: LayerSpec, st: LayerState, delta: RssShare,
                 grads: dict, idx: int) -> RssShare:
    """Standard batch-norm gradient from the cached z and 1/sigma.

    dx = (gamma * inv / m) * (m*dy - sum(dy) - z * sum(dy*z))
    """
    params = sess.params
    fp = params.fp
    if "z" not in st.cache:
        raise MissingCacheError("bn backward needs the cached normalized activations")
    z, inv, m = st.cache["z"], st.cache["inv"], st.cache["m"]
    grouped, restore = _channels_first(delta)
    dy = grouped  # (C, m)
    dyz = truncate(sess, mult(sess, dy, z), fp)
    grads[f"{idx}.gamma"] = _sum_last(dyz)
    grads[f"{idx}.beta"] = _sum_last(dy)
    if m & (m - 1):
        raise ValueError("bn training requires a power-of-two group size")
    shift = int(np.log2(m))
    sum_dy = _sum_last(dy)
    sum_dyz = _sum_last(dyz)
    t = sub_shares(scale_share(np.uint64(m), dy), _expand_last(sum_dy, dy.shape))
    zs = truncate(sess, mult(sess, z, _expand_last(sum_dyz, z.shape)), fp)
    t = sub_shares(t, zs)
    g_inv = truncate(sess, mult(sess, st.params["gamma"], inv), fp)  # (C,)
    out = truncate(sess, mult(sess, _expand_last(g_inv, t.shape), t), fp + shift)
    return restore(out)


def _sum_rows(x: RssShare) -> RssShare:
    return RssShare(
        reduce_mod(x.lo.sum(axis=0, dtype=np.uint64), x.mod),
        reduce_mod(x.hi.sum(axis=0, dtype=np.uint64), x.mod),
        x.mod,
    )


def _sum_last(x: RssShare) -> RssShare:
    return RssShare(
        reduce_mod(x.lo.sum(axis=-1, dtype=np.uint64), x.mod),
        reduce_mod(x.hi.sum(axis=-1, dtype=np.uint64), x.mod),
        x.mod,
    )


def _expand_last(x: RssShare, shape) -> RssShare:
    return RssShare(
        np.broadcast_to(x.lo[..., None], shape),
        np.broadcast_to(x.hi[..., None], shape),
        x.mod,
    )


# ---------------------------------------------------------------------------
# SGD and the loss gradient


def sgd_step(sess: PartySession, state: NetState, grads: dict, lr_shift: int):
    """w <- w - grad / 2^{lr_shift} (power-of-two learning rate).

    The shift rounds to nearest: a floor here would bias every weight
    downward by half an ulp per step and destabilize long runs.
    """
    names = []
    parts = []
    for i, st in enumerate(state.layers):
        for name in st.params:
            g = grads.get(f"{i}.{name}")
            if g is None:
                continue
            names.append((i, name))
            parts.append(g)
    if not parts:
        return
    flat = _stack_flat(parts)
    stepped = rescale(sess, flat, np.int64(lr_shift), nearest=True)
    offset = 0
    for (i, name), g in zip(names, parts):
        n = int(np.prod(g.shape, dtype=int))
        step = stepped[offset : offset + n].reshape(g.shape)
        offset += n
        state.layers[i].params[name] = sub_shares(state.layers[i].params[name], step)


def _stack_flat(shares: list[RssShare]) -> RssShare:
    lo = np.concatenate([s.lo.reshape(-1) for s in shares])
    hi = np.concatenate([s.hi.reshape(-1) for s in shares])
    return RssShare(lo, hi, shares[0].mod)


def loss_grad_approx(sess: PartySession, logits: RssShare, onehot: np.ndarray,
                     scale_shift: int = 0) -> RssShare:
    """delta = (ASM(logits) - onehot) / 2^{scale_shift}.

    ASM(x)_i = relu(x_i)/sum_j relu(x_j); the all-nonpositive fallback
    (uniform 1/classes) is selected obliviously, so no sample-dependent
    branching happens in the clear. scale_shift carries the batch-mean
    factor of the loss (and any extra damping) at nearest rounding,
    keeping batch-summed backward products inside the safe envelope.
    """
    params = sess.params
    fp = params.fp
    B, classes = logits.shape
    r = relu(sess, logits)
    total = _sum_last(r)  # (B,)
    pos = drelu(sess, add_public(sess.party, total, reduce_mod(-1, params.L)))
    one = public_share(sess.party, np.uint64(1 << fp), params.L, shape=(B,))
    denom = select_shares(sess, one, total, pos)
    recip = divide(sess, one, denom, a_max_bits=fp + 1)
    probs = truncate(sess, mult(sess, r, _expand_last(recip, r.shape)), fp)
    uniform = public_share(sess.party, np.uint64(round((1 << fp) / classes)),
                           params.L, shape=r.shape)
    pos_b = RssShare(
        np.broadcast_to(pos.lo[..., None], r.shape),
        np.broadcast_to(pos.hi[..., None], r.shape),
        2,
    )
    phat = select_shares(sess, uniform, probs, pos_b)
    onehot_raw = reduce_mod(-encode_fixed(np.asarray(onehot, np.float64), params).astype(np.int64),
                            params.L)
    delta = add_public(sess.party, phat, onehot_raw)
    if scale_shift:
        delta = rescale(sess, delta, np.int64(scale_shift), nearest=True)
    return delta


# ---------------------------------------------------------------------------
# training loop (the fx twin replays the same schedule bit for bit)


def train_secure(sess: PartySession, net: NetworkSpec, images_raw: np.ndarray,
                 labels: np.ndarray, iters: int, batch: int, lr_shift: int = 8,
                 delta_shift: int = 2, batch_seed: int = 2024,
                 float_params: dict | None = None, init_seed: int = 3,
                 log=None, eval_every: int = 0, eval_cb=None) -> NetState:
    """Secure SGD over a public-to-the-operator dataset (harness convention).

    Batch order, initialization and every rounding are deterministic, so
    the plaintext fixed-point twin trained with the same seeds must end
    with bit-identical weights.
    """
    state = init_state(sess, net, float_params, seed=init_seed)
    rng = np.random.default_rng(batch_seed)
    n = len(images_raw)
    for it in range(iters):
        idx = rng.choice(n, size=batch, replace=False)
        xb = share_secret(images_raw[idx], sess.params.L, sess.shared_rng)[sess.party.index - 1]
        onehot = np.eye(net.classes)[labels[idx]]
        logits = forward(sess, state, xb)
        delta = loss_grad_approx(sess, logits, onehot, scale_shift=delta_shift)
        grads = backward(sess, state, delta)
        sgd_step(sess, state, grads, lr_shift)
        if log and (it + 1) % log == 0 and sess.party.index == 1:
            print(f"  secure sgd iteration {it + 1}/{iters}")
        if eval_every and eval_cb is not None and (it + 1) % eval_every == 0:
            eval_cb(it + 1, state)
    return state


def open_params(sess: PartySession, state: NetState) -> dict:
    from .session import open_share

    return {
        f"{i}.{name}": open_share(sess, st.params[name])
        for i, st in enumerate(state.layers)
        for name in st.params
    }


def secure_predict(sess: PartySession, state: NetState, images_raw: np.ndarray,
                   batch: int = 250) -> np.ndarray:
    """Argmax predictions over a public evaluation slice."""
    from .rings import signed

    outs = []
    for k in range(0, len(images_raw), batch):
        xb = share_secret(images_raw[k : k + batch], sess.params.L,
                          sess.shared_rng)[sess.party.index - 1]
        logits = open_share(sess, forward(sess, state, xb))
        outs.append(signed(logits, sess.params).argmax(axis=1))
    return np.concatenate(outs)


# ---------------------------------------------------------------------------
# checkpoints: binary ring tensors with a shape header


CKPT_MAGIC = b"FALCKPT1"


def save_checkpoint(path: str, raw_params: dict, params: RingParams):
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<BBH", params.ell, params.fp, params.p))
        f.write(struct.pack("<I", len(raw_params)))
        for name in sorted(raw_params):
            arr = np.ascontiguousarray(raw_params[name], UINT)
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for s in arr.shape:
                f.write(struct.pack("<I", s))
            f.write(arr.astype("<u8").tobytes())


def load_checkpoint(path: str) -> tuple[dict, RingParams]:
    with open(path, "rb") as f:
        if f.read(8) != CKPT_MAGIC:
            raise FormatError("not a ring checkpoint file")
        ell, fp, p = struct.unpack("<BBH", f.read(4))
        params = RingParams(ell=ell, p=p, fp=fp)
        (count,) = struct.unpack("<I", f.read(4))
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode()
            (nd,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(nd))
            n = int(np.prod(shape, dtype=int))
            out[name] = np.frombuffer(f.read(8 * n), dtype="<u8").astype(UINT).reshape(shape)
        return out, params


class FormatError(ValueError):
    pass


def import_float_checkpoint(path: str, params: RingParams) -> dict:
    """Load a float .npz checkpoint, quantizing to the session's fixed point."""
    data = np.load(path)
    return {name: encode_fixed(data[name], params) for name in data.files}
