"""Fused numba kernels for the attention hot path.

One forward kernel takes the per-node score projections and produces the
normalized attention coefficients plus the head-wise weighted messages; the
backward kernel recomputes the cheap score arithmetic instead of storing the
pre-activation tensor, and accumulates into small per-graph buffers so no
output needs pre-zeroing.  Everything is batched over the leading axis, and
all writes are indexed by that axis, so results are deterministic regardless
of threading.

Layouts keep every inner loop on a contiguous axis: projections are (N,U,P)
with P = heads * per-head width innermost, attention is (N,U,H,U) with the
neighbor axis innermost, messages are (N,U,H,dv), and the value tensor is
consumed in a (N,H,dv,U) transpose.  The teammate mask is (B,U,U) with B
dividing N (batch index n % B), so view-replicated batches share one copy.

The float32 path uses a polynomial exp2-based exponential (relative error
~1e-7, below float32 resolution); the float64 path keeps libm exp so that
double-precision gradient checks see an exact softmax.
"""

import math

import numpy as np
from numba import njit, prange, types
from numba.extending import intrinsic

LEAKY_SLOPE = 0.2
_LOG2E = 1.4426950408889634


@intrinsic
def _bits_to_f32(typingctx, i):
    """Reinterpret an int32 bit pattern as float32 (used for fast exp2)."""
    sig = types.float32(types.int32)

    def codegen(context, builder, signature, args):
        return builder.bitcast(args[0], context.get_value_type(types.float32))

    return sig, codegen


@njit(types.float32(types.float32), inline="always", fastmath=True, cache=True)
def _fast_exp_f32(x):
    # exp(x) = 2^(x*log2(e)); split into integer/fraction, polynomial 2^f
    # branch-free so the surrounding loops stay vectorizable
    t = x * np.float32(_LOG2E)
    lo = np.float32(-126.0)
    t = t if t > lo else lo
    fi = math.floor(t)
    i = np.int32(fi)
    f = t - np.float32(fi)
    p = np.float32(1.3697664e-2)
    p = p * f + np.float32(5.1690358e-2)
    p = p * f + np.float32(2.4163845e-1)
    p = p * f + np.float32(6.9296668e-1)
    p = p * f + np.float32(9.9999994e-1)
    return p * _bits_to_f32((i + np.int32(127)) << np.int32(23))


def _forward_body(is_f32):
    exp_fn = _fast_exp_f32 if is_f32 else math.exp

    def attend_forward(S1, S2, WT, avec, Vt, mask, n_heads, att, msg):
        # S1, S2: (N,U,P); WT: (2,P); avec: (P,); Vt: (N,H,dv,U)
        # att out: (N,U,H,U); msg out: (N,U,H,dv)
        N, U, P = S1.shape
        B = mask.shape[0]
        HA = P // n_heads
        dv = Vt.shape[2]
        slope = S1.dtype.type(LEAKY_SLOPE)
        zero = S1.dtype.type(0.0)
        one = S1.dtype.type(1.0)
        for n in prange(N):
            nb = n % B
            sc = np.empty((U, P), S1.dtype)
            lg = np.empty((n_heads, U), S1.dtype)
            for u in range(U):
                for v in range(U):
                    m = mask[nb, u, v]
                    for p in range(P):  # contiguous, vectorizes
                        t = S1[n, u, p] + S2[n, v, p] + WT[m, p]
                        st = slope * t
                        lr = t if t > st else st
                        sc[v, p] = avec[p] * lr
                for h in range(n_heads):
                    base = h * HA
                    for v in range(U):
                        acc = zero
                        for j in range(HA):
                            acc += sc[v, base + j]
                        lg[h, v] = acc
                # softmax + rescale stay in the L1 buffer; att written once
                for h in range(n_heads):
                    mx = lg[h, 0]
                    for v in range(1, U):
                        if lg[h, v] > mx:
                            mx = lg[h, v]
                    z = zero
                    for v in range(U):  # contiguous
                        e = exp_fn(lg[h, v] - mx)
                        lg[h, v] = e
                        z += e
                    inv = one / z
                    for v in range(U):
                        a = lg[h, v] * inv
                        lg[h, v] = a
                        att[n, u, h, v] = a
                for h in range(n_heads):
                    for d in range(dv):
                        acc = zero
                        for v in range(U):  # contiguous dot
                            acc += lg[h, v] * Vt[n, h, d, v]
                        msg[n, u, h, d] = acc

    return attend_forward


_attend_fwd_f32 = njit(parallel=True, fastmath=True, cache=True)(_forward_body(True))
_attend_fwd_f64 = njit(parallel=True, cache=True)(_forward_body(False))


@njit(parallel=True, fastmath=True, cache=True)
def _attend_bwd(S1, S2, WT, avec, Vt, mask, n_heads, att, dmsg,
                dS1, dS2, dWT_n, da_n, dV):
    # dmsg: (N,U,H,dv); outputs need no pre-zeroing (accumulated locally,
    # stored once per graph); dV comes out in the (N,U,H,dv) layout of V
    N, U, P = S1.shape
    B = mask.shape[0]
    HA = P // n_heads
    dv = Vt.shape[2]
    slope = S1.dtype.type(LEAKY_SLOPE)
    one = S1.dtype.type(1.0)
    zero = S1.dtype.type(0.0)
    for n in prange(N):
        nb = n % B
        datt = np.empty((n_heads, U), S1.dtype)
        dlg = np.empty((n_heads, U), S1.dtype)
        ds1row = np.empty(P, S1.dtype)
        ds2 = np.zeros((U, P), S1.dtype)
        dvt = np.zeros((n_heads, dv, U), S1.dtype)
        dwt = np.zeros((2, P), S1.dtype)
        da = np.zeros(P, S1.dtype)
        for u in range(U):
            for h in range(n_heads):
                for v in range(U):
                    datt[h, v] = zero
                for d in range(dv):
                    g = dmsg[n, u, h, d]
                    for v in range(U):  # contiguous
                        datt[h, v] += g * Vt[n, h, d, v]
                        dvt[h, d, v] += g * att[n, u, h, v]
                dot = zero
                for v in range(U):
                    dot += att[n, u, h, v] * datt[h, v]
                for v in range(U):
                    dlg[h, v] = att[n, u, h, v] * (datt[h, v] - dot)
            for p in range(P):
                ds1row[p] = zero
            for v in range(U):
                m = mask[nb, u, v]
                for h in range(n_heads):
                    dl = dlg[h, v]
                    base = h * HA
                    for j in range(HA):
                        p = base + j
                        t = S1[n, u, p] + S2[n, v, p] + WT[m, p]
                        st = slope * t
                        if t > st:
                            lr = t
                            sl = one
                        else:
                            lr = st
                            sl = slope
                        c = dl * avec[p] * sl
                        ds1row[p] += c
                        ds2[v, p] += c
                        dwt[m, p] += c
                        da[p] += dl * lr
            for p in range(P):
                dS1[n, u, p] = ds1row[p]
        for v in range(U):
            for p in range(P):
                dS2[n, v, p] = ds2[v, p]
        for h in range(n_heads):
            for d in range(dv):
                for v in range(U):
                    dV[n, v, h, d] = dvt[h, d, v]
        for m in range(2):
            for p in range(P):
                dWT_n[n, m, p] = dwt[m, p]
        for p in range(P):
            da_n[n, p] = da[p]


def attend_forward(S1, S2, WT, avec, V, mask, n_heads):
    """Fused attention; returns (att (N,U,H,U), messages (N,U,H,dv), Vt).

    V comes in as (N, U, H, dv); Vt is its (N, H, dv, U) transpose, returned
    so the backward pass can reuse it.  mask is (B, U, U) with B dividing N.
    """
    N, U, P = S1.shape
    Vt = np.ascontiguousarray(V.transpose(0, 2, 3, 1))
    att = np.empty((N, U, n_heads, U), dtype=S1.dtype)
    msg = np.empty((N, U, n_heads, V.shape[3]), dtype=S1.dtype)
    fwd = _attend_fwd_f32 if S1.dtype == np.float32 else _attend_fwd_f64
    fwd(S1, S2, WT, avec, Vt, mask, n_heads, att, msg)
    return att, msg, Vt


def attend_backward(S1, S2, WT, avec, Vt, mask, n_heads, att, dmsg):
    """Gradients for (S1, S2, WT, avec, V) given d loss / d messages."""
    N, U, P = S1.shape
    dS1 = np.empty_like(S1)
    dS2 = np.empty_like(S2)
    dWT_n = np.empty((N,) + WT.shape, dtype=WT.dtype)
    da_n = np.empty((N,) + avec.shape, dtype=avec.dtype)
    dV = np.empty((N, U, n_heads, Vt.shape[2]), dtype=Vt.dtype)
    _attend_bwd(S1, S2, WT, avec, Vt, mask, n_heads, att,
                np.ascontiguousarray(dmsg), dS1, dS2, dWT_n, da_n, dV)
    return dS1, dS2, dWT_n.sum(axis=0), da_n.sum(axis=0), dV


def reference_attend(S1, S2, WT, avec, V, mask, n_heads):
    """Plain numpy restatement of the fused op (used for cross-checks).

    Returns (att (N,U,H,U), msg (N,U,H,dv)).
    """
    N, U, P = S1.shape
    if mask.shape[0] != N:  # batch mask replicated across view pairs
        mask = np.broadcast_to(mask[None], (N // mask.shape[0],) + mask.shape)
        mask = mask.reshape(N, U, U)
    scores = S1[:, :, None, :] + S2[:, None, :, :] + WT[mask]
    scores = np.where(scores >= 0, scores, LEAKY_SLOPE * scores)
    logits = (scores.reshape(N, U, U, n_heads, P // n_heads)
              * avec.reshape(n_heads, -1)).sum(axis=-1)
    logits = logits.transpose(0, 1, 3, 2)  # (N,U,H,U)
    logits -= logits.max(axis=3, keepdims=True)
    e = np.exp(logits)
    att = e / e.sum(axis=3, keepdims=True)
    msg = np.einsum("nuhv,nvhd->nuhd", att, V)
    return att, msg
