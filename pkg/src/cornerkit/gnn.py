"""Equivariant encoder: GATv2 message passing, frame averaging, group convolutions.

The encoder maintains one latent matrix per reflection element (a view
bundle).  Three symmetry modes share one base-layer zoo:

- ``none``: every view runs through the plain base stack independently;
  downstream heads read only the identity view.
- ``frame_averaging``: same independent stack; heads average the four views.
- ``group_convolution``: each layer recombines views.  The published
  recombination sums base(H_h || H_{g^-1 h}) over h, but for the abelian
  reflection group that expression is the same for every transformed input
  (an autocorrelation), which would make every view orbit-invariant and
  break both the required view-permutation equivariance and the equivariant
  generation head.  We therefore pin the first slot to the output view:

      H'_g = 1/4 * sum_h base(H_g || H_h, E, globals)

  which is exactly view-permutation equivariant (transforming the input
  permutes the views) and reduces to base(H_id || H_id) for the degenerate
  one-element group.

Edge and global features are reflection-invariant, so all views share them.

Batched internals flatten (views x batch) into the leading axis; the fused
attention kernel does the per-pair work.  View reductions go through
``klein_sum`` ordering, which makes frame-averaged outputs bit-exactly
invariant under reflection rather than merely within float tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Value, ShapeError, _track
from .cornergraph import D2, D2Element, CornerGraph, apply, apply_to_features, klein_sum

BASE_LAYERS = ("deepsets", "mpnn", "gatv2")
SYMMETRY_MODES = ("none", "frame_averaging", "group_convolution")


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture knobs; latent width and head count follow the task spec."""

    layer_count: int
    base_layer: str = "gatv2"
    symmetry_mode: str = "group_convolution"
    node_dim: int = 8
    global_dim: int = 0
    latent_dim: int = 4
    heads: int = 8
    attention_hidden: int = 2   # per-head hidden width of the attention MLP
    phi_hidden: int = 16
    mpnn_hidden: int = 16

    def __post_init__(self):
        if self.layer_count < 1:
            raise ValueError("layer_count must be >= 1")
        if self.base_layer not in BASE_LAYERS:
            raise ValueError(f"unknown base_layer {self.base_layer!r}")
        if self.symmetry_mode not in SYMMETRY_MODES:
            raise ValueError(f"unknown symmetry_mode {self.symmetry_mode!r}")
        if self.symmetry_mode == "group_convolution" and self.base_layer != "gatv2":
            raise ValueError("group convolutions require the gatv2 base layer")

    @property
    def score_width(self):
        return self.heads * self.attention_hidden

    def layer_input_dim(self, index):
        d = self.node_dim if index == 0 else self.latent_dim
        return 2 * d if self.symmetry_mode == "group_convolution" else d


@dataclass
class ViewBundle:
    """The four reflection-indexed latent matrices."""

    views: dict

    def __post_init__(self):
        if set(self.views) != set(D2):
            raise ValueError("a view bundle needs all four reflection views")
        shapes = {v.shape for v in self.views.values()}
        if len(shapes) != 1:
            raise ValueError(f"view shapes differ: {shapes}")

    def __getitem__(self, g):
        return self.views[g]

    @property
    def identity(self):
        return self.views[D2Element.ID]


def glorot(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_layer_params(cfg: EncoderConfig, index, rng, dtype=np.float64):
    """Seeded uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
    din = cfg.layer_input_dim(index)
    dv = cfg.latent_dim
    P = cfg.score_width
    p = {}
    if cfg.base_layer == "gatv2":
        p["W1"] = glorot(rng, (din, P), din, P, dtype)
        p["W2"] = glorot(rng, (din, P), din, P, dtype)
        p["We"] = glorot(rng, (2, P), 2, P, dtype)
        if cfg.global_dim:
            p["Wg"] = glorot(rng, (cfg.global_dim, P), cfg.global_dim, P, dtype)
        p["a"] = glorot(rng, (P,), cfg.attention_hidden, 1, dtype)
        p["Wpsi"] = glorot(rng, (din, cfg.heads * dv), din, dv, dtype)
    elif cfg.base_layer == "deepsets":
        p["Wpsi"] = glorot(rng, (din, dv), din, dv, dtype)
    else:  # mpnn
        pin = 2 * din + 2 + cfg.global_dim
        p["psi_w1"] = glorot(rng, (pin, cfg.mpnn_hidden), pin, cfg.mpnn_hidden, dtype)
        p["psi_b1"] = np.zeros(cfg.mpnn_hidden, dtype)
        p["psi_w2"] = glorot(rng, (cfg.mpnn_hidden, dv), cfg.mpnn_hidden, dv, dtype)
        p["psi_b2"] = np.zeros(dv, dtype)
    fin = din + dv
    p["phi_w1"] = glorot(rng, (fin, cfg.phi_hidden), fin, cfg.phi_hidden, dtype)
    p["phi_b1"] = np.zeros(cfg.phi_hidden, dtype)
    p["phi_w2"] = glorot(rng, (cfg.phi_hidden, dv), cfg.phi_hidden, dv, dtype)
    p["phi_b2"] = np.zeros(dv, dtype)
    return p


def init_encoder_params(cfg: EncoderConfig, rng, dtype=np.float64):
    """name -> Value map for the whole stack, in deterministic order."""
    params = {}
    for i in range(cfg.layer_count):
        for name, arr in init_layer_params(cfg, i, rng, dtype).items():
            params[f"enc.l{i}.{name}"] = Value(arr, requires_grad=True)
    return params


# -- fused attention as a differentiation primitive ---------------------------


def gatv2_attention(S1, S2, WT, avec, V, mask, n_heads):
    """Scores -> per-neighborhood softmax -> weighted sum of values.

    S1, S2: (N,U,P) score projections of receiver/sender nodes; WT: (2,P)
    teammate/opponent rows; avec: (P,); V: (N,U,H,dv) values; mask: (N,U,U)
    uint8 teammate indicator.  Returns (messages Value (N,U,H,dv),
    attention array (N,U,H,U)).
    """
    att, msg, Vt = kernels.attend_forward(
        S1.data, S2.data, WT.data, avec.data, V.data, mask, n_heads)
    cache = {}

    def rule_for(idx):
        def rule(g):
            if cache.get("g") is not g:
                cache["g"] = g
                cache["grads"] = kernels.attend_backward(
                    S1.data, S2.data, WT.data, avec.data, Vt, mask, n_heads, att, g)
            return cache["grads"][idx]
        return rule

    out = _track(msg, (S1, rule_for(0)), (S2, rule_for(1)), (WT, rule_for(2)),
                 (avec, rule_for(3)), (V, rule_for(4)))
    return out, att


def _view_pairs(Hs):
    """(4,B,U,d) -> (16,B,U,2d): first slot pinned per output view, second sweeps."""
    first = np.repeat(Hs.data, 4, axis=0)
    second = np.tile(Hs.data, (4, 1, 1, 1))
    data = np.concatenate([first, second], axis=-1)
    d = Hs.shape[-1]

    def rule(g):
        g5 = g.reshape((4, 4) + g.shape[1:])
        return g5[..., :d].sum(axis=1) + g5[..., d:].sum(axis=0)

    return _track(data, (Hs, rule))


def _klein_mix(out16):
    """(16,B,U,dv) -> (4,B,U,dv): order-canonical quarter-sum over the sweep."""
    o = out16.data.reshape((4, 4) + out16.shape[1:])
    data = ((o[:, 0] + o[:, 3]) + (o[:, 1] + o[:, 2])) * 0.25

    def rule(g):
        gg = 0.25 * g
        return np.stack([gg, gg, gg, gg], axis=1).reshape(out16.shape)

    return _track(data, (out16, rule))


def klein_mean_views(Hv):
    """(4,B,U,dv) Value -> (B,U,dv): bit-exactly reflection-stable view mean."""
    o = Hv.data
    data = ((o[0] + o[3]) + (o[1] + o[2])) * 0.25

    def rule(g):
        gg = 0.25 * g
        return np.stack([gg, gg, gg, gg], axis=0)

    return _track(data, (Hv, rule))


def _mlp2(x2d, w1, b1, w2, b2):
    h = ad.leaky_relu(ad.add(ad.matmul(x2d, w1), b1))
    return ad.add(ad.matmul(h, w2), b2)


def _phi(x2d, msg2d, din, params, prefix):
    """Two-layer update on concat(x, message) without materializing the concat."""
    w1 = params[f"{prefix}.phi_w1"]
    pre = ad.add(ad.add(ad.matmul(x2d, w1[:din]), ad.matmul(msg2d, w1[din:])),
                 params[f"{prefix}.phi_b1"])
    h = ad.leaky_relu(pre)
    return ad.add(ad.matmul(h, params[f"{prefix}.phi_w2"]), params[f"{prefix}.phi_b2"])


def _base_gatv2(X, mask, Sg, view_count, params, prefix, cfg):
    """One GATv2 layer on a flattened (N,U,din) batch; N = view_count * B.

    mask is (B,U,U); the kernel replicates it across the view axis.
    """
    N, U, din = X.shape
    P = cfg.score_width
    dv = cfg.latent_dim
    X2 = ad.reshape(X, (N * U, din))
    S1 = ad.reshape(ad.matmul(X2, params[f"{prefix}.W1"]), (N, U, P))
    S2 = ad.reshape(ad.matmul(X2, params[f"{prefix}.W2"]), (N, U, P))
    V = ad.reshape(ad.matmul(X2, params[f"{prefix}.Wpsi"]), (N, U, cfg.heads, dv))
    if Sg is not None:
        B = N // view_count
        S1 = ad.reshape(
            ad.add(ad.reshape(S1, (view_count, B, U, P)),
                   ad.reshape(Sg, (1, B, 1, P))),
            (N, U, P))
    msg, att = gatv2_attention(S1, S2, params[f"{prefix}.We"],
                               params[f"{prefix}.a"], V, mask, cfg.heads)
    msg_mean = ad.mean(msg, axis=2)  # heads combined by averaging
    out = _phi(X2, ad.reshape(msg_mean, (N * U, dv)), din, params, prefix)
    return ad.reshape(out, (N, U, dv)), att


def _base_deepsets(X, params, prefix, cfg):
    """Singleton neighborhood: message is psi of the node itself."""
    N, U, din = X.shape
    X2 = ad.reshape(X, (N * U, din))
    msg = ad.matmul(X2, params[f"{prefix}.Wpsi"])
    out = _phi(X2, msg, din, params, prefix)
    return ad.reshape(out, (N, U, cfg.latent_dim))


def _base_mpnn(X, mask, globals_np, params, prefix, cfg):
    """Full pairwise messages psi(h_u, h_v, e_vu, g) with max aggregation."""
    N, U, din = X.shape
    if mask.shape[0] != N:
        mask = _tile_mask(mask, N // mask.shape[0])
    Xu = ad.reshape(X, (N, U, 1, din))
    Xv = ad.reshape(X, (N, 1, U, din))
    ones_u = np.ones((1, 1, U, 1), dtype=X.dtype)
    ones_v = np.ones((1, U, 1, 1), dtype=X.dtype)
    pair = [ad.mul(Xu, Value(ones_u)), ad.mul(Xv, Value(ones_v))]
    e = np.empty((N, U, U, 2), dtype=X.dtype)
    e[..., 0] = mask
    e[..., 1] = 1.0 - mask
    pair.append(Value(e))
    if globals_np is not None:
        g = np.broadcast_to(globals_np[:, None, None, :], (N, U, U, globals_np.shape[1]))
        pair.append(Value(np.ascontiguousarray(g, dtype=X.dtype)))
    stacked = ad.concat(pair, axis=-1)
    psi = _mlp2(ad.reshape(stacked, (N * U * U, stacked.shape[-1])),
                params[f"{prefix}.psi_w1"], params[f"{prefix}.psi_b1"],
                params[f"{prefix}.psi_w2"], params[f"{prefix}.psi_b2"])
    msg = ad.max_(ad.reshape(psi, (N, U, U, cfg.latent_dim)), axis=2)
    out = _phi(ad.reshape(X, (N * U, din)), ad.reshape(msg, (N * U, cfg.latent_dim)),
               din, params, prefix)
    return ad.reshape(out, (N, U, cfg.latent_dim))


def _base_forward(X, mask, globals_np, Sg, view_count, params, prefix, cfg):
    if cfg.base_layer == "gatv2":
        out, _ = _base_gatv2(X, mask, Sg, view_count, params, prefix, cfg)
        return out
    if cfg.base_layer == "deepsets":
        return _base_deepsets(X, params, prefix, cfg)
    return _base_mpnn(X, mask, globals_np, params, prefix, cfg)


def _tile_mask(mask, k):
    return np.ascontiguousarray(
        np.broadcast_to(mask[None], (k,) + mask.shape).reshape((-1,) + mask.shape[1:]))


def _global_projection(globals_np, params, prefix, dtype):
    if globals_np is None or f"{prefix}.Wg" not in params:
        return None
    return ad.matmul(Value(globals_np.astype(dtype, copy=False)), params[f"{prefix}.Wg"])


def encode_batch(Xviews, mask, globals_np, params, cfg: EncoderConfig):
    """Run the configured stack; returns the (4,B,U,latent) bundle Value.

    Xviews: (4,B,U,k) numpy, the reflection views of the node features;
    mask: (B,U,U) uint8 teammate matrix; globals_np: (B,m) or None.
    """
    nviews, B, U, k = Xviews.shape
    dtype = Xviews.dtype
    mask = np.ascontiguousarray(mask)
    if cfg.symmetry_mode == "group_convolution":
        Hs = Value(Xviews)
        for i in range(cfg.layer_count):
            prefix = f"enc.l{i}"
            Sg = _global_projection(globals_np, params, prefix, dtype)
            pairs = ad.reshape(_view_pairs(Hs), (16 * B, U, 2 * Hs.shape[-1]))
            out, _ = _base_gatv2(pairs, mask, Sg, 16, params, prefix, cfg)
            Hs = _klein_mix(ad.reshape(out, (16, B, U, cfg.latent_dim)))
        return Hs
    # independent views: flatten them into the batch axis
    H = ad.reshape(Value(Xviews), (nviews * B, U, k))
    for i in range(cfg.layer_count):
        prefix = f"enc.l{i}"
        Sg = _global_projection(globals_np, params, prefix, dtype)
        H = _base_forward(H, mask, _tile_globals(globals_np, nviews), Sg,
                          nviews, params, prefix, cfg)
    return ad.reshape(H, (nviews, B, U, cfg.latent_dim))


def _tile_globals(globals_np, k):
    if globals_np is None:
        return None
    return np.ascontiguousarray(
        np.broadcast_to(globals_np[None], (k,) + globals_np.shape)
        .reshape(-1, globals_np.shape[-1]))


def make_views(X):
    """(B,U,8) node features -> (4,B,U,8) reflection views (exact sign flips)."""
    return np.stack([apply_to_features(g, X) for g in D2], axis=0)


# -- public single-graph operations -----------------------------------------


def gatv2_forward(H, E, g, params, cfg: EncoderConfig, prefix="enc.l0",
                  return_attention=False):
    """One GATv2 layer on one graph: (U,k) latents -> (U,latent_dim).

    E must be the (U,U,2) teammate/opponent one-hot; g the (m,) global
    feature vector or None.
    """
    H = np.asarray(H)
    E = np.asarray(E)
    U = H.shape[0]
    if E.shape != (U, U, 2):
        raise ShapeError("gatv2_forward: edge features", E.shape, (U, U, 2))
    if not np.array_equal(E.sum(axis=-1), np.ones((U, U))):
        raise ValueError("edge features must be one-hot over (teammate, opponent)")
    mask = np.ascontiguousarray(E[..., 0]).astype(np.uint8)[None]
    globals_np = None if g is None else np.asarray(g, dtype=H.dtype)[None]
    Sg = _global_projection(globals_np, params, prefix, H.dtype)
    out, att = _base_gatv2(Value(H[None]), mask, Sg, 1, params, prefix, cfg)
    if return_attention:
        return out.data[0], att[0]
    return out.data[0]


def frame_average(fn, corner: CornerGraph):
    """(1/4) sum of fn over the four reflected corners, reflection-invariant.

    The summation order is canonical so the result is bit-exactly identical
    for any reflection of the input (assuming fn itself is deterministic).
    """
    outs = {g: np.asarray(fn(apply(g, corner))) for g in D2}
    return klein_sum(outs) * 0.25


def group_conv_layer(bundle: ViewBundle, E, g, params, cfg: EncoderConfig,
                     prefix="enc.l0") -> ViewBundle:
    """One view-recombining layer on a single graph's bundle."""
    E = np.asarray(E)
    U = E.shape[0]
    mask = np.ascontiguousarray(E[..., 0]).astype(np.uint8)[None]
    stacked = np.stack([bundle[g_] for g_ in D2], axis=0)[:, None]  # (4,1,U,d)
    globals_np = None if g is None else np.asarray(g, dtype=stacked.dtype)[None]
    Sg = _global_projection(globals_np, params, prefix, stacked.dtype)
    pairs = ad.reshape(_view_pairs(Value(stacked)), (16, U, 2 * stacked.shape[-1]))
    out, _ = _base_gatv2(pairs, mask, Sg, 16, params, prefix, cfg)
    mixed = _klein_mix(ad.reshape(out, (16, 1, U, cfg.latent_dim)))
    return ViewBundle({g_: mixed.data[i, 0] for i, g_ in enumerate(D2)})


def encode(corner: CornerGraph, cfg: EncoderConfig, params,
           globals_vec=None, dtype=np.float64) -> ViewBundle:
    """Full encoder on one corner; returns the final latent view bundle."""
    X = corner.node_features(dtype=dtype)[None]
    views = make_views(X[0])[:, None]
    mask = corner.team_matrix().astype(np.uint8)[None]
    globals_np = None if globals_vec is None else np.asarray(globals_vec, dtype=dtype)[None]
    out = encode_batch(views, mask, globals_np, params, cfg)
    return ViewBundle({g_: out.data[i, 0] for i, g_ in enumerate(D2)})
