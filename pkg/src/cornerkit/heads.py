"""Task decoders on top of the encoder: receiver, shot, guided generation.

Receiver prediction reads the frame-averaged node matrix and decodes each
row to one logit.  Shot prediction feeds a receiver one-hot through the
globals, pools the frame-averaged rows to one vector, and decodes a single
logit; the unconditional probability decomposes as

    P(shot) = sum_i P(shot | receiver=i) * P(receiver=i)

attempting every candidate receiver.  The generator is an outcome-conditional
VAE over the identity view: each player's latent row maps to a 2-d Gaussian,
a sample is decoded together with the desired outcome and the player's
receiver-indicator entry into new (x, y, vx, vy), for one team at a time.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import gnn
from .autodiff import Value
from .cornergraph import ATTACKING, DEFENDING, NUM_PLAYERS, CornerGraph
from .gnn import EncoderConfig, encode_batch, klein_mean_views

RECEIVER = "receiver"
SHOT = "shot"
GENERATE = "generate"
TASKS = (RECEIVER, SHOT, GENERATE)

LATENT_GAUSS_DIM = 2
DECODER_HIDDEN = 32
KINEMATIC_DIM = 4  # (x, y, vx, vy)


class TaskError(ValueError):
    """Model/task mismatch or invalid head input."""


@dataclass
class Model:
    """Encoder + decoder parameters for one task."""

    task: str
    encoder_cfg: EncoderConfig
    params: dict
    team_side: str | None = None  # generators only

    def parameters(self):
        return list(self.params.values())

    def require_task(self, task):
        if self.task != task:
            raise TaskError(f"model trained for {self.task!r}, needed {task!r}")


@dataclass
class PredictionReport:
    """Task output bundle; only the fields for the task are populated."""

    task: str
    receiver_probs: np.ndarray | None = None
    top3: list | None = None
    shot_prob: float | None = None
    per_receiver: list | None = None
    shot_prob_before: float | None = None
    samples: list = field(default_factory=list)  # (CornerGraph, shot_prob|None)


def task_encoder_config(task, base_layer="gatv2",
                        symmetry_mode="group_convolution", layer_count=None):
    """Per-task encoder wiring: globals width and default depth."""
    if task == RECEIVER:
        return EncoderConfig(layer_count=layer_count or 4, base_layer=base_layer,
                             symmetry_mode=symmetry_mode, global_dim=0)
    if task == SHOT:
        return EncoderConfig(layer_count=layer_count or 2, base_layer=base_layer,
                             symmetry_mode=symmetry_mode, global_dim=NUM_PLAYERS)
    if task == GENERATE:
        return EncoderConfig(layer_count=layer_count or 2, base_layer=base_layer,
                             symmetry_mode=symmetry_mode, global_dim=NUM_PLAYERS + 1)
    raise TaskError(f"unknown task {task!r}")


def build_model(task, rng, base_layer="gatv2", symmetry_mode="group_convolution",
                layer_count=None, team_side=None, dtype=np.float64) -> Model:
    """Fresh seeded model; head weights Glorot, biases zero."""
    cfg = task_encoder_config(task, base_layer, symmetry_mode, layer_count)
    params = gnn.init_encoder_params(cfg, rng, dtype=dtype)
    d = cfg.latent_dim
    if task in (RECEIVER, SHOT):
        params["head.w"] = Value(gnn.glorot(rng, (d, 1), d, 1, dtype), requires_grad=True)
        params["head.b"] = Value(np.zeros(1, dtype), requires_grad=True)
    elif task == GENERATE:
        if team_side not in (ATTACKING, DEFENDING):
            raise TaskError(f"generator needs a team side, got {team_side!r}")
        for name, shape in (("gauss.w_mu", (d, LATENT_GAUSS_DIM)),
                            ("gauss.w_logsig", (d, LATENT_GAUSS_DIM))):
            params[name] = Value(gnn.glorot(rng, shape, d, LATENT_GAUSS_DIM, dtype),
                                 requires_grad=True)
        params["gauss.b_mu"] = Value(np.zeros(LATENT_GAUSS_DIM, dtype), requires_grad=True)
        params["gauss.b_logsig"] = Value(np.zeros(LATENT_GAUSS_DIM, dtype), requires_grad=True)
        dec_in = LATENT_GAUSS_DIM + 2  # z + outcome + receiver-indicator entry
        params["dec.w1"] = Value(gnn.glorot(rng, (dec_in, DECODER_HIDDEN), dec_in,
                                            DECODER_HIDDEN, dtype), requires_grad=True)
        params["dec.b1"] = Value(np.zeros(DECODER_HIDDEN, dtype), requires_grad=True)
        params["dec.w2"] = Value(gnn.glorot(rng, (DECODER_HIDDEN, KINEMATIC_DIM),
                                            DECODER_HIDDEN, KINEMATIC_DIM, dtype),
                                 requires_grad=True)
        params["dec.b2"] = Value(np.zeros(KINEMATIC_DIM, dtype), requires_grad=True)
    return Model(task=task, encoder_cfg=cfg, params=params, team_side=team_side)


# -- batched cores (shared by training and prediction) ------------------------


def _views_for(cfg, X):
    if cfg.symmetry_mode == "none":
        return X[None]  # other views would be ignored downstream
    return gnn.make_views(X)


def node_latents(bundle, mode):
    """(views,B,U,d) -> (B,U,d): identity view or the frame-averaged mean."""
    if mode == "none":
        return ad.take(bundle, 0)
    return klein_mean_views(bundle)


def receiver_logits_batch(X, mask, params, cfg) -> Value:
    """(B,22) logits from node features (B,22,k)."""
    bundle = encode_batch(_views_for(cfg, X), mask, None, params, cfg)
    H = node_latents(bundle, cfg.symmetry_mode)
    B, U, d = H.shape
    logits = ad.add(ad.matmul(ad.reshape(H, (B * U, d)), params["head.w"]),
                    params["head.b"])
    return ad.reshape(logits, (B, U))


def shot_logit_batch(X, mask, receiver_onehots, params, cfg) -> Value:
    """(B,) logits; the candidate receiver enters through the globals."""
    bundle = encode_batch(_views_for(cfg, X), mask, receiver_onehots, params, cfg)
    H = node_latents(bundle, cfg.symmetry_mode)
    pooled = ad.mean(H, axis=1)  # (B, d) average over the 22 players
    logit = ad.add(ad.matmul(pooled, params["head.w"]), params["head.b"])
    return ad.reshape(logit, (logit.shape[0],))


def generator_gaussians_batch(X, mask, globals_np, params, cfg):
    """Per-player (mu, log sigma) from the identity view (equivariant path)."""
    bundle = encode_batch(gnn.make_views(X), mask, globals_np, params, cfg)
    H_id = ad.take(bundle, 0)  # generation cannot frame average
    B, U, d = H_id.shape
    flat = ad.reshape(H_id, (B * U, d))
    mu = ad.reshape(ad.add(ad.matmul(flat, params["gauss.w_mu"]), params["gauss.b_mu"]),
                    (B, U, LATENT_GAUSS_DIM))
    logsig = ad.reshape(ad.add(ad.matmul(flat, params["gauss.w_logsig"]),
                               params["gauss.b_logsig"]),
                        (B, U, LATENT_GAUSS_DIM))
    return mu, logsig


def decode_kinematics(z, outcome_col, receiver_col, params):
    """Per-player decoder: (B,U,2) latents + conditioning -> (B,U,4)."""
    B, U, _ = z.shape
    inp = ad.concat([z, outcome_col, receiver_col], axis=-1)
    flat = ad.reshape(inp, (B * U, LATENT_GAUSS_DIM + 2))
    h = ad.leaky_relu(ad.add(ad.matmul(flat, params["dec.w1"]), params["dec.b1"]))
    out = ad.add(ad.matmul(h, params["dec.w2"]), params["dec.b2"])
    return ad.reshape(out, (B, U, KINEMATIC_DIM))


def gaussian_kl(mu, logsig):
    """Closed-form KL(N(mu, sigma^2) || N(0, I)) per player, (B,U)."""
    sig2 = ad.exp(ad.mul(logsig, 2.0))
    terms = ad.add(ad.add(ad.mul(mu, mu), sig2), ad.mul(logsig, -2.0))
    return ad.mul(ad.sum_(ad.add(terms, -1.0), axis=2), 0.5)


def cvae_loss_batch(X, mask, team_sel, outcomes, receiver_onehots, params, cfg,
                    eps):
    """Mean over the batch of (reconstruction + KL) summed over team players.

    X: (B,22,k) node features (reconstruction targets are columns 0:4);
    team_sel: (B,22) 0/1 selecting the generated side; outcomes: (B,);
    receiver_onehots: (B,22); eps: (B,22,2) unit-normal draws.
    """
    globals_np = np.concatenate([outcomes[:, None], receiver_onehots], axis=1)
    mu, logsig = generator_gaussians_batch(X, mask, globals_np, params, cfg)
    z = ad.add(mu, ad.mul(ad.exp(logsig), Value(eps)))
    B, U = team_sel.shape
    outcome_col = Value(np.broadcast_to(outcomes[:, None, None],
                                        (B, U, 1)).astype(X.dtype, copy=True))
    receiver_col = Value(receiver_onehots[:, :, None].astype(X.dtype, copy=False))
    decoded = decode_kinematics(z, outcome_col, receiver_col, params)
    target = Value(np.ascontiguousarray(X[:, :, :KINEMATIC_DIM]))
    sq = ad.power(ad.add(decoded, ad.mul(target, -1.0)), 2)
    per_player_mse = ad.mean(sq, axis=2)  # (B,U)
    sel = Value(team_sel.astype(X.dtype, copy=False))
    recon = ad.sum_(ad.mul(per_player_mse, sel), axis=1)
    kl = ad.sum_(ad.mul(gaussian_kl(mu, logsig), sel), axis=1)
    return ad.mean(ad.add(recon, kl))


# -- single-corner public operations ------------------------------------------


def _single_inputs(corner, dtype=np.float64):
    X = corner.node_features(dtype=dtype)[None]
    mask = corner.team_matrix().astype(np.uint8)[None]
    return X, mask


def top_k(probs, k=3):
    """Descending probability, ties broken by ascending player index."""
    order = np.lexsort((np.arange(len(probs)), -probs))
    return [int(i) for i in order[:k]]


def predict_receiver(corner, model: Model) -> PredictionReport:
    """Frame-averaged receiver distribution over the 22 players."""
    model.require_task(RECEIVER)
    X, mask = _single_inputs(corner)
    logits = receiver_logits_batch(X, mask, model.params, model.encoder_cfg)
    probs = ad.softmax(Value(logits.data), axis=1).data[0]
    return PredictionReport(task=RECEIVER, receiver_probs=probs, top3=top_k(probs))


def predict_shot_conditional(corner, receiver_index, model: Model) -> float:
    """P(shot | receiver) with the candidate receiver fed through the globals."""
    model.require_task(SHOT)
    if not 0 <= int(receiver_index) < NUM_PLAYERS:
        raise TaskError(f"receiver index out of range: {receiver_index}")
    X, mask = _single_inputs(corner)
    onehot = np.zeros((1, NUM_PLAYERS))
    onehot[0, int(receiver_index)] = 1.0
    logit = shot_logit_batch(X, mask, onehot, model.params, model.encoder_cfg)
    return float(ad.sigmoid(Value(logit.data)).data[0])


def conditional_shot_curve(corner, shot_model: Model) -> np.ndarray:
    """P(shot | receiver=i) for every i, evaluated in one batched pass."""
    shot_model.require_task(SHOT)
    X, mask = _single_inputs(corner)
    Xb = np.repeat(X, NUM_PLAYERS, axis=0)
    maskb = np.repeat(mask, NUM_PLAYERS, axis=0)
    onehots = np.eye(NUM_PLAYERS)
    logits = shot_logit_batch(Xb, maskb, onehots, shot_model.params,
                              shot_model.encoder_cfg)
    return ad.sigmoid(Value(logits.data)).data


def predict_shot(corner, receiver_model: Model, shot_model: Model) -> PredictionReport:
    """Decomposed shot probability, attempting every possible receiver."""
    receiver_report = predict_receiver(corner, receiver_model)
    p_recv = receiver_report.receiver_probs
    p_cond = conditional_shot_curve(corner, shot_model)
    p_shot = float(p_recv @ p_cond)
    per_receiver = [(i, float(p_recv[i]), float(p_cond[i])) for i in range(NUM_PLAYERS)]
    return PredictionReport(task=SHOT, receiver_probs=p_recv,
                            top3=receiver_report.top3, shot_prob=p_shot,
                            per_receiver=per_receiver)


def cvae_loss(corner, outcome, model: Model, rng=None, eps=None) -> Value:
    """Training loss for one labeled corner; eps overrides the rng draw."""
    model.require_task(GENERATE)
    if corner.receiver_index is None:
        raise TaskError(f"corner {corner.id!r} lacks the receiver label")
    if outcome not in (0, 1):
        raise TaskError(f"outcome must be 0/1, got {outcome!r}")
    X, mask = _single_inputs(corner)
    if eps is None:
        if rng is None:
            raise TaskError("cvae_loss needs either eps or a random generator")
        eps = rng.standard_normal((1, NUM_PLAYERS, LATENT_GAUSS_DIM))
    team_sel = np.array([[1.0 if p.team == model.team_side else 0.0
                          for p in corner.players]])
    return cvae_loss_batch(X, mask, team_sel, np.array([float(outcome)]),
                           corner.receiver_onehot()[None], model.params,
                           model.encoder_cfg, eps)


def generate_adjustment(corner, desired_outcome, team_side, n_samples, seed,
                        model: Model, receiver_model: Model | None = None,
                        shot_model: Model | None = None,
                        noise_scale=1.0) -> PredictionReport:
    """Sample position/velocity adjustments for one team, other team fixed.

    Conditioning uses the desired outcome plus the corner's receiver label
    (required).  When receiver and shot models are supplied, the report
    scores the original and every sample through the decomposed shot
    probability.
    """
    model.require_task(GENERATE)
    if n_samples < 1:
        raise TaskError(f"n_samples must be >= 1, got {n_samples}")
    if team_side != model.team_side:
        raise TaskError(f"model generates {model.team_side!r}, asked {team_side!r}")
    if desired_outcome not in (0, 1):
        raise TaskError(f"desired outcome must be 0/1, got {desired_outcome!r}")
    if corner.receiver_index is None:
        raise TaskError(f"corner {corner.id!r} lacks the receiver label")
    X, mask = _single_inputs(corner)
    onehot = corner.receiver_onehot()[None]
    globals_np = np.concatenate([[[float(desired_outcome)]], onehot], axis=1)
    mu, logsig = generator_gaussians_batch(X, mask, globals_np, model.params,
                                           model.encoder_cfg)
    sigma = np.exp(logsig.data) * noise_scale
    rng = np.random.default_rng(seed)
    outcome_col = Value(np.full((1, NUM_PLAYERS, 1), float(desired_outcome)))
    receiver_col = Value(onehot[:, :, None])
    report = PredictionReport(task=GENERATE)
    if receiver_model is not None and shot_model is not None:
        report.shot_prob_before = predict_shot(corner, receiver_model,
                                               shot_model).shot_prob
    for _ in range(n_samples):
        eps = rng.standard_normal((1, NUM_PLAYERS, LATENT_GAUSS_DIM))
        z = Value(mu.data + sigma * eps)
        decoded = decode_kinematics(z, outcome_col, receiver_col, model.params).data[0]
        players = []
        for i, p in enumerate(corner.players):
            if p.team == team_side:
                x, y, vx, vy = (float(v) for v in decoded[i])
                players.append(replace(p, x=x, y=y, vx=vx, vy=vy))
            else:
                players.append(p)
        adjusted = CornerGraph(players=tuple(players), id=f"{corner.id}+adj",
                               receiver_index=corner.receiver_index,
                               shot_taken=corner.shot_taken)
        p_shot = None
        if receiver_model is not None and shot_model is not None:
            p_shot = predict_shot(adjusted, receiver_model, shot_model).shot_prob
        report.samples.append((adjusted, p_shot))
    return report
