"""Training loops, metrics, the ablation ladder, and the two study probes.

Per-task default hyperparameters (batch size, learning rate, L2 strength,
depth, Adam moments, seed) mirror the published training recipe; the step
budget is the desk-scale default of 20k steps.  Training is bit-deterministic
under (seed, config, dataset): minibatches are drawn without replacement from
a per-epoch seeded shuffle, generator noise comes from a per-step seeded
stream, and snapshots keep the best-by-evaluation-loss parameters.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import heads
from .autodiff import AdamState, Value, adam_step, l2_penalty, zero_gradients
from .checkpoint import ModelCheckpoint, params_to_values
from .cornergraph import ATTACKING, DEFENDING, NUM_PLAYERS, split
from .gnn import EncoderConfig
from .heads import GENERATE, RECEIVER, SHOT, Model

TASK_DEFAULTS = {
    RECEIVER: dict(batch_size=256, learning_rate=1e-4, l2=1e-4, layer_count=4),
    SHOT: dict(batch_size=128, learning_rate=1e-4, l2=0.0, layer_count=2),
    GENERATE: dict(batch_size=128, learning_rate=5e-5, l2=1e-4, layer_count=2),
}
DEFAULT_STEPS = 20_000
DEFAULT_SEED = 42

# Reference results from the published large-scale study (proprietary data;
# annotation only -- desk-scale acceptance checks ordering, not values).
REFERENCE_RECEIVER_TOP3 = {
    "deepsets": (0.713, 0.022),
    "mpnn": (0.723, 0.017),
    "gatv2": (0.748, 0.021),
    "gatv2+frame_averaging": (0.780, 0.011),
    "gatv2+group_conv": (0.782, 0.039),
}
REFERENCE_SHOT_F1 = {
    "shot_unconditional": (0.521, 0.027),
    "shot_conditional": (0.677, 0.036),
    "shot_conditional+group_conv": (0.712, 0.011),
}


class HarnessError(ValueError):
    """Configuration or data incompatible with the requested run."""


@dataclass(frozen=True)
class TrainConfig:
    """One training run; None fields resolve to the task defaults."""

    task: str
    batch_size: int | None = None
    learning_rate: float | None = None
    l2: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    layer_count: int | None = None
    steps: int = DEFAULT_STEPS
    seed: int = DEFAULT_SEED
    base_layer: str = "gatv2"
    symmetry_mode: str = "group_convolution"
    conditional: bool = True        # shot task: feed the receiver one-hot
    team_side: str | None = None    # generator task
    eval_every: int = 1000
    dtype: str = "float32"

    def __post_init__(self):
        if self.task not in TASK_DEFAULTS:
            raise HarnessError(f"unknown task {self.task!r}")
        defaults = TASK_DEFAULTS[self.task]
        for name in ("batch_size", "learning_rate", "l2", "layer_count"):
            if getattr(self, name) is None:
                object.__setattr__(self, name, defaults[name])
        if self.task == GENERATE and self.team_side not in (ATTACKING, DEFENDING):
            raise HarnessError("generator training needs team_side")
        if self.steps < 0 or self.batch_size < 1:
            raise HarnessError("steps must be >= 0 and batch_size >= 1")


def encoder_config_for(cfg: TrainConfig) -> EncoderConfig:
    if cfg.task == SHOT and not cfg.conditional:
        global_dim = 0
    else:
        global_dim = {RECEIVER: 0, SHOT: NUM_PLAYERS, GENERATE: NUM_PLAYERS + 1}[cfg.task]
    return EncoderConfig(layer_count=cfg.layer_count, base_layer=cfg.base_layer,
                         symmetry_mode=cfg.symmetry_mode, global_dim=global_dim)


def build_model_for(cfg: TrainConfig, rng) -> Model:
    dtype = np.dtype(cfg.dtype).type
    enc = encoder_config_for(cfg)
    model = heads.build_model(cfg.task, rng, base_layer=cfg.base_layer,
                              symmetry_mode=cfg.symmetry_mode,
                              layer_count=cfg.layer_count,
                              team_side=cfg.team_side, dtype=dtype)
    # the task builder fixes globals for the conditional variant; rebuild the
    # encoder part when an unconditional shot model was requested
    if enc.global_dim != model.encoder_cfg.global_dim:
        params = {k: v for k, v in model.params.items() if not k.startswith("enc.")}
        enc_params = heads.gnn.init_encoder_params(enc, rng, dtype=dtype)
        enc_params.update(params)
        model = Model(task=cfg.task, encoder_cfg=enc, params=enc_params,
                      team_side=cfg.team_side)
    return model


@dataclass
class MetricsReport:
    """Held-out metrics for one (task, model, dataset) evaluation."""

    task: str
    count: int
    loss: float
    top1: float | None = None
    top3: float | None = None
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None

    def __post_init__(self):
        for name in ("top1", "top3", "precision", "recall", "f1"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise HarnessError(f"metric {name} out of [0, 1]: {v}")

    def rows(self, variant, seed):
        """Line-delimited record form: {variant, task, seed, metric, value}."""
        out = []
        for name in ("top1", "top3", "precision", "recall", "f1", "loss"):
            v = getattr(self, name)
            if v is not None:
                out.append({"variant": variant, "task": self.task, "seed": seed,
                            "metric": name, "value": float(v)})
        return out


# -- dataset tensors -----------------------------------------------------------


def dataset_arrays(corners, dtype=np.float32, need_labels=()):
    """Dense tensors for a corner list; labels validated only when needed."""
    n = len(corners)
    X = np.empty((n, NUM_PLAYERS, 8), dtype=dtype)
    for i, c in enumerate(corners):
        X[i] = c.node_features(dtype=dtype)
    att = X[:, :, 7] > 0.5
    mask = np.ascontiguousarray(
        (att[:, :, None] == att[:, None, :]).astype(np.uint8))
    out = {"X": X, "mask": mask, "n": n}
    if "receiver" in need_labels:
        if any(c.receiver_index is None for c in corners):
            raise HarnessError("task needs receiver labels on every corner")
        out["receiver"] = np.array([c.receiver_index for c in corners], dtype=np.int64)
    if "shot" in need_labels:
        if any(c.shot_taken is None for c in corners):
            raise HarnessError("task needs shot labels on every corner")
        out["shot"] = np.array([c.shot_taken for c in corners], dtype=dtype)
    return out


def _receiver_onehots(indices, dtype):
    out = np.zeros((len(indices), NUM_PLAYERS), dtype=dtype)
    out[np.arange(len(indices)), indices] = 1.0
    return out


def _needed_labels(cfg: TrainConfig):
    if cfg.task == RECEIVER:
        return ("receiver",)
    if cfg.task == SHOT:
        return ("receiver", "shot") if cfg.conditional else ("shot",)
    return ("receiver", "shot")


# -- training --------------------------------------------------------------------


def _batch_loss(cfg: TrainConfig, model: Model, data, idx, step):
    dtype = np.dtype(cfg.dtype).type
    Xb = data["X"][idx]
    maskb = data["mask"][idx]
    if cfg.task == RECEIVER:
        logits = heads.receiver_logits_batch(Xb, maskb, model.params, model.encoder_cfg)
        loss = ad.mean(ad.softmax_cross_entropy(logits, data["receiver"][idx]))
    elif cfg.task == SHOT:
        onehots = (_receiver_onehots(data["receiver"][idx], dtype)
                   if cfg.conditional else None)
        logit = heads.shot_logit_batch(Xb, maskb, onehots, model.params,
                                       model.encoder_cfg)
        loss = ad.mean(ad.sigmoid_binary_cross_entropy(logit, data["shot"][idx]))
    else:
        team_flag = 1.0 if cfg.team_side == ATTACKING else 0.0
        team_sel = (Xb[:, :, 7] == team_flag).astype(dtype)
        eps_rng = np.random.default_rng([cfg.seed, 13, step])
        eps = eps_rng.standard_normal((len(idx), NUM_PLAYERS, heads.LATENT_GAUSS_DIM))
        loss = heads.cvae_loss_batch(
            Xb, maskb, team_sel, data["shot"][idx],
            _receiver_onehots(data["receiver"][idx], dtype),
            model.params, model.encoder_cfg, eps.astype(dtype))
    if cfg.l2 > 0:
        loss = ad.add(loss, l2_penalty(model.parameters(), cfg.l2))
    return loss


def _eval_loss(cfg: TrainConfig, model: Model, data, batch=512):
    """Task loss over a dataset, batched, deterministic (eps fixed per chunk)."""
    total, count = 0.0, 0
    for start in range(0, data["n"], batch):
        idx = np.arange(start, min(start + batch, data["n"]))
        loss = _batch_loss(cfg, model, data, idx, step=1_000_000_000 + start)
        total += float(loss.data) * len(idx)
        count += len(idx)
    return total / max(count, 1)


def train(cfg: TrainConfig, train_set, eval_set=None, log=None) -> ModelCheckpoint:
    """Minibatch Adam on the regularized task loss; returns the best snapshot.

    Label compatibility is checked before the first step.  Evaluation-loss
    snapshots run at step 0, every cfg.eval_every steps, and at the end; the
    returned checkpoint is the best one by evaluation loss (earliest step on
    ties).  When eval_set is None the snapshots use the training set itself.
    """
    dtype = np.dtype(cfg.dtype).type
    needed = _needed_labels(cfg)
    data = dataset_arrays(train_set, dtype=dtype, need_labels=needed)
    eval_data = (data if eval_set is None
                 else dataset_arrays(eval_set, dtype=dtype, need_labels=needed))
    model = build_model_for(cfg, np.random.default_rng(cfg.seed))
    params = model.parameters()
    names = list(model.params.keys())
    state = AdamState(learning_rate=cfg.learning_rate, beta1=cfg.beta1,
                      beta2=cfg.beta2, epsilon=cfg.epsilon, l2_coefficient=cfg.l2)

    best = {"loss": np.inf, "step": 0, "params": None}

    def snapshot(step):
        loss = _eval_loss(cfg, model, eval_data)
        if loss < best["loss"]:
            best.update(loss=loss,
                        step=step,
                        params={n: v.data.copy() for n, v in model.params.items()})
        if log is not None:
            log(step, loss)

    snapshot(0)
    n = data["n"]
    bs = min(cfg.batch_size, n)
    per_epoch = max(n // bs, 1)
    step = 0
    epoch = 0
    t0 = time.time()
    while step < cfg.steps:
        order = np.random.default_rng([cfg.seed, 7, epoch]).permutation(n)
        for b in range(per_epoch):
            if step >= cfg.steps:
                break
            idx = order[b * bs:(b + 1) * bs]
            loss = _batch_loss(cfg, model, data, idx, step)
            zero_gradients(params)
            loss.backward()
            adam_step(params, state)
            step += 1
            if step % cfg.eval_every == 0 or step == cfg.steps:
                snapshot(step)
        epoch += 1
    config = asdict(cfg)
    config["train_seconds"] = round(time.time() - t0, 3)
    return ModelCheckpoint(task=cfg.task, config=config, step=best["step"],
                           eval_loss=best["loss"],
                           params={n: best["params"][n] for n in names})


def model_from_checkpoint(ckpt: ModelCheckpoint) -> Model:
    cfg = train_config_from(ckpt.config)
    model = Model(task=ckpt.task, encoder_cfg=encoder_config_for(cfg),
                  params=params_to_values(ckpt.params), team_side=cfg.team_side)
    return model


def train_config_from(config_dict) -> TrainConfig:
    fields = {k: v for k, v in config_dict.items()
              if k in TrainConfig.__dataclass_fields__}
    return TrainConfig(**fields)


# -- evaluation --------------------------------------------------------------------


def top_k_hits(probs, labels, k):
    """Count of rows whose label is among the k best (ties by lower index)."""
    hits = 0
    for row, label in zip(probs, labels):
        hits += int(label in heads.top_k(row, k))
    return hits


def _binary_metrics(pred, truth):
    tp = int(np.sum((pred == 1) & (truth == 1)))
    fp = int(np.sum((pred == 1) & (truth == 0)))
    fn = int(np.sum((pred == 0) & (truth == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (2 * precision * recall / (precision + recall)) if precision + recall else 0.0
    return precision, recall, f1


def receiver_probs_batch(model: Model, data, batch=512):
    out = np.empty((data["n"], NUM_PLAYERS))
    for start in range(0, data["n"], batch):
        sl = slice(start, min(start + batch, data["n"]))
        logits = heads.receiver_logits_batch(data["X"][sl], data["mask"][sl],
                                             model.params, model.encoder_cfg)
        out[sl] = ad.softmax(Value(logits.data.astype(np.float64)), axis=1).data
    return out


def shot_probs_batch(model: Model, data, receiver_model: Model | None, batch=256):
    """P(shot) per corner: direct sigmoid, or the receiver-weighted mix."""
    conditional = model.encoder_cfg.global_dim == NUM_PLAYERS
    n = data["n"]
    if not conditional:
        out = np.empty(n)
        for start in range(0, n, batch):
            sl = slice(start, min(start + batch, n))
            logit = heads.shot_logit_batch(data["X"][sl], data["mask"][sl], None,
                                           model.params, model.encoder_cfg)
            out[sl] = 1.0 / (1.0 + np.exp(-logit.data.astype(np.float64)))
        return out
    if receiver_model is None:
        raise HarnessError("conditional shot evaluation needs a receiver model")
    p_recv = receiver_probs_batch(receiver_model, data)
    out = np.empty(n)
    chunk = max(batch // NUM_PLAYERS, 1)
    eye = np.eye(NUM_PLAYERS, dtype=data["X"].dtype)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        m = stop - start
        Xb = np.repeat(data["X"][start:stop], NUM_PLAYERS, axis=0)
        maskb = np.repeat(data["mask"][start:stop], NUM_PLAYERS, axis=0)
        onehots = np.tile(eye, (m, 1))
        logit = heads.shot_logit_batch(Xb, maskb, onehots, model.params,
                                       model.encoder_cfg)
        curve = 1.0 / (1.0 + np.exp(-logit.data.astype(np.float64)))
        out[start:stop] = (curve.reshape(m, NUM_PLAYERS) * p_recv[start:stop]).sum(axis=1)
    return out


def evaluate(ckpt: ModelCheckpoint | Model, test_set,
             receiver_ckpt=None) -> MetricsReport:
    """Held-out metrics; top-k ties break by ascending player index."""
    if not test_set:
        raise HarnessError("cannot evaluate on an empty test set")
    model = ckpt if isinstance(ckpt, Model) else model_from_checkpoint(ckpt)
    if model.task == RECEIVER:
        data = dataset_arrays(test_set, need_labels=("receiver",))
        probs = receiver_probs_batch(model, data)
        labels = data["receiver"]
        ce = -np.log(np.maximum(probs[np.arange(data["n"]), labels], 1e-300))
        return MetricsReport(task=RECEIVER, count=data["n"], loss=float(ce.mean()),
                             top1=top_k_hits(probs, labels, 1) / data["n"],
                             top3=top_k_hits(probs, labels, 3) / data["n"])
    if model.task == SHOT:
        data = dataset_arrays(test_set, need_labels=("shot",))
        receiver_model = None
        if receiver_ckpt is not None:
            receiver_model = (receiver_ckpt if isinstance(receiver_ckpt, Model)
                              else model_from_checkpoint(receiver_ckpt))
        p = shot_probs_batch(model, data, receiver_model)
        truth = data["shot"].astype(np.int64)
        eps = 1e-12
        bce = -(truth * np.log(p + eps) + (1 - truth) * np.log(1 - p + eps))
        precision, recall, f1 = _binary_metrics((p >= 0.5).astype(np.int64), truth)
        return MetricsReport(task=SHOT, count=data["n"], loss=float(bce.mean()),
                             precision=precision, recall=recall, f1=f1)
    raise HarnessError(f"no evaluation metrics for task {model.task!r}")


# -- ablation ladder ---------------------------------------------------------------


RECEIVER_VARIANTS = {
    "deepsets": dict(base_layer="deepsets", symmetry_mode="none"),
    "mpnn": dict(base_layer="mpnn", symmetry_mode="none"),
    "gatv2": dict(base_layer="gatv2", symmetry_mode="none"),
    "gatv2+frame_averaging": dict(base_layer="gatv2", symmetry_mode="frame_averaging"),
    "gatv2+group_conv": dict(base_layer="gatv2", symmetry_mode="group_convolution"),
}
SHOT_VARIANTS = {
    "shot_unconditional": dict(symmetry_mode="none", conditional=False),
    "shot_conditional": dict(symmetry_mode="none", conditional=True),
    "shot_conditional+group_conv": dict(symmetry_mode="group_convolution",
                                        conditional=True),
}


def ablate(dataset, seeds, steps, receiver_variants=None, shot_variants=None,
           layer_count=None, batch_size=None, split_seed=0, log=None):
    """Train each requested variant per seed on a shared split.

    Returns (rows, summary): rows are the line-record dicts, summary maps
    variant -> {"mean", "std", "per_seed", "reference_mean", "reference_std"}.
    Conditional shot variants are scored through the receiver-weighted
    decomposition using the same-seed group-convolution receiver model.
    """
    receiver_variants = (list(RECEIVER_VARIANTS) if receiver_variants is None
                         else receiver_variants)
    shot_variants = list(SHOT_VARIANTS) if shot_variants is None else shot_variants
    train_set, test_set = split(dataset, 0.8, split_seed)
    rows, summary = [], {}

    def record(variant, seed, report, metric):
        rows.extend(report.rows(variant, seed))
        value = getattr(report, metric)
        per_variant = summary.setdefault(variant, {"per_seed": []})
        per_variant["per_seed"].append(value)
        if log is not None:
            log(f"{variant} seed={seed}: {metric}={value:.4f}")

    receiver_for_seed = {}
    for seed in seeds:
        for variant in receiver_variants:
            cfg = TrainConfig(task=RECEIVER, steps=steps, seed=seed,
                              layer_count=layer_count, batch_size=batch_size,
                              **RECEIVER_VARIANTS[variant])
            ckpt = train(cfg, train_set, test_set)
            if variant == "gatv2+group_conv":
                receiver_for_seed[seed] = model_from_checkpoint(ckpt)
            record(variant, seed, evaluate(ckpt, test_set), "top3")
        for variant in shot_variants:
            cfg = TrainConfig(task=SHOT, steps=steps, seed=seed,
                              layer_count=layer_count, batch_size=batch_size,
                              **SHOT_VARIANTS[variant])
            ckpt = train(cfg, train_set, test_set)
            receiver_model = receiver_for_seed.get(seed)
            if receiver_model is None and SHOT_VARIANTS[variant]["conditional"]:
                rcfg = TrainConfig(task=RECEIVER, steps=steps, seed=seed,
                                   layer_count=layer_count, batch_size=batch_size)
                receiver_for_seed[seed] = model_from_checkpoint(
                    train(rcfg, train_set, test_set))
                receiver_model = receiver_for_seed[seed]
            record(variant, seed, evaluate(ckpt, test_set, receiver_model), "f1")

    references = dict(REFERENCE_RECEIVER_TOP3)
    references.update(REFERENCE_SHOT_F1)
    for variant, agg in summary.items():
        values = np.array(agg["per_seed"], dtype=np.float64)
        agg["mean"] = float(values.mean())
        agg["std"] = float(values.std(ddof=1)) if len(values) > 1 else 0.0
        if variant in references:
            agg["reference_mean"], agg["reference_std"] = references[variant]
    return rows, summary


# -- probes ------------------------------------------------------------------------


def _flatten_features(corners):
    return np.stack([c.node_features().reshape(-1) for c in corners])


def train_mlp_classifier(features, labels, seed, hidden=32, steps=300, lr=1e-3,
                         l2=1e-3):
    """Tiny two-layer perceptron; returns a logit-producing closure."""
    rng = np.random.default_rng(seed)
    din = features.shape[1]
    w1 = Value(np.sqrt(2.0 / din) * rng.standard_normal((din, hidden)), requires_grad=True)
    b1 = Value(np.zeros(hidden), requires_grad=True)
    w2 = Value(np.sqrt(2.0 / hidden) * rng.standard_normal((hidden, 1)), requires_grad=True)
    b2 = Value(np.zeros(1), requires_grad=True)
    params = [w1, b1, w2, b2]
    state = AdamState(learning_rate=lr, l2_coefficient=l2)
    xv = Value(features)
    tv = labels.astype(np.float64)
    for _ in range(steps):
        h = ad.leaky_relu(ad.add(ad.matmul(xv, w1), b1))
        logits = ad.reshape(ad.add(ad.matmul(h, w2), b2), (len(tv),))
        loss = ad.mean(ad.sigmoid_binary_cross_entropy(logits, tv))
        if l2 > 0:
            loss = ad.add(loss, l2_penalty([w1, w2], l2))
        zero_gradients(params)
        loss.backward()
        adam_step(params, state)

    def predict(x):
        h = np.where(x @ w1.data + b1.data >= 0, x @ w1.data + b1.data,
                     0.2 * (x @ w1.data + b1.data))
        return (h @ w2.data + b2.data).reshape(-1)

    return predict


def realism_probe(real, generated, seed=0, holdout=0.5, steps=600, l2=1e-2):
    """Train real-vs-generated MLP on flattened features, report held-out F1.

    Row i of `generated` is treated as the counterpart of row i of `real`
    and the holdout split keeps each pair on one side, so a memorizing
    classifier cannot leak a training item into the held-out set through
    its twin.  Features are standardized on the training split, and F1 is
    computed at the balanced operating point (median held-out logit), which
    keeps the indistinguishable-classes control at chance.
    """
    if len(real) != len(generated):
        raise HarnessError("realism probe needs equal-size class samples")
    n = len(real)
    features = np.concatenate([_flatten_features(real), _flatten_features(generated)])
    labels = np.concatenate([np.ones(n), np.zeros(n)])
    rng = np.random.default_rng(seed)
    items = rng.permutation(n)
    n_train = int(round(n * (1.0 - holdout)))
    tr = np.concatenate([items[:n_train], items[:n_train] + n])
    te = np.concatenate([items[n_train:], items[n_train:] + n])
    mean = features[tr].mean(axis=0)
    scale = features[tr].std(axis=0) + 1e-6
    standardized = (features - mean) / scale
    predict = train_mlp_classifier(standardized[tr], labels[tr], seed=seed,
                                   steps=steps, l2=l2)
    logits = predict(standardized[te])
    pred = (logits > np.median(logits)).astype(np.int64)
    _, _, f1 = _binary_metrics(pred, labels[te].astype(np.int64))
    return f1


def shift_probe(corners, generator: Model, receiver_model: Model,
                shot_model: Model, desired_outcome, seed=0, n_samples=1):
    """Mean decomposed shot probability before/after one-team adjustments.

    Returns (mean_before, mean_after, z, details) where z is the paired
    statistic mean(d)/sem(d) (0 when every difference is 0) and details
    carries per-corner probabilities and a small-sample warning flag.
    """
    befores, afters = [], []
    for i, corner in enumerate(corners):
        report = heads.generate_adjustment(
            corner, desired_outcome, generator.team_side, n_samples,
            seed=seed * 1_000_003 + i, model=generator,
            receiver_model=receiver_model, shot_model=shot_model)
        befores.append(report.shot_prob_before)
        afters.append(float(np.mean([p for _, p in report.samples])))
    befores = np.array(befores)
    afters = np.array(afters)
    diffs = afters - befores
    sd = diffs.std(ddof=1) if len(diffs) > 1 else 0.0
    z = 0.0 if sd == 0.0 else float(diffs.mean() / (sd / np.sqrt(len(diffs))))
    details = {"n": len(corners), "small_sample": len(corners) < 30,
               "before": befores, "after": afters,
               "reduced_fraction": float(np.mean(diffs < 0))}
    return float(befores.mean()), float(afters.mean()), z, details
