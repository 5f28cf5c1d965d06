import numpy as np
import pytest

from cornerkit import cornergraph as cg
from cornerkit import harness, heads, synth
from cornerkit.checkpoint import load_checkpoint, save_checkpoint

DATA = synth.generate(synth.SynthConfig(n_samples=120, seed=77))
TRAIN, TEST = cg.split(DATA, 0.8, 3)

FAST = dict(steps=5, batch_size=16, eval_every=2, layer_count=1)


def fast_cfg(task, **over):
    kw = dict(FAST)
    kw.update(over)
    return harness.TrainConfig(task=task, **kw)


def test_defaults_mirror_training_recipe():
    cfg = harness.TrainConfig(task=heads.RECEIVER)
    assert (cfg.batch_size, cfg.learning_rate, cfg.l2, cfg.layer_count) == (256, 1e-4, 1e-4, 4)
    cfg = harness.TrainConfig(task=heads.SHOT)
    assert (cfg.batch_size, cfg.learning_rate, cfg.l2, cfg.layer_count) == (128, 1e-4, 0.0, 2)
    cfg = harness.TrainConfig(task=heads.GENERATE, team_side=cg.ATTACKING)
    assert (cfg.batch_size, cfg.learning_rate, cfg.l2, cfg.layer_count) == (128, 5e-5, 1e-4, 2)
    assert cfg.beta1 == 0.9 and cfg.beta2 == 0.999 and cfg.epsilon == 1e-8
    assert cfg.seed == 42 and cfg.steps == 20_000


def test_train_rejects_missing_labels_before_step_one():
    unlabeled = [cg.CornerGraph(players=c.players, id=c.id) for c in TRAIN[:10]]
    with pytest.raises(harness.HarnessError, match="labels"):
        harness.train(fast_cfg(heads.RECEIVER), unlabeled)


def test_zero_steps_returns_seeded_initialization():
    cfg = fast_cfg(heads.RECEIVER, steps=0)
    ckpt = harness.train(cfg, TRAIN, TEST)
    model = harness.build_model_for(cfg, np.random.default_rng(cfg.seed))
    assert ckpt.step == 0
    for name, value in model.params.items():
        np.testing.assert_array_equal(ckpt.params[name], value.data)


def test_training_is_bit_deterministic():
    cfg = fast_cfg(heads.RECEIVER, steps=4)
    a = harness.train(cfg, TRAIN, TEST)
    b = harness.train(cfg, TRAIN, TEST)
    assert a.step == b.step and a.eval_loss == b.eval_loss
    for name in a.params:
        assert a.params[name].tobytes() == b.params[name].tobytes()


def test_overfit_small_subset_loss_decreases():
    subset = TRAIN[:32]
    cfg = harness.TrainConfig(task=heads.RECEIVER, steps=100, batch_size=32,
                              eval_every=100, layer_count=1,
                              symmetry_mode="none", learning_rate=3e-3, l2=0.0)
    losses = []
    harness.train(cfg, subset, log=lambda step, loss: losses.append((step, loss)))
    assert losses[-1][1] < losses[0][1]


def test_checkpoint_roundtrip_bytes(tmp_path):
    ckpt = harness.train(fast_cfg(heads.SHOT, steps=2), TRAIN, TEST)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, ckpt)
    loaded = load_checkpoint(p1)
    save_checkpoint(p2, loaded)
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.task == ckpt.task and loaded.step == ckpt.step
    for name in ckpt.params:
        assert loaded.params[name].tobytes() == ckpt.params[name].tobytes()


def test_checkpoint_errors(tmp_path):
    ckpt = harness.train(fast_cfg(heads.SHOT, steps=1), TRAIN, TEST)
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, ckpt)
    text = path.read_text()
    (tmp_path / "trunc.ckpt").write_text(text[: len(text) // 2])
    from cornerkit.checkpoint import CheckpointError
    with pytest.raises(CheckpointError, match="corrupt"):
        load_checkpoint(tmp_path / "trunc.ckpt")
    import json
    doc = json.loads(text)
    doc["format_version"] = 99
    (tmp_path / "v.ckpt").write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="unsupported_version"):
        load_checkpoint(tmp_path / "v.ckpt")
    doc = json.loads(text)
    name = next(iter(doc["params"]))
    doc["format_version"] = 1
    doc["params"][name]["data"] = doc["params"][name]["data"][:-1]
    (tmp_path / "s.ckpt").write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match=name.split(".")[0]):
        load_checkpoint(tmp_path / "s.ckpt")


# -- evaluation -----------------------------------------------------------------


def test_perfect_and_uniform_predictors():
    labels = np.array([c.receiver_index for c in TEST])
    n = len(TEST)
    perfect = np.zeros((n, 22))
    perfect[np.arange(n), labels] = 1.0
    assert harness.top_k_hits(perfect, labels, 1) == n
    assert harness.top_k_hits(perfect, labels, 3) == n
    uniform = np.full((n, 22), 1 / 22)
    # uniform ties resolve to indices {0,1,2}; expected hit rate is the
    # fraction of labels in that set, chance-level 3/22 on average
    hits = harness.top_k_hits(uniform, labels, 3)
    assert hits == int(np.sum(np.isin(labels, [0, 1, 2])))


def test_f1_of_all_positive_predictor_matches_formula():
    truth = np.array([1] * 21 + [0] * 79)
    pred = np.ones(100, dtype=np.int64)
    precision, recall, f1 = harness._binary_metrics(pred, truth)
    assert precision == pytest.approx(0.21)
    assert recall == 1.0
    assert f1 == pytest.approx(2 * 0.21 / 1.21)


def test_evaluate_rejects_empty_and_reports_ranges():
    ckpt = harness.train(fast_cfg(heads.RECEIVER, steps=2), TRAIN, TEST)
    with pytest.raises(harness.HarnessError, match="empty"):
        harness.evaluate(ckpt, [])
    report = harness.evaluate(ckpt, TEST)
    assert 0.0 <= report.top1 <= report.top3 <= 1.0
    rows = report.rows("gatv2+group_conv", 42)
    assert all(set(r) == {"variant", "task", "seed", "metric", "value"} for r in rows)


def test_evaluate_unconditional_and_conditional_shot():
    uncond = harness.train(fast_cfg(heads.SHOT, conditional=False, steps=2), TRAIN, TEST)
    report = harness.evaluate(uncond, TEST)
    assert 0.0 <= report.f1 <= 1.0
    cond = harness.train(fast_cfg(heads.SHOT, conditional=True, steps=2), TRAIN, TEST)
    receiver = harness.train(fast_cfg(heads.RECEIVER, steps=2), TRAIN, TEST)
    report = harness.evaluate(cond, TEST, receiver_ckpt=receiver)
    assert 0.0 <= report.f1 <= 1.0
    with pytest.raises(harness.HarnessError, match="receiver model"):
        harness.evaluate(cond, TEST)


def test_metrics_invariant_to_dataset_ordering():
    ckpt = harness.train(fast_cfg(heads.RECEIVER, steps=3), TRAIN, TEST)
    fwd = harness.evaluate(ckpt, TEST)
    rev = harness.evaluate(ckpt, list(reversed(TEST)))
    assert fwd.top1 == rev.top1 and fwd.top3 == rev.top3


def test_receiver_accuracy_equal_on_reflected_test_set():
    ckpt = harness.train(fast_cfg(heads.RECEIVER, steps=3), TRAIN, TEST)
    base = harness.evaluate(ckpt, TEST)
    for g in cg.D2:
        reflected = [cg.apply(g, c) for c in TEST]
        ref = harness.evaluate(ckpt, reflected)
        assert ref.top1 == base.top1 and ref.top3 == base.top3


# -- ablation ---------------------------------------------------------------------


def test_ablate_structure_and_determinism():
    rows, summary = harness.ablate(DATA, seeds=[1, 2], steps=2,
                                   receiver_variants=["deepsets", "gatv2+group_conv"],
                                   shot_variants=["shot_unconditional"],
                                   layer_count=1, batch_size=16)
    variants = {r["variant"] for r in rows}
    assert variants == {"deepsets", "gatv2+group_conv", "shot_unconditional"}
    assert summary["deepsets"]["reference_mean"] == 0.713
    assert summary["shot_unconditional"]["reference_mean"] == 0.521
    assert len(summary["deepsets"]["per_seed"]) == 2
    _, summary2 = harness.ablate(DATA, seeds=[1, 2], steps=2,
                                 receiver_variants=["deepsets", "gatv2+group_conv"],
                                 shot_variants=["shot_unconditional"],
                                 layer_count=1, batch_size=16)
    assert summary["deepsets"]["per_seed"] == summary2["deepsets"]["per_seed"]


# -- probes -----------------------------------------------------------------------


def test_realism_probe_controls():
    real = DATA[:100]
    copies = [cg.CornerGraph(players=c.players, id=c.id + "-copy",
                             receiver_index=c.receiver_index,
                             shot_taken=c.shot_taken) for c in real]
    f1 = harness.realism_probe(real, copies, seed=0)
    assert abs(f1 - 0.5) <= 0.1
    shifted = []
    for c in real:
        players = tuple(
            cg.PlayerNode(min(p.x + 3.0, 5.0), p.y, p.vx, p.vy, p.height, p.weight,
                          p.has_ball, p.team) for p in c.players)
        shifted.append(cg.CornerGraph(players=players, id=c.id + "-s",
                                      receiver_index=c.receiver_index,
                                      shot_taken=c.shot_taken))
    f1 = harness.realism_probe(real, shifted, seed=0)
    assert f1 > 0.9
    with pytest.raises(harness.HarnessError, match="equal"):
        harness.realism_probe(real, copies[:10])


class _IdentityGenerator:
    """Stub with the generate_adjustment contract that returns the input."""

    team_side = cg.DEFENDING


def test_shift_probe_identity_generator_gives_zero_z(monkeypatch):
    receiver = harness.model_from_checkpoint(
        harness.train(fast_cfg(heads.RECEIVER, steps=1), TRAIN, TEST))
    shot = harness.model_from_checkpoint(
        harness.train(fast_cfg(heads.SHOT, steps=1), TRAIN, TEST))

    def fake_adjust(corner, outcome, side, n, seed, model, receiver_model,
                    shot_model):
        p = heads.predict_shot(corner, receiver_model, shot_model).shot_prob
        report = heads.PredictionReport(task=heads.GENERATE, shot_prob_before=p)
        report.samples = [(corner, p)]
        return report

    monkeypatch.setattr(heads, "generate_adjustment", fake_adjust)
    before, after, z, details = harness.shift_probe(
        TEST[:8], _IdentityGenerator(), receiver, shot, desired_outcome=0, seed=0)
    assert before == pytest.approx(after)
    assert z == 0.0
    assert details["small_sample"] is True


def test_shift_probe_runs_with_real_generator():
    receiver = harness.model_from_checkpoint(
        harness.train(fast_cfg(heads.RECEIVER, steps=1), TRAIN, TEST))
    shot = harness.model_from_checkpoint(
        harness.train(fast_cfg(heads.SHOT, steps=1), TRAIN, TEST))
    gen_ckpt = harness.train(fast_cfg(heads.GENERATE, steps=1,
                                      team_side=cg.DEFENDING), TRAIN, TEST)
    generator = harness.model_from_checkpoint(gen_ckpt)
    positives = [c for c in TEST if c.shot_taken == 1][:4]
    before, after, z, details = harness.shift_probe(
        positives, generator, receiver, shot, desired_outcome=0, seed=1)
    assert np.isfinite(z)
    assert details["n"] == len(positives)
    assert 0.0 <= before <= 1.0 and 0.0 <= after <= 1.0
