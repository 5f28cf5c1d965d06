import numpy as np
import pytest

from cornerkit import autodiff as ad
from cornerkit import cornergraph as cg
from cornerkit import gnn, heads
from cornerkit.autodiff import Value
from gradcheck import numeric_grad, max_rel_error

from test_cornergraph import make_corner


def small_model(task, seed=0, team_side=None, symmetry="group_convolution"):
    return heads.build_model(task, np.random.default_rng(seed),
                             symmetry_mode=symmetry, team_side=team_side)


# -- KL divergence -------------------------------------------------------------


def test_kl_zero_for_standard_normal():
    mu = Value(np.zeros((1, 3, 2)))
    logsig = Value(np.zeros((1, 3, 2)))
    np.testing.assert_allclose(heads.gaussian_kl(mu, logsig).data, 0.0)


def test_kl_unit_mean_closed_form():
    # per player: 2 latent dims, each 0.5*(mu^2 + sig^2 - 1 - 2 log sig) = 0.5
    mu = Value(np.ones((1, 5, 2)))
    logsig = Value(np.zeros((1, 5, 2)))
    np.testing.assert_allclose(heads.gaussian_kl(mu, logsig).data, np.ones((1, 5)))


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(0)
    mu = rng.normal(size=(1, 4, 2))
    logsig = rng.normal(size=(1, 4, 2)) * 0.4
    closed = heads.gaussian_kl(Value(mu), Value(logsig)).data
    sigma = np.exp(logsig)
    draws = rng.standard_normal((100_000,) + mu.shape)
    z = mu + sigma * draws
    # log q(z) - log p(z), averaged over draws, summed over latent dims
    log_q = -0.5 * ((z - mu) / sigma) ** 2 - np.log(sigma) - 0.5 * np.log(2 * np.pi)
    log_p = -0.5 * z ** 2 - 0.5 * np.log(2 * np.pi)
    mc = (log_q - log_p).sum(axis=-1).mean(axis=0)
    np.testing.assert_allclose(closed, mc, rtol=0.02, atol=0.02)


def test_kl_nonnegative_property():
    rng = np.random.default_rng(1)
    for _ in range(50):
        kl = heads.gaussian_kl(Value(rng.normal(size=(2, 6, 2)) * 3),
                               Value(rng.normal(size=(2, 6, 2)))).data
        assert (kl >= -1e-12).all()


# -- receiver head ---------------------------------------------------------------


def test_zero_head_gives_uniform_receiver_probs():
    model = small_model(heads.RECEIVER, seed=3)
    model.params["head.w"].data[:] = 0.0
    model.params["head.b"].data[:] = 0.0
    report = heads.predict_receiver(make_corner(0), model)
    np.testing.assert_allclose(report.receiver_probs, np.full(22, 1 / 22))
    assert report.top3 == [0, 1, 2]  # uniform ties break by ascending index


def test_receiver_probs_form_distribution_and_top3_sorted():
    model = small_model(heads.RECEIVER, seed=4)
    for trial in range(5):
        report = heads.predict_receiver(make_corner(trial), model)
        assert abs(report.receiver_probs.sum() - 1.0) < 1e-6
        assert (report.receiver_probs >= 0).all()
        p = report.receiver_probs[report.top3]
        assert p[0] >= p[1] >= p[2]


def test_receiver_top3_exactly_invariant_under_reflection():
    model = small_model(heads.RECEIVER, seed=5)
    for trial in range(10):
        corner = make_corner(trial)
        base = heads.predict_receiver(corner, model)
        for g in cg.D2:
            ref = heads.predict_receiver(cg.apply(g, corner), model)
            assert ref.top3 == base.top3
            assert ref.receiver_probs.tobytes() == base.receiver_probs.tobytes()


def test_receiver_task_mismatch_rejected():
    model = small_model(heads.SHOT, seed=6)
    with pytest.raises(heads.TaskError, match="receiver"):
        heads.predict_receiver(make_corner(0), model)


# -- shot head --------------------------------------------------------------------


def test_zero_head_gives_half_probability():
    model = small_model(heads.SHOT, seed=7)
    model.params["head.w"].data[:] = 0.0
    model.params["head.b"].data[:] = 0.0
    assert heads.predict_shot_conditional(make_corner(1), 4, model) == pytest.approx(0.5)


def test_conditional_shot_reflection_invariant_and_in_range():
    model = small_model(heads.SHOT, seed=8)
    rng = np.random.default_rng(0)
    for trial in range(20):
        corner = make_corner(trial)
        idx = int(rng.integers(0, 22))
        p = heads.predict_shot_conditional(corner, idx, model)
        assert 0.0 < p < 1.0
        for g in cg.D2:
            q = heads.predict_shot_conditional(cg.apply(g, corner), idx, model)
            assert abs(p - q) < 1e-5


def test_conditional_shot_rejects_bad_index():
    model = small_model(heads.SHOT, seed=9)
    with pytest.raises(heads.TaskError, match="range"):
        heads.predict_shot_conditional(make_corner(0), 22, model)


def test_decomposition_matches_explicit_sum():
    receiver_model = small_model(heads.RECEIVER, seed=10)
    shot_model = small_model(heads.SHOT, seed=11)
    for trial in range(3):
        corner = make_corner(trial)
        report = heads.predict_shot(corner, receiver_model, shot_model)
        # independent explicit 22-term loop
        total = 0.0
        for i in range(22):
            p_r = heads.predict_receiver(corner, receiver_model).receiver_probs[i]
            p_s = heads.predict_shot_conditional(corner, i, shot_model)
            total += p_r * p_s
        assert abs(report.shot_prob - total) < 1e-6
        assert 0.0 <= report.shot_prob <= 1.0
        assert len(report.per_receiver) == 22


def test_decomposition_with_onehot_receiver_distribution():
    shot_model = small_model(heads.SHOT, seed=12)
    corner = make_corner(5)
    curve = heads.conditional_shot_curve(corner, shot_model)
    onehot = np.zeros(22)
    onehot[9] = 1.0
    assert float(onehot @ curve) == pytest.approx(curve[9])
    uniform_c = np.full(22, 0.37)
    probs = np.full(22, 1 / 22)
    assert float(probs @ uniform_c) == pytest.approx(0.37)


# -- CVAE -----------------------------------------------------------------------


def labeled_corner(seed=0):
    return make_corner(seed, labeled=True)


def test_cvae_loss_requires_labels_and_valid_outcome():
    model = small_model(heads.GENERATE, seed=13, team_side=cg.DEFENDING)
    with pytest.raises(heads.TaskError, match="label"):
        heads.cvae_loss(make_corner(0), 1, model, rng=np.random.default_rng(0))
    with pytest.raises(heads.TaskError, match="outcome"):
        heads.cvae_loss(labeled_corner(), 2, model, rng=np.random.default_rng(0))


def test_cvae_loss_finite_and_deterministic_with_eps():
    model = small_model(heads.GENERATE, seed=14, team_side=cg.ATTACKING)
    eps = np.random.default_rng(1).standard_normal((1, 22, 2))
    l1 = heads.cvae_loss(labeled_corner(1), 1, model, eps=eps)
    l2 = heads.cvae_loss(labeled_corner(1), 1, model, eps=eps)
    assert np.isfinite(l1.data)
    assert l1.data.tobytes() == l2.data.tobytes()


def test_cvae_loss_gradcheck():
    rng = np.random.default_rng(15)
    model = heads.build_model(heads.GENERATE, rng, symmetry_mode="group_convolution",
                              layer_count=1, team_side=cg.DEFENDING)
    corner = labeled_corner(2)
    eps = np.random.default_rng(3).standard_normal((1, 22, 2))
    names = sorted(model.params)
    arrays = [model.params[n].data.copy() for n in names]

    def fn(*arrs):
        m = heads.Model(task=heads.GENERATE, encoder_cfg=model.encoder_cfg,
                        params={n: Value(a) for n, a in zip(names, arrs)},
                        team_side=cg.DEFENDING)
        return float(heads.cvae_loss(corner, 1, m, eps=eps).data)

    loss = heads.cvae_loss(corner, 1, model, eps=eps)
    loss.backward()
    numeric = numeric_grad(fn, arrays)
    assert max_rel_error([model.params[n].grad for n in names], numeric) < 1e-4


# -- guided generation -------------------------------------------------------------


def test_generation_deterministic_under_seed():
    model = small_model(heads.GENERATE, seed=16, team_side=cg.DEFENDING)
    corner = labeled_corner(3)
    a = heads.generate_adjustment(corner, 0, cg.DEFENDING, 3, seed=42, model=model)
    b = heads.generate_adjustment(corner, 0, cg.DEFENDING, 3, seed=42, model=model)
    assert [s[0] for s in a.samples] == [s[0] for s in b.samples]
    c = heads.generate_adjustment(corner, 0, cg.DEFENDING, 3, seed=43, model=model)
    assert [s[0] for s in a.samples] != [s[0] for s in c.samples]


def test_generation_zero_noise_equals_decoder_mean():
    model = small_model(heads.GENERATE, seed=17, team_side=cg.ATTACKING)
    corner = labeled_corner(4)
    a = heads.generate_adjustment(corner, 1, cg.ATTACKING, 2, seed=1, model=model,
                                  noise_scale=0.0)
    assert a.samples[0][0] == a.samples[1][0]
    b = heads.generate_adjustment(corner, 1, cg.ATTACKING, 1, seed=99, model=model,
                                  noise_scale=0.0)
    assert a.samples[0][0] == b.samples[0][0]


def test_generation_touches_only_configured_team():
    model = small_model(heads.GENERATE, seed=18, team_side=cg.DEFENDING)
    corner = labeled_corner(5)
    report = heads.generate_adjustment(corner, 0, cg.DEFENDING, 2, seed=7, model=model)
    for adjusted, _ in report.samples:
        for p, q in zip(corner.players, adjusted.players):
            assert q.team == p.team
            assert q.height == p.height and q.weight == p.weight
            assert q.has_ball == p.has_ball
            if p.team == cg.ATTACKING:
                assert (p.x, p.y, p.vx, p.vy) == (q.x, q.y, q.vx, q.vy)
        changed = [(p.x != q.x or p.y != q.y)
                   for p, q in zip(corner.players, adjusted.players)
                   if p.team == cg.DEFENDING]
        assert any(changed)


def test_generation_validation():
    model = small_model(heads.GENERATE, seed=19, team_side=cg.DEFENDING)
    corner = labeled_corner(6)
    with pytest.raises(heads.TaskError, match="n_samples"):
        heads.generate_adjustment(corner, 0, cg.DEFENDING, 0, seed=1, model=model)
    with pytest.raises(heads.TaskError, match="generates"):
        heads.generate_adjustment(corner, 0, cg.ATTACKING, 1, seed=1, model=model)
    with pytest.raises(heads.TaskError, match="label"):
        heads.generate_adjustment(make_corner(7), 0, cg.DEFENDING, 1, seed=1,
                                  model=model)


def test_generation_scores_samples_when_models_given():
    gen = small_model(heads.GENERATE, seed=20, team_side=cg.DEFENDING)
    receiver_model = small_model(heads.RECEIVER, seed=21)
    shot_model = small_model(heads.SHOT, seed=22)
    report = heads.generate_adjustment(labeled_corner(8), 0, cg.DEFENDING, 2,
                                       seed=3, model=gen,
                                       receiver_model=receiver_model,
                                       shot_model=shot_model)
    assert report.shot_prob_before is not None
    for _, p_shot in report.samples:
        assert 0.0 <= p_shot <= 1.0
