import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from elasim import agent, attack, classify, laser, nn, scene, seeding
from elasim.errors import ConfigError

from oracles import gae_double_loop

CFG = agent.RewardConfig()


def zero_policy():
    pol = agent.create_policy(0)
    for p in pol.net.params():
        p[...] = 0.0
    return pol


# actions


def test_zero_policy_decodes_to_midpoints():
    pol = zero_policy()
    state = np.full(agent.STATE_DIM, 0.3)
    act, _, _ = agent.policy_act(pol, state, "mean")
    assert act.params.phi == pytest.approx(math.pi / 2, abs=1e-15)
    assert act.params.omega == pytest.approx(6.5, abs=1e-15)
    assert act.params.wavelength == pytest.approx(550.0, abs=1e-12)


def test_vanishing_std_matches_mean_mode():
    pol = agent.create_policy(3)
    pol.log_std[...] = -10.0
    rng = seeding.rng(1, "sample")
    for _ in range(20):
        s = rng.uniform(0, 1, agent.STATE_DIM)
        m, _, _ = agent.policy_act(pol, s, "mean")
        a, _, _ = agent.policy_act(pol, s, "sample", rng)
        assert abs(a.params.phi - m.params.phi) < 1e-3
        assert abs(a.params.omega - m.params.omega) < 1e-3
        # the wavelength spans 300 nm, so compare it on the unit scale of the box
        assert abs(a.params.wavelength - m.params.wavelength) / 300.0 < 1e-3


def test_logprob_recomputes_exactly():
    pol = agent.create_policy(4)
    rng = seeding.rng(2, "lp")
    states = rng.uniform(0, 1, (30, agent.STATE_DIM))
    for s in states:
        act, logp, value = agent.policy_act(pol, s, "sample", rng)
        again = agent.action_logprob(pol, s[None], act.raw[None])[0]
        assert abs(again - logp) <= 1e-12
        assert value == pytest.approx(nn.forward(pol.value, s)[0], abs=0)


def test_squash_jacobian_stable():
    x = np.array([[0.0, 2.0, -3.0], [400.0, -400.0, 1e-3]])
    direct = np.sum(np.log(1 - np.tanh(x[:1]) ** 2), axis=-1)
    assert agent.log_squash_jacobian(x[:1]) == pytest.approx(direct, rel=1e-12)
    assert np.all(np.isfinite(agent.log_squash_jacobian(x)))


def test_decoding_fuzz():
    raw = seeding.rng(9, "fuzz").standard_normal((100_000, 3)) * np.array([1.0, 30.0, 1e3])
    phi, omega, lam = agent.decode_action(raw)
    assert np.all((phi >= 0) & (phi < math.pi))
    assert np.all((omega >= laser.OMEGA_MIN) & (omega <= laser.OMEGA_MAX))
    assert np.all((lam >= laser.LAMBDA_MIN) & (lam <= laser.LAMBDA_MAX))
    for r in raw[::997]:
        agent.to_params(r)


def test_state_in_unit_box():
    g = scene.SignGeometry(140.0, -3.0, 70.0, 20.0, 3.1)
    s = agent.make_state(g, laser.LaserParams(3.0, 12.0, 700.0), 128, 128)
    assert s.shape == (8,) and np.all((s >= 0) & (s <= 1))


# rewards


def test_attack_reward_examples():
    assert agent.reward_attack([0.1, 0.2, 0.3], True, 3, CFG) == 9.7
    assert agent.reward_attack([0.9, 0.8, 1.0], False, 3, CFG) == pytest.approx(-1.2, abs=1e-12)
    assert agent.reward_attack([0.0, 0.0, 0.0], False, 1, CFG) == pytest.approx(-0.1, abs=1e-15)
    with pytest.raises(ValueError):
        agent.reward_attack([], False, 1, CFG)


def test_appearance_reward_examples_bit_exact():
    assert agent.reward_appear(5.0, 550.0, CFG) == 0.65
    assert agent.reward_appear(10.0, 380.0, CFG) == -0.6
    assert agent.reward_appear(9.0, 400.0, CFG) == (8.0 - 9.0) * 0.05
    assert agent.reward_appear(9.0, 700.0, CFG) == (8.0 - 9.0) * 0.05


def test_total_reward_examples():
    assert agent.reward_total(9.7, 0.65, CFG) == 9.83
    cfg0 = agent.RewardConfig(gamma2=0.0)
    assert agent.reward_total(-1.3, 0.4, cfg0) == -1.3
    cfg2 = agent.RewardConfig(gamma1=2.0, gamma2=0.4)
    assert agent.reward_total(9.7, 0.65, cfg2) == pytest.approx(2 * 9.83, abs=1e-12)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=5), st.integers(0, 4), st.floats(0, 0.5), st.integers(1, 10))
def test_attack_reward_non_increasing_in_confidence(probs, k, bump, steps):
    k %= len(probs)
    higher = list(probs)
    higher[k] = min(1.0, higher[k] + bump)
    assert agent.reward_attack(higher, False, steps, CFG) <= agent.reward_attack(probs, False, steps, CFG)


@given(st.floats(1, 12), st.floats(0, 3), st.floats(401, 699))
def test_appearance_reward_linear_in_width(omega, h, lam):
    diff = agent.reward_appear(omega + h, lam, CFG) - agent.reward_appear(omega, lam, CFG)
    assert diff == pytest.approx(-CFG.r_omega * h, abs=1e-12)


def test_reward_config_validation():
    with pytest.raises(ValueError):
        agent.RewardConfig(r_success=0.0)
    with pytest.raises(ValueError):
        agent.RewardConfig(alpha=-1.0)
    with pytest.raises(ValueError):
        agent.RewardConfig(lambda_min=700.0, lambda_max=400.0)


# advantage estimation


def test_td_residual_example():
    adv, ret = agent.compute_gae([1.0], [0.4], [False], last_value=0.5, gamma=0.99, lam=0.0)
    assert adv[0] == pytest.approx(1.095, abs=1e-12) and ret[0] == pytest.approx(1.495, abs=1e-12)


def test_telescoping_to_reward_to_go():
    r = [1.0, -2.0, 0.5, 3.0]
    adv, _ = agent.compute_gae(r, [0.0] * 4, [False, False, False, True], gamma=0.9, lam=1.0)
    want = [sum(0.9**k * r[t + k] for k in range(4 - t)) for t in range(4)]
    assert adv == pytest.approx(want, abs=1e-12)


def test_gae_matches_double_loop_exactly():
    rng = seeding.rng(11, "gae")
    g, lam = Fraction(99, 100), Fraction(95, 100)
    for n in range(1, 33):
        for trial in range(3):
            r = [Fraction(int(x), 8) for x in rng.integers(-40, 40, n)]
            v = [Fraction(int(x), 16) for x in rng.integers(-40, 40, n)]
            d = [bool(x) for x in rng.random(n) < 0.25]
            last = Fraction(int(rng.integers(-10, 10)), 3)
            adv, ret = agent.compute_gae(r, v, d, last, g, lam)
            assert adv == gae_double_loop(r, v, d, g, lam, last)
            assert ret == [a + b for a, b in zip(adv, v)]


def test_empty_buffer_rejected():
    with pytest.raises(ValueError):
        agent.compute_gae([], [], [])


def test_advantage_normalization():
    a = agent.normalize_advantages([1.0, 2.0, 3.0, 10.0])
    assert abs(a.mean()) < 1e-12 and abs(a.std() - 1) < 1e-6


# PPO


def test_clipped_objective_examples():
    assert agent.clipped_objective(1.5, 2.0, 0.2) == pytest.approx(2.4, abs=1e-12)
    assert agent.clipped_objective(0.5, -1.0, 0.2) == pytest.approx(-0.8, abs=1e-12)


def batch(seed=5, n=40):
    pol = agent.create_policy(seed)
    rng = seeding.rng(seed, "batch")
    states = rng.uniform(0, 1, (n, agent.STATE_DIM))
    raw, logp, values = agent.policy_act_batch(pol, states, rng)
    adv = rng.standard_normal(n)
    ret = values + rng.standard_normal(n)
    return pol, states, raw, logp, adv, ret


def test_ratio_is_one_at_old_parameters():
    pol, states, raw, logp, adv, ret = batch()
    diag, _ = agent.ppo_losses(pol, states, raw, logp, adv, ret, agent.PPOConfig())
    assert abs(diag["ratio_min"] - 1) <= 1e-12 and abs(diag["ratio_max"] - 1) <= 1e-12
    assert diag["clip_fraction"] == 0.0
    assert diag["policy_loss"] == pytest.approx(-adv.mean(), abs=1e-12)
    ones = np.ones_like(adv)
    assert np.array_equal(agent.clipped_objective(ones, adv, 0.2), adv)


@pytest.mark.parametrize("shift", [0.0, 0.05, 0.6])
def test_ppo_gradients_match_finite_differences(shift):
    pol, states, raw, logp, adv, ret = batch(n=12)
    # offsetting the stored log-probs moves ratios off 1; 0.6 puts some beyond the clip
    old = logp + shift * np.sign(np.sin(np.arange(len(logp)) + 0.3))
    cfg = agent.PPOConfig()
    _, (pg, vg) = agent.ppo_losses(pol, states, raw, old, adv, ret, cfg)
    params = pol.policy_params() + pol.value.params()
    grads = pg + vg
    rng = seeding.rng(8, "probe")
    h = 1e-6
    for k, p in enumerate(params):
        flat = p.reshape(-1)
        for idx in rng.choice(flat.size, size=min(6, flat.size), replace=False):
            orig = flat[idx]
            flat[idx] = orig + h
            lp = agent.ppo_losses(pol, states, raw, old, adv, ret, cfg, with_grad=False)[0]["total"]
            flat[idx] = orig - h
            lm = agent.ppo_losses(pol, states, raw, old, adv, ret, cfg, with_grad=False)[0]["total"]
            flat[idx] = orig
            num = (lp - lm) / (2 * h)
            ana = grads[k].reshape(-1)[idx]
            assert abs(num - ana) <= 1e-4 * max(abs(num), abs(ana), 1e-6)


def test_ppo_update_changes_policy_and_reports():
    pol, states, raw, logp, adv, ret = batch()
    before = pol.net.flat_params().copy()
    hist = agent.ppo_update(pol, agent.make_optim(pol), states, raw, logp, adv, ret, agent.PPOConfig(), seeding.rng(1))
    assert len(hist) == 4 and not any(h["aborted"] for h in hist)
    assert hist[0]["ratio_min"] <= 1.0 <= hist[0]["ratio_max"]
    assert not np.array_equal(before, pol.net.flat_params())


def test_ratio_blowup_aborts_and_restores():
    pol, states, raw, logp, adv, ret = batch()
    optim = agent.make_optim(pol)
    snap = [p.copy() for p in pol.policy_params() + pol.value.params()]
    bad = logp.copy()
    bad[3] -= 20.0  # ratio e^20 far above the limit
    hist = agent.ppo_update(pol, optim, states, raw, bad, adv, ret, agent.PPOConfig(), seeding.rng(1))
    assert hist[-1]["aborted"]
    assert all(np.array_equal(a, b) for a, b in zip(snap, pol.policy_params() + pol.value.params()))
    assert optim.policy.step == 0


def test_entropy_does_not_depend_on_state():
    pol, states, raw, logp, adv, ret = batch()
    d1, _ = agent.ppo_losses(pol, states[:5], raw[:5], logp[:5], adv[:5], ret[:5], agent.PPOConfig(), False)
    d2, _ = agent.ppo_losses(pol, states[5:15], raw[5:15], logp[5:15], adv[5:15], ret[5:15], agent.PPOConfig(), False)
    assert d1["entropy"] == d2["entropy"]


# training


@pytest.fixture(scope="module")
def tiny_targets():
    world = scene.WorldConfig(label="90")
    ds = scene.generate_dataset(world, scene.default_routes(world, 3, 8, 1), 1)
    li = classify.SIGN_CLASSES.index("90")
    routes = []
    for r in ds.train_routes:
        routes.append([attack.make_target(f, f.geometry, li) for f in ds.frames if f.route == r])
    surrogates = [classify.create_classifier(w, s) for w, s in ((24, 10), (16, 11))]
    return routes, surrogates


def test_training_is_bit_reproducible(tiny_targets, tmp_path):
    routes, sur = tiny_targets
    cfg = agent.AgentConfig(epochs=2, segments_per_epoch=4)
    runs = []
    for k in range(2):
        pol, curves = agent.train_agent(routes, sur, cfg, seed=7)
        agent.save_policy(tmp_path / f"p{k}.elan", tmp_path / f"v{k}.elan", pol, cfg.reward)
        runs.append(((tmp_path / f"p{k}.elan").read_bytes(), (tmp_path / f"v{k}.elan").read_bytes(), curves.rows()))
    assert runs[0] == runs[1]
    assert len(runs[0][2]) == 2
    back = agent.load_policy(tmp_path / "p0.elan", tmp_path / "v0.elan")
    assert np.array_equal(back.log_std, pol.log_std)
    assert "reward.r_success = 10.0" in nn.describe(tmp_path / "p0.elan")


def test_training_curve_bounds(tiny_targets):
    routes, sur = tiny_targets
    _, curves = agent.train_agent(routes, sur, agent.AgentConfig(epochs=2, segments_per_epoch=3), seed=1)
    assert all(1 <= s <= agent.N_MAX for s in curves.mean_steps)
    assert all(0 <= a <= 1 for a in curves.train_asr)


def test_training_needs_inputs():
    with pytest.raises(ConfigError):
        agent.train_agent([], [classify.create_classifier(8, 1)])
