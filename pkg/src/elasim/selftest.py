"""Fast invariant suite behind ``ela selftest``; stops at the first violation."""
from __future__ import annotations

import math
import time
import traceback
from fractions import Fraction

import numpy as np

from . import agent, attack, classify, config, laser, nn, percept, scene, seeding
from .textures import SIGN_CLASSES

CHECKS = []


def check(fn):
    CHECKS.append(fn)
    return fn


def _close(a, b, tol):
    assert abs(a - b) <= tol, f"{a!r} vs {b!r} (tol {tol})"


# ---------------------------------------------------------------------------
# nn


@check
def nn_gradients():
    rng = seeding.rng(42, "selftest", "nn")
    net = nn.DenseNet.create([5, 7, 4, 3], ["tanh", "relu", "identity"], rng)
    x = rng.standard_normal((6, 5))
    rep = nn.grad_check(net, lambda out: (0.5 * float(np.sum(out**2)), out), x)
    assert rep.passed, f"dense gradients off: {rep.max_rel_error}"


@check
def nn_softmax_simplex():
    rng = seeding.rng(7, "selftest", "softmax")
    p = nn.softmax(rng.standard_normal((20, 7)) * 30)
    assert np.all(p >= 0) and np.all(p <= 1)
    assert np.max(np.abs(p.sum(axis=-1) - 1.0)) < 1e-9


@check
def nn_entropy_independent_of_mean():
    ls = np.array([-0.3, 0.1, 0.4])
    _, e1 = nn.gaussian_logprob_entropy(np.zeros(3), ls, np.zeros(3))
    _, e2 = nn.gaussian_logprob_entropy(np.full(3, 5.0), ls, np.zeros(3))
    assert e1 == e2


@check
def nn_determinism():
    a = nn.DenseNet.create([4, 8, 2], ["relu", "identity"], seeding.rng(3, "x"))
    b = nn.DenseNet.create([4, 8, 2], ["relu", "identity"], seeding.rng(3, "x"))
    assert nn.dumps(a) == nn.dumps(b)


# ---------------------------------------------------------------------------
# scene


@check
def scene_fit_round_trip():
    g = scene.SignGeometry(60.3, 40.7, 14.0, 9.0, 0.7)
    fit = scene.fit_ellipse(g.boundary(48))
    assert np.max(np.abs(fit.boundary(48) - g.boundary(48))) < 0.1


@check
def scene_bbox_contains_corners():
    world = scene.WorldConfig()
    tr = scene.make_trajectory(world, "straight", 10, 1)
    cam = world.attacker_camera()
    for pose in tr.poses:
        box = scene.project_vehicle_bbox(world, pose)
        px, depth = cam.project(scene.vehicle_corners(world, pose))
        px = px[depth > 0]
        assert np.all(px[:, 0] >= box.x_min - 1e-9) and np.all(px[:, 0] <= box.x_max + 1e-9)
        assert np.all(px[:, 1] >= box.y_min - 1e-9) and np.all(px[:, 1] <= box.y_max + 1e-9)


@check
def scene_determinism():
    world = scene.WorldConfig(label="90")
    tr = scene.default_routes(world, 2, 5, 4)
    a = scene.generate_dataset(world, tr, 4)
    b = scene.generate_dataset(world, scene.default_routes(world, 2, 5, 4), 4)
    assert all(np.array_equal(x.image, y.image) for x, y in zip(a.frames, b.frames))


# ---------------------------------------------------------------------------
# percept


@check
def percept_mask_symmetry():
    g1 = scene.SignGeometry(30.2, 33.9, 12.0, 7.0, 0.4)
    m1 = percept.render_mask(g1, 64, 64)
    # (a, b, delta) and (b, a, delta + pi/2) describe the same region
    i, j = np.meshgrid(np.arange(64.0), np.arange(64.0))
    q_swapped = percept.quadratic_form((30.2, 33.9, 7.0, 12.0, 0.4 + math.pi / 2), i, j)
    q_turned = percept.quadratic_form((30.2, 33.9, 12.0, 7.0, 0.4 + math.pi), i, j)
    assert np.array_equal(m1, q_turned <= 1.0)
    assert np.array_equal(m1, q_swapped <= 1.0 + 1e-12) or np.sum(m1 != (q_swapped <= 1.0)) == 0


@check
def percept_iou_properties():
    a = percept.render_mask(scene.SignGeometry(20, 20, 9, 6, 0.3), 40, 40)
    b = percept.render_mask(scene.SignGeometry(22, 19, 8, 7, 1.0), 40, 40)
    assert percept.iou(a, b) == percept.iou(b, a)
    assert 0.0 <= percept.iou(a, b) < 1.0 and percept.iou(a, a) == 1.0


@check
def percept_decoder_total():
    ranges = percept.DecoderRanges(128, 128)
    raw = seeding.rng(0, "selftest", "decoder").standard_normal((10_000, 5)) * 50
    params, _ = percept.decode(raw, ranges)
    for p in params[::97]:
        percept._to_geometry(p, "circle")
    assert np.all(params[:, 2] >= params[:, 3]) and np.all(params[:, 3] > 0)
    assert np.all((params[:, 4] >= 0) & (params[:, 4] < math.pi))


# ---------------------------------------------------------------------------
# laser


@check
def laser_spectrum_continuous():
    for edge in (440.0, 490.0, 510.0, 580.0, 645.0):
        lo, hi = laser.wavelength_to_rgb(edge - 1e-13), laser.wavelength_to_rgb(edge + 1e-13)
        assert np.max(np.abs(lo - hi)) < 1e-12, edge
    rgb = np.array([laser.wavelength_to_rgb(x) for x in np.linspace(400, 700, 301)])
    assert rgb.min() >= 0 and rgb.max() <= 1


@check
def laser_composite_rules():
    rng = seeding.rng(5, "selftest", "laser")
    img = scene.quantize(rng.uniform(0, 1, (24, 30, 3)))
    mask = np.zeros((24, 30), bool)
    mask[5:18, 8:22] = True
    p = laser.LaserParams(1.1, 6.0, 530.0)
    out = laser.composite(img, mask, p, (15.0, 11.0), 0.7)
    assert np.array_equal(out[~mask], img[~mask])
    assert np.all(out[mask] >= img[mask])
    assert np.array_equal(laser.composite(img, mask, p, (15.0, 11.0), 0.0), img)
    c1 = laser.rasterize_beam(p, (10.0, 8.0), 30, 24)
    c2 = laser.rasterize_beam(p, (13.0, 10.0), 30, 24)
    assert np.array_equal(c1[:-2, :-3], c2[2:, 3:])


# ---------------------------------------------------------------------------
# classify


@check
def classify_disjoint_and_pure():
    s = [classify.create_classifier(w, sd) for w, sd in ((16, 10), (12, 11))]
    v = [classify.create_classifier(20, 20, "victim")]
    classify.check_disjoint(s, v)
    try:
        classify.check_disjoint(s, [classify.create_classifier(16, 30, "victim")])
    except ValueError:
        pass
    else:
        raise AssertionError("shared width was accepted")
    img = scene.quantize(seeding.rng(1, "crop").uniform(0, 1, (64, 64, 3)))
    g = scene.SignGeometry(30.4, 28.7, 10.0, 8.0, 0.2)
    assert np.array_equal(classify.crop_sign(img, g), classify.crop_sign(img, g))
    p = s[0].probs(classify.to_features(classify.crop_sign(img, g))[None])
    assert abs(p.sum() - 1.0) < 1e-9


# ---------------------------------------------------------------------------
# agent


@check
def agent_action_decoding():
    raw = seeding.rng(2, "selftest", "actions").standard_normal((100_000, 3)) * 20
    phi, omega, lam = agent.decode_action(raw)
    assert np.all((phi >= 0) & (phi < math.pi))
    assert np.all((omega >= laser.OMEGA_MIN) & (omega <= laser.OMEGA_MAX))
    assert np.all((lam >= laser.LAMBDA_MIN) & (lam <= laser.LAMBDA_MAX))


@check
def agent_ratio_one():
    pol = agent.create_policy(3)
    rng = seeding.rng(3, "selftest", "ppo")
    states = rng.uniform(0, 1, (16, agent.STATE_DIM))
    raw, logp, _ = agent.policy_act_batch(pol, states, rng)
    adv = rng.standard_normal(16)
    diag, _ = agent.ppo_losses(pol, states, raw, logp, adv, adv, agent.PPOConfig(), with_grad=False)
    assert abs(diag["ratio_max"] - 1) < 1e-12 and abs(diag["ratio_min"] - 1) < 1e-12
    ratio = np.ones(16)
    assert np.array_equal(agent.clipped_objective(ratio, adv, 0.2), ratio * adv)


@check
def agent_gae_oracle():
    rng = seeding.rng(4, "selftest", "gae")
    for n in range(1, 33):
        r = [Fraction(int(x), 7) for x in rng.integers(-20, 20, n)]
        v = [Fraction(int(x), 5) for x in rng.integers(-20, 20, n)]
        d = [bool(x) for x in rng.random(n) < 0.2]
        g, lam = Fraction(99, 100), Fraction(19, 20)
        adv, _ = agent.compute_gae(r, v, d, Fraction(0), g, lam)
        for t in range(n):
            total, disc = Fraction(0), Fraction(1)
            for k in range(t, n):
                nv = 0 if (d[k] or k == n - 1) else v[k + 1]
                total += disc * (r[k] + g * nv - v[k])
                if d[k]:
                    break
                disc *= g * lam
            assert adv[t] == total, (n, t)


@check
def agent_reward_arithmetic():
    cfg = agent.RewardConfig()
    assert agent.reward_appear(8.0, 550.0, cfg) == 0.5
    assert agent.reward_appear(8.0, 400.0, cfg) == 0.0
    assert agent.reward_appear(4.0, 550.0, cfg) == 4.0 * 0.05 + 0.5
    a = agent.reward_attack([0.2, 0.5, 0.9], False, 3, cfg)
    b = agent.reward_attack([0.2, 0.6, 0.9], False, 3, cfg)
    assert b <= a


# ---------------------------------------------------------------------------
# attack and harness


@check
def attack_window_matches_full_frame():
    world = scene.WorldConfig(label="90")
    tr = scene.default_routes(world, 2, 5, 9)
    f = scene.generate_dataset(world, tr, 9).frames[2]
    tg = attack.make_target(f, f.geometry, SIGN_CLASSES.index("90"))
    p = laser.LaserParams(0.9, 5.0, 610.0)
    win = attack.composite_window(tg, [p.phi], [p.omega], [p.wavelength], 0.7)[0]
    full = scene.quantize(laser.composite(f.image, f.mask, p, tg.anchor, 0.7))
    x0, y0, x1, y1 = tg.window
    assert np.array_equal(win, full[y0:y1, x0:x1])


@check
def config_hash_order_free():
    a = config.RunConfig()
    a.update_lines(["seed = 5", "[ppo]", "lr = 0.001"])
    b = config.RunConfig()
    b.update_lines(["ppo.lr = 0.001", "seed = 5"])
    assert a.hash() == b.hash()


def run(quick=False, log=print):
    for fn in CHECKS:
        t0 = time.perf_counter()
        try:
            fn()
        except Exception:
            log(f"FAIL {fn.__name__}")
            log(traceback.format_exc())
            return False
        log(f"ok   {fn.__name__} ({1e3 * (time.perf_counter() - t0):.0f} ms)")
    log(f"{len(CHECKS)} checks passed")
    return True
