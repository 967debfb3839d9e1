from dataclasses import replace

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hiddentail import attack as A
from hiddentail import model as M
from hiddentail import tensor as T
from hiddentail.attack import AttackConfig, DwaState
from hiddentail.model import BOS, EOS, ImageSpec
from hiddentail.tensor import ContractError, Tensor

from conftest import tiny_dataset

mpmath.mp.dps = 40


def mp_ce(z, t):
    return mpmath.log(mpmath.fsum(mpmath.e ** mpmath.mpf(v) for v in z)) - z[t]


def mp_softmax(xs):
    es = [mpmath.e ** mpmath.mpf(x) for x in xs]
    s = mpmath.fsum(es)
    return [float(e / s) for e in es]


@pytest.fixture(scope="module")
def raw7():
    return M.init_params(7)


@pytest.fixture(scope="module")
def image():
    return ImageSpec(np.round(np.random.default_rng(2).uniform(size=(16, 16)) * 255) / 255,
                     image_id="img00")


# -- config -----------------------------------------------------------------------------


def test_config_defaults():
    cfg = AttackConfig()
    assert cfg.alpha == 1 / 255 and cfg.epsilon == 64 / 255
    assert cfg.mu == (1.0, 1e3, 1e4)
    assert (cfg.iterations, cfg.tail_length, cfg.tail_token) == (2000, 64, BOS)
    assert (cfg.temperature, cfg.lambda_min, cfg.sigma) == (2.0, 0.15, 1e-8)


@pytest.mark.parametrize("bad", [dict(alpha=0), dict(epsilon=-1), dict(tail_length=0),
                                 dict(temperature=0), dict(lambda_min=1 / 3),
                                 dict(lambda_min=-0.1), dict(tail_token=EOS),
                                 dict(tail_token=30), dict(iterations=-1)])
def test_config_validation(bad):
    with pytest.raises(A.ConfigError):
        AttackConfig(**bad)


def test_with_losses_zeroes_excluded_scales():
    cfg = AttackConfig().with_losses(["sem", "eos"])
    assert cfg.mu == (1.0, 0.0, 1e4)
    with pytest.raises(A.ConfigError):
        AttackConfig().with_losses(["tail"])


# -- losses ---------------------------------------------------------------------------------


def test_loss_sem_cases():
    assert A.loss_sem(Tensor(np.zeros((3, 96))), [9, 10, 11]).item() == pytest.approx(np.log(96))
    z = np.zeros((2, 96))
    z[0, 9] = z[1, 10] = 50.0
    assert A.loss_sem(Tensor(z), [9, 10]).item() < 1e-20
    hand = [[2.0, 0.0, 0.0], [0.0, 2.0, 0.0]]
    oracle = float((mp_ce(hand[0], 0) + mp_ce(hand[1], 1)) / 2)
    assert A.loss_sem(Tensor(hand), [0, 1]).item() == pytest.approx(oracle, rel=1e-14)
    assert oracle == pytest.approx(0.2395, abs=1e-4)
    with pytest.raises(ContractError):
        A.loss_sem(Tensor(z), [])


def test_loss_spe_cases():
    z = np.zeros((5, 96))
    assert A.loss_spe(Tensor(z), 3, 2, BOS).item() == pytest.approx(np.log(96))
    z[3:, BOS] = 50.0
    assert A.loss_spe(Tensor(z), 3, 2, BOS).item() < 1e-20
    rng = np.random.default_rng(0)
    z = rng.normal(size=(4, 6))
    oracle = float((mp_ce(z[2], 5) + mp_ce(z[3], 5)) / 2)
    assert A.loss_spe(Tensor(z), 2, 2, 5).item() == pytest.approx(oracle, rel=1e-13)
    with pytest.raises(ContractError):
        A.loss_spe(Tensor(z), 2, 0, 5)
    with pytest.raises(ContractError):
        A.loss_spe(Tensor(z), 3, 2, 5)


def test_loss_eos_cases():
    assert A.loss_eos(Tensor(np.zeros((4, 96)))).item() == 0.0
    z = np.zeros((2, 96))
    z[:, EOS] = [1.0, -3.0]
    assert A.loss_eos(Tensor(z)).item() == -1.0
    z = np.random.default_rng(1).normal(size=(5, 96))
    assert A.loss_eos(Tensor(z)).item() == pytest.approx(sum(z[i][EOS] for i in range(5)) / 5)


# -- dwa -------------------------------------------------------------------------------------


def test_dwa_first_step_uniform():
    st1 = A.dwa_update(DwaState(), (4.0, 5.0, -2.0), AttackConfig())
    assert st1.lambdas == (1 / 3, 1 / 3, 1 / 3)
    assert st1.prev_losses == (4.0, 5.0, -2.0) and st1.t == 2


def test_dwa_equal_ratios_uniform():
    lam = A.dwa_weights((1.0, 1.0, 1.0), 2.0, 0.15)
    np.testing.assert_allclose(lam, [1 / 3] * 3, atol=1e-15)


def test_dwa_softmax_example_floor_inactive():
    lam = A.dwa_weights((1.0, 0.5, 0.2), 2.0, 0.15)
    np.testing.assert_allclose(lam, mp_softmax([0.5, 0.25, 0.1]), rtol=1e-13)
    np.testing.assert_allclose(lam, [0.4083, 0.3180, 0.2737], atol=1e-4)


def test_dwa_floor_then_renormalise():
    lam = A.dwa_weights((10.0, 0.0, 0.0), 0.5, 0.15)
    np.testing.assert_allclose(lam, [0.769, 0.1155, 0.1155], atol=1e-3)
    # renormalise-then-floor would instead leave (0.85, 0.15, 0.15)-like values summing to >1
    assert sum(lam) == pytest.approx(1.0, abs=1e-12)


def test_dwa_update_uses_ratios():
    cfg = AttackConfig()
    s = A.dwa_update(DwaState(), (2.0, 4.0, 1.0), cfg)
    s = A.dwa_update(s, (2.0, 2.0, 1.0), cfg)
    expect = A.dwa_weights((2 / (2 + 1e-8), 2 / (4 + 1e-8), 1 / (1 + 1e-8)), 2.0, 0.15)
    assert s.lambdas == expect


def test_dwa_zero_denominator_guarded():
    cfg = AttackConfig()
    s = A.dwa_update(DwaState(), (1.0, 1.0, -1e-8), cfg)
    s = A.dwa_update(s, (1.0, 1.0, 0.5), cfg)
    assert all(np.isfinite(s.lambdas)) and sum(s.lambdas) == pytest.approx(1.0, abs=1e-9)


loss_value = st.floats(-50, 50, allow_nan=False)


@settings(max_examples=200)
@given(st.lists(st.tuples(loss_value, loss_value, loss_value), min_size=1, max_size=50),
       st.floats(0.1, 5.0), st.floats(0.0, 0.33))
def test_dwa_simplex_property(seq, temp, floor):
    cfg = AttackConfig(temperature=temp, lambda_min=floor)
    s = DwaState()
    for cur in seq:
        s = A.dwa_update(s, cur, cfg)
        lam = np.asarray(s.lambdas)
        assert abs(lam.sum() - 1.0) <= 1e-9 and (lam >= 0).all()


def test_dwa_simplex_ten_thousand_updates():
    rng = np.random.default_rng(0)
    cfg = AttackConfig()
    s = DwaState()
    for _ in range(10_000):
        cur = (rng.uniform(0, 10), rng.uniform(0, 20), rng.normal(0, 5))
        s = A.dwa_update(s, cur, cfg)
        lam = np.asarray(s.lambdas)
        assert abs(lam.sum() - 1.0) <= 1e-9 and (lam >= 0).all()
        assert lam.min() >= 0.15 / (1 + 3 * 0.15) - 1e-12


@settings(max_examples=100)
@given(st.tuples(loss_value, loss_value, loss_value), st.tuples(loss_value, loss_value, loss_value),
       st.floats(0.01, 100))
def test_dwa_scale_consistent(prev, cur, c):
    # sigma is zero here so the ratio is exactly scale free
    cfg = AttackConfig(sigma=0.0)
    if any(abs(p) < 1e-3 for p in prev):
        return
    a = A.dwa_update(A.dwa_update(DwaState(), prev, cfg), cur, cfg).lambdas
    b = A.dwa_update(A.dwa_update(DwaState(), [p * c for p in prev], cfg),
                     [v * c for v in cur], cfg).lambdas
    np.testing.assert_allclose(a, b, atol=1e-9)


# -- total loss and pgd -------------------------------------------------------------------


def test_total_loss_examples():
    one = AttackConfig(mu_sem=1, mu_spe=1, mu_eos=1)
    third = (1 / 3, 1 / 3, 1 / 3)
    vals = lambda *v: [Tensor(x) for x in v]
    assert A.total_loss(vals(3.0, 6.0, 9.0), third, one).item() == pytest.approx(6.0)
    assert A.total_loss(vals(0.0, 0.0, 0.0), third, AttackConfig()).item() == 0.0
    out = A.total_loss(vals(4.5, 4.5, -1.0), third, AttackConfig()).item()
    assert out == pytest.approx((4.5 + 4500 - 10000) / 3) and out == pytest.approx(-1831.83, abs=0.01)


def test_total_loss_weights_are_constants():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        raw = [T.sum_(x), T.sum_(T.mul(x, x)), T.mean(x)]
        loss = A.total_loss(raw, (0.2, 0.3, 0.5), AttackConfig())
    T.backward(loss, tape)
    expect = 1 * 0.2 * 1 + 1e3 * 0.3 * 2 * x.data + 1e4 * 0.5 * 0.5
    np.testing.assert_allclose(x.grad, expect)


def test_pgd_examples():
    cfg = AttackConfig()
    d = A.pgd_step(np.zeros((16, 16)), np.ones((16, 16)), cfg)
    assert np.array_equal(d, np.full((16, 16), -1 / 255))
    at_edge = np.full((2, 2), cfg.epsilon)
    assert (A.pgd_step(at_edge, -np.ones((2, 2)), cfg) <= cfg.epsilon).all()
    d0 = np.random.default_rng(0).uniform(-0.1, 0.1, size=(3, 3))
    assert np.array_equal(A.pgd_step(d0, np.zeros((3, 3)), cfg), d0)
    with pytest.raises(ContractError):
        A.pgd_step(np.zeros(3), np.zeros(4), cfg)


@given(st.integers(1, 300), st.integers(0, 2 ** 31))
@settings(max_examples=30)
def test_pgd_projection_property(steps, seed):
    cfg = AttackConfig(alpha=0.05)
    rng = np.random.default_rng(seed)
    d = np.zeros(20)
    for _ in range(steps // 10 + 1):
        d = A.pgd_step(d, rng.normal(size=20), cfg)
        assert np.abs(d).max() <= cfg.epsilon


# -- gradient integrity -----------------------------------------------------------------------


def test_composite_gradient_small_instance(raw7, image):
    cfg = AttackConfig(tail_length=4)
    response = [40, EOS]
    x = M.process_image(image)
    f = A.composite_objective(raw7, x, [BOS, 30], response, (0.5, 0.3, 0.2), cfg)
    delta0 = np.random.default_rng(0).uniform(-0.1, 0.1, size=x.shape)
    assert len(A.teacher_sequence(response, cfg)) <= 6
    assert T.check_gradient(f, Tensor(delta0)) < 1e-4


# -- crafting -----------------------------------------------------------------------------


def small_cfg(**kw):
    base = dict(iterations=6, tail_length=4, seed=3)
    base.update(kw)
    return AttackConfig(**base)


def test_craft_zero_iterations_is_identity(raw7, image):
    pert = A.craft(raw7, image, tiny_dataset(), small_cfg(iterations=0))
    assert not pert.delta.any() and pert.trace == []
    img, feats = A.invert_to_pixels(M.process_image(image), pert.delta)
    assert np.array_equal(img.pixels, image.pixels)


def test_craft_trace_and_constraint(raw7, image):
    cfg = small_cfg(iterations=12, alpha=0.05, epsilon=0.12)
    pert = A.craft(raw7, image, tiny_dataset(), cfg)
    assert [r.step for r in pert.trace] == list(range(1, 13))
    assert all(r.delta_linf <= cfg.epsilon for r in pert.trace)
    assert np.abs(pert.delta).max() <= cfg.epsilon
    assert pert.trace[0].lambda_sem == 1 / 3
    for r in pert.trace:
        assert r.lambda_sem + r.lambda_spe + r.lambda_eos == pytest.approx(1.0, abs=1e-9)


def test_craft_deterministic_and_resumable(raw7, image):
    ds, cfg = tiny_dataset(), small_cfg(iterations=10)
    full = A.craft(raw7, image, ds, cfg)
    again = A.craft(raw7, image, ds, cfg)
    assert full.delta.tobytes() == again.delta.tobytes()
    first = A.craft(raw7, image, ds, cfg, stop_after=4)
    state = A.CraftState.from_json(first.state.to_json())
    rest = A.craft(raw7, image, ds, cfg, resume=state)
    assert rest.delta.tobytes() == full.delta.tobytes()
    rows = [r.csv_row() for r in first.trace + rest.trace]
    assert rows == [r.csv_row() for r in full.trace]


def test_craft_context_overflow(raw7, image):
    with pytest.raises(A.ConfigError):
        A.craft(raw7, image, tiny_dataset(), small_cfg(tail_length=240))


def test_craft_nan_aborts_with_trace(raw7, image):
    bad = raw7.copy()
    bad.weights["head_b"] = bad.weights["head_b"].copy()
    bad.weights["head_b"][EOS] = np.nan
    with pytest.raises(A.CraftingError) as err:
        A.craft(bad, image, tiny_dataset(), small_cfg())
    assert err.value.trace == []


def test_craft_needs_optimization_pairs(raw7, image):
    ds = tiny_dataset(n_opt=0, n_test=2)
    with pytest.raises(A.ConfigError):
        A.craft(raw7, image, ds, small_cfg())


def test_teacher_sequence():
    cfg = small_cfg(tail_length=3, tail_token=5)
    assert A.teacher_sequence([40, EOS], cfg) == [40, EOS, 5, 5, 5]


# -- inversion and artifacts -----------------------------------------------------------------


def test_invert_zero_delta_exact(image):
    x = M.process_image(image)
    img, feats = A.invert_to_pixels(x, np.zeros_like(x))
    assert np.array_equal(img.pixels, image.pixels) and np.array_equal(feats, x)


@settings(max_examples=50)
@given(st.integers(0, 2 ** 31))
def test_invert_quantisation_bound(seed):
    rng = np.random.default_rng(seed)
    px = np.round(rng.uniform(size=(16, 16)) * 255) / 255
    x = M.process_image(ImageSpec(px))
    delta = rng.uniform(-64 / 255, 64 / 255, size=x.shape)
    img, feats = A.invert_to_pixels(x, delta)
    target = np.clip(x + delta, -1, 1)
    assert np.abs(feats - target).max() <= 2 / 255 + 1e-12
    assert np.array_equal(np.round(img.pixels * 255) / 255, img.pixels)


def test_artifact_round_trip(raw7, image, tmp_path):
    pert = A.craft(raw7, image, tiny_dataset(), small_cfg())
    path = tmp_path / "a.htadv"
    A.save_perturbation(pert, M.process_image(image), path, extra={"asr_train": 0.5})
    blob = path.read_bytes()
    assert blob.startswith(b"HTADV1\n")
    back, meta, img = A.load_perturbation(path)
    assert back.delta.tobytes() == pert.delta.tobytes()
    assert meta["image_id"] == "img00" and meta["asr_train"] == 0.5
    assert meta["final_losses"]["total"] == pert.trace[-1].total
    assert back.config == pert.config
    expect, _ = A.invert_to_pixels(M.process_image(image), pert.delta)
    assert np.array_equal(img.pixels, expect.pixels)
    assert blob[-256:] == np.round(expect.pixels * 255).astype(np.uint8).tobytes()


def test_trace_csv(raw7, image, tmp_path):
    pert = A.craft(raw7, image, tiny_dataset(), small_cfg(iterations=3))
    path = tmp_path / "t.csv"
    A.write_trace(pert.trace, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,loss_sem,loss_spe,loss_eos,lambda_sem,lambda_spe,lambda_eos,total"
    assert len(lines) == 4
    assert float(lines[-1].split(",")[-1]) == pert.trace[-1].total
