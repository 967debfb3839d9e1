import hashlib
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hiddentail import attack as A
from hiddentail import harness as H
from hiddentail import model as M
from hiddentail.model import BOS, EOS, GenerationConfig, ImageSpec

from conftest import tiny_dataset

toks = st.lists(st.integers(0, 95), max_size=40)


# -- token F1 -------------------------------------------------------------------------------


def brute_f1(c, r):
    c = [t for t in c if t >= 8]
    r = [t for t in r if t >= 8]
    if not c and not r:
        return 1.0
    if not c or not r:
        return 0.0
    pool = list(r)
    overlap = 0
    for t in c:
        if t in pool:
            pool.remove(t)
            overlap += 1
    if overlap == 0:
        return 0.0
    p, q = overlap / len(c), overlap / len(r)
    return 2 * p * q / (p + q)


def test_f1_examples():
    ref = M.encode("abcdef")
    assert H.token_f1(ref, ref) == 1.0
    assert H.token_f1(ref[:3], ref) == pytest.approx(2 / 3)
    assert H.token_f1(M.encode("xyz"), ref) == 0.0
    assert H.token_f1([], []) == 1.0 and H.token_f1([], ref) == 0.0
    assert H.token_f1([BOS, EOS], [M.IM_START]) == 1.0


@given(toks, toks)
def test_f1_matches_brute_force(c, r):
    assert H.token_f1(c, r) == pytest.approx(brute_f1(c, r), abs=1e-12)
    assert H.token_f1(c, r) == pytest.approx(H.token_f1(r, c), abs=1e-12)
    assert 0.0 <= H.token_f1(c, r) <= 1.0


@given(toks)
def test_f1_self_is_one(a):
    assert H.token_f1(a, a) == 1.0


# -- aggregates ------------------------------------------------------------------------------


def result(i, total, limit=160):
    return H.PromptResult(i, total, max(total - 1, 0), total == limit, total, 0.5)


def test_asr_definition():
    agg = H.aggregate([result(i, n) for i, n in enumerate([160, 160, 80, 160])])
    assert agg.asr == 0.75 and agg.output_length == 140.0
    assert agg.quality_success == 0.5


def test_multipliers_and_empty_clean():
    rep = H.AttackReport("x", [result(0, 10), result(1, 30)], [result(0, 160), result(1, 160)])
    assert rep.multipliers()["output_length"] == 8.0
    zero = H.AttackReport("z", [H.PromptResult(0, 0, 0, False, 0, 1.0)], [result(0, 160)])
    assert zero.multipliers()["latency"] is None


@settings(max_examples=30)
@given(st.lists(st.integers(1, 160), min_size=1, max_size=20),
       st.lists(st.integers(1, 160), min_size=1, max_size=20))
def test_aggregates_recompute_from_csv(clean, adv):
    rep = H.AttackReport("r", [result(i, n) for i, n in enumerate(clean)],
                         [result(i, n) for i, n in enumerate(adv)])
    back = H.summary_from_csv(rep.to_csv())
    for cond, summ in (("clean", rep.clean_summary), ("adversarial", rep.adv_summary)):
        got = back[cond]
        assert got.asr == summ.asr and got.n == summ.n
        assert got.output_length == pytest.approx(summ.output_length)
        assert got.visible_length == pytest.approx(summ.visible_length)
        assert got.quality == pytest.approx(summ.quality, abs=1e-6)
    mult = back["adversarial"].output_length / back["clean"].output_length
    assert mult == pytest.approx(rep.multipliers()["output_length"])


def test_csv_header():
    rep = H.AttackReport("r", [result(0, 5)], [result(0, 160)])
    assert rep.to_csv().splitlines()[0] == ",".join(H.REPORT_FIELDS)


# -- evaluate ----------------------------------------------------------------------------------


def digest(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def test_evaluate_is_side_effect_free_and_consistent():
    params = M.init_params(3)
    ds = tiny_dataset()
    x = np.zeros((16, 16))
    delta = np.full((16, 16), 0.1)
    before = (params.digest(), digest(x, delta))
    gen = GenerationConfig(max_new_tokens=24)
    res = H.evaluate(params, x + delta, ds, gen)
    assert (params.digest(), digest(x, delta)) == before
    assert [r.prompt_idx for r in res] == ds.test_idx
    for r in res:
        assert r.visible_tokens <= r.total_tokens <= 24
        assert r.reached_limit == (r.total_tokens == 24)
        assert r.latency_proxy == r.total_tokens
        assert r.visible_tokens == M.render_visible(r.tokens)[1]


def test_evaluate_tallies_errors(monkeypatch):
    params = M.init_params(3)
    ds = tiny_dataset(n_opt=1, n_test=3)
    real = M.generate
    calls = {"n": 0}

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] == 2:
            raise M.CapacityError("boom")
        return real(*a, **k)

    monkeypatch.setattr(M, "generate", flaky)
    res = H.evaluate(params, np.zeros((16, 16)), ds, GenerationConfig(max_new_tokens=8))
    assert len(res) == 2 and res.errors == 1
    assert H.aggregate(res, res.errors).errors == 1


def test_evaluate_requires_test_split():
    ds = tiny_dataset(n_opt=2, n_test=0)
    with pytest.raises(ValueError):
        H.evaluate(M.init_params(3), np.zeros((16, 16)), ds, GenerationConfig())


def test_self_transfer_reproduces_report():
    params = M.init_params(5)
    ds = tiny_dataset()
    img = ImageSpec(np.full((16, 16), 0.5), image_id="img00")
    delta = np.random.default_rng(0).uniform(-0.2, 0.2, (16, 16))
    gen = GenerationConfig(max_new_tokens=16)
    a = H.evaluate_perturbation(params, img, delta, ds, gen, "self")
    b = H.run_transfer(delta, img, params, ds, gen, label="self")
    assert a.to_csv() == b.to_csv()


def test_clean_condition_independent_of_limit_when_eos_early(trained, trained_dataset, scene):
    img, _ = scene
    x = M.process_image(img)
    short = H.evaluate(trained, x, trained_dataset, GenerationConfig(max_new_tokens=160))
    long = H.evaluate(trained, x, trained_dataset, GenerationConfig(max_new_tokens=320))
    assert [r.tokens for r in short] == [r.tokens for r in long]
    assert H.aggregate(short).asr == 0.0


# -- histograms --------------------------------------------------------------------------------


@settings(max_examples=30)
@given(st.lists(st.integers(1, 160), min_size=1, max_size=30))
def test_histogram_conservation(lengths):
    rep = H.AttackReport("r", [result(i, n) for i, n in enumerate(lengths)],
                         [result(i, 160) for i in range(len(lengths))])
    hists = H.length_distributions([rep], 160)
    assert [h.name for h in hists] == ["clean_length", "adv_visible_length", "adv_total_length"]
    for h in hists:
        assert sum(h.counts) == len(lengths) and len(h.counts) == 16
        assert h.edges[1] - h.edges[0] == 10
    # every adversarial output sits at the limit: the top bin holds them all
    assert hists[2].counts[-1] == len(lengths)
    rows = H.histograms_csv(hists).splitlines()
    assert rows[0] == "series,bin_lo,bin_hi,count" and len(rows) == 1 + 48


def test_clean_total_is_visible_plus_eos(trained, trained_dataset, scene):
    img, _ = scene
    res = H.evaluate(trained, M.process_image(img), trained_dataset, GenerationConfig())
    assert all(r.total_tokens == r.visible_tokens + 1 for r in res)


# -- studies on a tiny setup -------------------------------------------------------------------


def test_loss_ablation_has_seven_arms_and_full_matches_standalone():
    params = M.init_params(5)
    ds = tiny_dataset()
    img = ImageSpec(np.full((16, 16), 0.5), image_id="img00")
    cfg = A.AttackConfig(iterations=3, tail_length=4)
    gen = GenerationConfig(max_new_tokens=12)
    out = H.run_ablation_losses(params, img, ds, cfg, gen)
    assert list(out) == ["sem", "spe", "eos", "sem+spe", "sem+eos", "spe+eos", "sem+spe+eos"]
    solo, _ = H.run_attack(params, img, ds, cfg, gen, label="sem+spe+eos")
    assert out["sem+spe+eos"].to_csv() == solo.to_csv()
    table = H.comparison_table(out).splitlines()
    assert len(table) == 8 and table[0].startswith("arm,asr")


def test_token_ablation_is_deterministic():
    params = M.init_params(5)
    ds = tiny_dataset()
    img = ImageSpec(np.full((16, 16), 0.5), image_id="img00")
    cfg = A.AttackConfig(iterations=2, tail_length=4)
    gen = GenerationConfig(max_new_tokens=12)
    a = H.run_ablation_token(params, img, ds, cfg, [BOS, M.BOX_END], gen)
    b = H.run_ablation_token(params, img, ds, cfg, [BOS, M.BOX_END], gen)
    assert list(a) == ["BOS", "BOX_END"]
    assert all(a[k].to_csv() == b[k].to_csv() for k in a)


def test_failed_combination_marked():
    table = H.comparison_table({"sem": None})
    assert table.splitlines()[1].startswith("sem,failed")
