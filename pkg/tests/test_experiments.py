from __future__ import annotations

import pytest

from solidmark import experiments as exp
from solidmark import imgdata as img
from solidmark.errors import ConfigurationError
from solidmark.memorization import EvalConfig, evaluate_model, fp_rate
from solidmark.outpaint import OutpaintConfig

import oracles

SPEC = img.PatternSpec("border", 2)


def _cfg(**kw):
    base = dict(pattern=SPEC, outpaint=OutpaintConfig(steps=10))
    base.update(kw)
    return EvalConfig(**base)


def test_fp_closed_form_against_oracles():
    assert exp.fp_rate_closed_form(0.1) == pytest.approx(0.19, abs=1e-15)
    assert exp.fp_rate_closed_form(0.005) == pytest.approx(0.009975, abs=1e-15)
    for d in (0.1, 0.05, 0.005, 0.3):
        assert exp.fp_rate_closed_form(d) == pytest.approx(oracles.fp_integral(d), abs=1e-6)
        mc = oracles.fp_monte_carlo(d, 200_000, seed=1)
        assert abs(mc - exp.fp_rate_closed_form(d)) <= 4 * exp.binomial_se(mc, 200_000)
    # frozen grid values (exact level-pair counts)
    assert exp.fp_rate_closed_form(0.1, grid=True) == 0.189300537109375
    assert exp.fp_rate_closed_form(0.05, grid=True) == 0.09527587890625
    assert exp.fp_rate_closed_form(0.005, grid=True) == 0.011688232421875


def test_percent_change_recomputed():
    run = exp.ExperimentRun("t", {}, {}, (0.1, 0.005), baseline="base")
    run.arms = [exp.Arm("base", {0.1: 40, 0.005: 0}, 100), exp.Arm("m", {0.1: 30, 0.005: 2}, 100)]
    assert run.percent_change("m", 0.1) == pytest.approx(-25.0)
    assert run.percent_change("m", 0.005) is None
    lines = run.to_csv().splitlines()
    assert lines[2].split(",")[:6] == ["m", "ok", "100", "30", "0.3", "-25.0"]
    assert run.plot_data(0.1) == "x,y\nbase,0.4\nm,0.3\n"


def test_pathology_fixture():
    demo = exp.percentile_pathology_fixture(0)
    d = demo.demonstration
    a, b = demo.dist_a.tolist(), demo.dist_b.tolist()
    assert d["p95_a"] == d["p95_b"] == oracles.sort_percentile(a, 0.95) == oracles.sort_percentile(b, 0.95)
    assert d["p96_a"] != d["p96_b"]
    assert d["p96_a"] == oracles.sort_percentile(a, 0.96)
    assert d["p96_b"] == oracles.sort_percentile(b, 0.96)
    assert d["eidetic_a"] != d["eidetic_b"]
    assert d["eidetic_a"] == oracles.scan_count([1 - v for v in a], d["eidetic_delta"])
    assert d["eidetic_b"] == oracles.scan_count([1 - v for v in b], d["eidetic_delta"])


def test_monochrome_bias_fixture():
    d = exp.monochrome_bias_fixture(0).demonstration
    assert d["modified_l2_mono"] < d["modified_l2_textured"]
    # neither generation copies a training image
    assert d["min_l2_mono"] > 0 and d["min_l2_textured"] > 0


def test_arm_failure_is_isolated():
    ds = exp.oracle_dataset(30, 8, seed=3)
    inner = exp.oracle_trainer("unmemorized", seed=1)

    def trainer(dset, spec):
        if spec.thickness == 3:
            raise RuntimeError("boom")
        return inner(dset, spec)

    run = exp.run_ablation("thickness", [2, 3], ds, trainer, _cfg())
    assert [a.status for a in run.arms][0] == "ok"
    assert run.arm("thickness=3").status.startswith("failed: RuntimeError")
    assert ",failed: RuntimeError: boom,0,,," in run.to_csv()


def test_ablation_structure():
    ds = exp.oracle_dataset(40, 8, seed=4)
    run = exp.run_ablation("placement", [("border", 2), ("center", 4)], ds,
                           exp.oracle_trainer("unmemorized", seed=2), _cfg())
    assert [a.name for a in run.arms] == ["placement=border:2", "placement=center:4"]
    assert all(a.n == 40 and a.status == "ok" for a in run.arms)
    with pytest.raises(ConfigurationError):
        exp.run_ablation("size", [1], ds, exp.oracle_trainer(), _cfg())


def test_shared_key_duplicates_memorized_by_oracle():
    base = exp.oracle_dataset(60, 8, seed=5)
    ids = base.ids()

    def trainer(ds, spec):
        return exp.oracle_trainer("memorizing", memorized_ids=ds.ids())(ds, spec)

    run = exp.run_duplication_study(base, [1, 4], trainer, _cfg(), per_level=5, independent_keys=False,
                                    level1_limit=5)
    assert run.arm("x4").counts[0.005] == 5 and run.arm("x1").counts[0.005] == 5
    assert run.arm("x4").extra["own_key_counts"]["0.005"] == 5
    assert run.arm("x4").extra["chance_any_key"]["0.1"] == pytest.approx(1 - (1 - fp_rate(0.1)) ** 4)
    assert ids[:5] == [r.id for r in run.reports["x4"].rows]


def test_identity_augmentation_equals_baseline():
    ds = exp.oracle_dataset(50, 8, seed=6)
    model, sched = exp.oracle_trainer("memorizing", memorized_ids=ds.ids()[:20])(ds, SPEC)
    run = exp.run_augmentation_study(model, sched, ds, _cfg(), ["identity", "crop:0", "blur:1"])
    assert [a.name for a in run.arms] == ["identity", "blur:1"]
    base = evaluate_model(model, sched, ds, _cfg())
    assert run.reports["identity"].to_csv() == base.to_csv()
    assert run.percent_change("identity", 0.1) == 0.0


def test_caption_methods():
    cap = "a photo of a circle"
    for it in (1, 5):
        out = exp.random_number_addition(cap, it, seed=3)
        nums = [int(t) for t in out.split() if t.isdigit()]
        assert len(nums) == it and all(0 <= n <= exp.RNA_MAX for n in nums)
        assert len(exp.caption_word_repetition(cap, it, 3).split()) == 5 + it
        assert len(exp.random_token_replacement(cap, it, 3).split()) == 5 + it
    assert exp.random_number_addition(cap, 3, 1) == exp.random_number_addition(cap, 3, 1)
    with pytest.raises(ConfigurationError):
        exp.mitigation_config(_cfg(), "dropout", 1)
    with pytest.raises(ConfigurationError):
        exp.mitigation_config(_cfg(), "gni", -0.1)


def test_gni_zero_bit_identical(tiny_model):
    state, ds, spec = tiny_model
    ec = EvalConfig(pattern=spec, outpaint=OutpaintConfig(steps=5))
    ids = ds.ids()[:4]
    run = exp.run_mitigation_study(state.denoiser(), state.schedule, ds, ec, {"gni": [0.0, 0.5]}, ids=ids)
    base, zero, half = (run.reports[k] for k in ("baseline", "gni:0", "gni:0.5"))
    assert base.to_csv() == zero.to_csv()
    assert base.to_csv() != half.to_csv()
    with pytest.raises(ConfigurationError):
        exp.run_mitigation_study(state.denoiser(), state.schedule, ds, ec, {"nope": [1]})
