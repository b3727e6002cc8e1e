import json
import math
from dataclasses import replace

import pytest

from mpsr_engine.benchmark import (
    ABLATIONS,
    BENCH_PRESETS,
    BOTH_REGIMES,
    VARIANTS,
    BenchmarkResult,
    print_benchmark,
    _kshot_sets,
    run_benchmark,
)
from mpsr_engine.errors import ConfigError
from mpsr_engine.fewshot import ScaleRange, instance_scale
from mpsr_engine.synthetic import PRESETS as DATA_PRESETS, ShapeClass


@pytest.fixture
def one_scale_spec():
    # post-resize every object lands inside the tiny preset's limited window
    return replace(DATA_PRESETS["tiny"], classes=(
        ShapeClass("disk", "disk", 4, ((40, 1.0),)),
        ShapeClass("square", "square", 4, ((40, 1.0),)),
    ))


def test_wins_count_seeds():
    rows = []
    maps = [
        # (mpsr random, fpn random, mpsr limited, fpn limited)
        (0.5, 0.4, 0.30, 0.20),
        (0.2, 0.3, 0.25, 0.35),
        (0.4, 0.4, 0.10, 0.15),
    ]
    for seed, (mr, fr, ml, fl) in enumerate(maps):
        rows += [
            {"seed": seed, "variant": "mpsr", "regime": "random", "novel_map": mr},
            {"seed": seed, "variant": "baseline_fpn", "regime": "random", "novel_map": fr},
            {"seed": seed, "variant": "mpsr", "regime": "limited", "novel_map": ml},
            {"seed": seed, "variant": "baseline_fpn", "regime": "limited", "novel_map": fl},
        ]
    res = BenchmarkResult(config={}, rows=rows)
    assert res.wins() == {
        "seeds": 3, "mpsr_ge_baseline": 1, "mpsr_ge_baseline_random": 2, "limited_below_random": 2,
    }
    with pytest.raises(KeyError):
        res.novel_map(5, "mpsr", "random")


def test_print_benchmark_reports_both_regimes(capsys):
    rows = [
        {"seed": 0, "variant": v, "regime": reg, "novel_map": m, "base_map": 0.5, "config_hash": "abc"}
        for v, reg, m in [("mpsr", "random", 0.5), ("baseline_fpn", "random", 0.4),
                          ("mpsr", "limited", 0.3), ("baseline_fpn", "limited", 0.2)]
    ]
    print_benchmark(BenchmarkResult(config={}, rows=rows))
    out = capsys.readouterr().out
    assert "1/1 seeds (limited)" in out and "1/1 (random)" in out


def test_multiscale_baselines_are_ablations():
    assert ABLATIONS["fpn_scale_aug"] == {"mode": "baseline_fpn", "multiscale": "scale_aug"}
    assert ABLATIONS["fpn_image_pyramids"] == {"mode": "baseline_fpn", "multiscale": "image_pyramids"}
    assert BOTH_REGIMES == {"mpsr", "baseline_fpn", "fpn_scale_aug", "fpn_image_pyramids"}


def test_unknown_presets():
    with pytest.raises(ConfigError):
        run_benchmark(replace(BENCH_PRESETS["tiny"], data="huge"))
    with pytest.raises(ConfigError):
        run_benchmark(replace(BENCH_PRESETS["tiny"], train="huge"))


@pytest.mark.slow
def test_tiny_benchmark(tmp_path, one_scale_spec):
    bench = replace(BENCH_PRESETS["tiny"], seeds=(0,))
    res = run_benchmark(bench, data_spec=one_scale_spec, out_dir=tmp_path)
    assert {(r["variant"], r["regime"]) for r in res.rows} == {
        (v, reg) for v in VARIANTS for reg in ("random", "limited")
    }
    for r in res.rows:
        assert 0.0 <= r["novel_map"] <= 1.0 and not math.isnan(r["base_map"])
    doc = json.loads((tmp_path / "benchmark.json").read_text())
    assert doc["wins"]["seeds"] == 1
    assert (tmp_path / "logs" / "0_mpsr_base.jsonl").exists()


@pytest.mark.slow
def test_tiny_benchmark_ablations(tmp_path, one_scale_spec):
    bench = replace(BENCH_PRESETS["tiny"], seeds=(0,), ablations=True)
    res = run_benchmark(bench, data_spec=one_scale_spec)
    variants = {r["variant"] for r in res.rows}
    assert variants == set(VARIANTS) | set(ABLATIONS)
    for name in ABLATIONS:
        regimes = {r["regime"] for r in res.rows if r["variant"] == name}
        assert regimes == ({"random", "limited"} if name in BOTH_REGIMES else {"random"}), name


def test_limited_regime_confines_only_novel_classes(toy_dataset, tiny_cfg):
    # at the tiny input size only one class-1 object and no class-0 object fall in the window
    bench = BENCH_PRESETS["tiny"]
    sets = _kshot_sets(toy_dataset, bench, tiny_cfg, seed=0)
    window = ScaleRange(*bench.limited)
    det = tiny_cfg.detector
    limited = sets["limited"]
    assert limited.instance_count(0) == 1 and limited.instance_count(1) == 1
    for im in limited.images:
        for a in im.annotations:
            assert (instance_scale(im, a, det.min_size, det.max_size) in window) == (a.class_id in bench.novel)
