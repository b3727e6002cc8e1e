import csv
import math
from collections import Counter

import pytest

from mpsr_engine.errors import FewShotError, ValidationError
from mpsr_engine.fewshot import (
    KShotConfig,
    ScaleRange,
    build_kshot_subset,
    build_limited_scale_subset,
    instance_scale,
    render_histogram_chart,
    scale_histogram,
)


def _per_class(ds):
    return Counter(a.class_id for a in ds.annotations())


def test_kshot_has_exactly_k_per_class(toy_dataset):
    for seed in range(20):
        sub = build_kshot_subset(toy_dataset, KShotConfig(k=2, seed=seed, classes=frozenset({0, 1})))
        assert _per_class(sub) == {0: 2, 1: 2}
        assert all(im.annotations for im in sub.images)


def test_kshot_is_deterministic_per_seed(toy_dataset):
    cfg = KShotConfig(k=2, seed=7, classes=frozenset({0, 1}))
    assert build_kshot_subset(toy_dataset, cfg).images == build_kshot_subset(toy_dataset, cfg).images


def test_kshot_keeps_only_selected_annotations(toy_dataset):
    sub = build_kshot_subset(toy_dataset, KShotConfig(k=1, seed=0, classes=frozenset({0})))
    assert sum(len(im.annotations) for im in sub.images) == 1
    originals = {a for a in toy_dataset.annotations()}
    assert all(a in originals for a in sub.annotations())


def test_kshot_reports_short_class(toy_dataset):
    with pytest.raises(FewShotError, match="class 1 has 3 < 4"):
        build_kshot_subset(toy_dataset, KShotConfig(k=4, seed=0, classes=frozenset({0, 1})))


def test_kshot_config_rejects_zero_k():
    with pytest.raises(ValidationError):
        KShotConfig(k=0, seed=0, classes=frozenset({0}))


def test_limited_scale_only_uses_instances_in_range(toy_dataset):
    window = ScaleRange(15, 45)
    for seed in range(10):
        sub = build_limited_scale_subset(
            toy_dataset, KShotConfig(k=1, seed=seed, classes=frozenset({0, 1})), window, shorter_side=None
        )
        assert _per_class(sub) == {0: 1, 1: 1}
        for im in sub.images:
            for a in im.annotations:
                assert instance_scale(im, a, None) in window


def test_limited_scale_respects_resize_policy(toy_dataset):
    # at shorter side 200 every object doubles: class 1 has scales 40, 80, 20
    window = ScaleRange(70, 90)
    sub = build_limited_scale_subset(
        toy_dataset, KShotConfig(k=1, seed=0, classes=frozenset({1})), window, shorter_side=200
    )
    (ann,) = list(sub.annotations())
    assert ann.box.width == 40


def test_limited_scale_confines_only_named_classes(toy_dataset):
    window = ScaleRange(35, 45)
    cfg = KShotConfig(k=1, seed=0, classes=frozenset({0, 1}))
    # no class-0 object lies in the window
    with pytest.raises(FewShotError, match="class 0"):
        build_limited_scale_subset(toy_dataset, cfg, window, shorter_side=None)

    base_scales = set()
    for seed in range(20):
        sub = build_limited_scale_subset(
            toy_dataset, KShotConfig(k=1, seed=seed, classes=frozenset({0, 1})), window,
            shorter_side=None, confined=frozenset({1}),
        )
        assert _per_class(sub) == {0: 1, 1: 1}
        for im in sub.images:
            for a in im.annotations:
                s = instance_scale(im, a, None)
                if a.class_id == 1:
                    assert s in window
                else:
                    base_scales.add(s)
    assert len(base_scales) > 1
    assert not all(s in window for s in base_scales)


def test_limited_scale_fails_when_window_is_empty(toy_dataset):
    with pytest.raises(FewShotError):
        build_limited_scale_subset(
            toy_dataset, KShotConfig(k=1, seed=0, classes=frozenset({0, 1})), ScaleRange(200, 300), shorter_side=None
        )


def test_scale_range_bounds():
    assert 10 in ScaleRange(10, 20) and 20 not in ScaleRange(10, 20)
    assert 1e9 in ScaleRange.unbounded()
    with pytest.raises(ValidationError):
        ScaleRange(20, 20)
    with pytest.raises(ValidationError):
        ScaleRange(-1, 5)


def test_scale_histogram_counts(toy_dataset, tmp_path):
    hist = scale_histogram(toy_dataset, [0, 16, 32, 64], shorter_side=None)
    # class 0 scales: 10, 20, 30, 60; class 1: 20, 40, 10
    assert hist.counts[0].tolist() == [1, 2, 1]
    assert hist.counts[1].tolist() == [1, 1, 1]
    assert hist.total() == 7 and hist.measured == 7 and hist.out_of_range == 0
    assert hist.mode_bin() == (16.0, 32.0)

    hist.to_csv(tmp_path / "scales.csv", toy_dataset.class_names)
    rows = list(csv.DictReader((tmp_path / "scales.csv").open()))
    assert len(rows) == 6
    assert rows[1] == {"class": "disk", "bin_lo": "16.0", "bin_hi": "32.0", "count": "2"}


def test_scale_histogram_out_of_range(toy_dataset):
    hist = scale_histogram(toy_dataset, [15, 35], shorter_side=None)
    assert hist.measured == 3 and hist.out_of_range == 4


def test_scale_histogram_rejects_bad_bins(toy_dataset):
    with pytest.raises(ValidationError):
        scale_histogram(toy_dataset, [32, 16])
    with pytest.raises(ValidationError):
        scale_histogram(toy_dataset, [32])


def test_histogram_chart_is_written(toy_dataset, tmp_path):
    hist = scale_histogram(toy_dataset, [0, 32, 64, math.inf], shorter_side=None)
    render_histogram_chart(hist, tmp_path / "scales.png", toy_dataset.class_names)
    assert (tmp_path / "scales.png").stat().st_size > 0
