from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from solidmark import imgdata as img
from solidmark.outpaint import predicted_key
from solidmark.errors import (
    ConfigurationError,
    DatasetLookupError,
    DimensionError,
    IntegrityError,
    KeymapAbsentError,
    ManifestParseError,
)


def test_generation_is_deterministic():
    a = img.gen_synthetic_dataset(1, 32, 2, seed=7)
    b = img.gen_synthetic_dataset(1, 32, 2, seed=7)
    assert a.ids() == b.ids()
    assert np.array_equal(a.images(), b.images())


def test_generation_cardinality_and_texture():
    ds = img.gen_synthetic_dataset(300, 32, 3, seed=0)
    assert len(set(ds.ids())) == 300
    for it in ds.items[:50]:
        assert len(np.unique(it.image)) > 1
        assert it.caption == img.CLASS_NAMES[it.label]


@pytest.mark.parametrize("kw", [dict(count=0), dict(base_size=4), dict(num_classes=0), dict(channels=2)])
def test_generation_rejects_bad_config(kw):
    args = dict(count=2, base_size=8, num_classes=2, seed=0)
    args.update(kw)
    with pytest.raises(ConfigurationError):
        img.gen_synthetic_dataset(**args)


def test_keys_deterministic_and_on_grid(small_dataset):
    km = img.assign_keys(small_dataset, 6)
    assert km.entries == small_dataset.keymap.entries
    for k in km.entries.values():
        assert 255 * k[0] == round(255 * k[0])


def test_key_mean_monte_carlo():
    vals = [img.draw_key(3, f"id{i}")[0] for i in range(10_000)]
    assert abs(np.mean(vals) - 0.5) < 0.01


def test_rgb_keys_have_three_components(small_dataset):
    km = img.assign_keys(small_dataset, 1, "rgb")
    for k in km.entries.values():
        assert len(k) == 3
    comps = np.array(list(km.entries.values()))
    assert not np.all(comps[:, 0] == comps[:, 1])


def test_assign_keys_rejects_duplicate_ids(small_dataset):
    items = small_dataset.items + [small_dataset.items[0]]
    with pytest.raises(IntegrityError):
        img.assign_keys(small_dataset.replace(items=items), 0)


def test_keymap_missing_id_is_integrity_error(small_dataset):
    with pytest.raises(IntegrityError):
        small_dataset.keymap["nope"]


def test_apply_pattern_border():
    x = np.random.default_rng(0).random((3, 32, 32))
    out = img.apply_pattern(x, 100 / 255, img.PatternSpec("border", 4))
    assert out.shape == (3, 40, 40)
    m = img.build_pattern_mask(img.PatternSpec("border", 4), (40, 40)).astype(bool)
    assert np.all(out[:, m] == 100 / 255)
    assert np.array_equal(out[:, 4:36, 4:36], x)
    assert predicted_key(out, m.astype(float)) == 100 / 255


def test_zero_key_frame_is_zero():
    out = img.apply_pattern(np.full((1, 8, 8), 0.5), 0.0, img.PatternSpec("border", 2))
    assert np.all(out[:, :2] == 0)


def test_center_pattern_preserves_dims_and_rejects_oversize():
    x = np.full((3, 32, 32), 0.25)
    out = img.apply_pattern(x, 1.0, img.PatternSpec("center", 16))
    assert out.shape == x.shape
    assert out[:, 8:24, 8:24].min() == 1.0
    with pytest.raises(DimensionError):
        img.apply_pattern(np.zeros((1, 8, 8)), 0.0, img.PatternSpec("center", 9))


def test_mask_areas():
    m = img.build_pattern_mask(img.PatternSpec("border", 4), (40, 40))
    assert m.sum() == 40 * 40 - 32 * 32 == 576
    c = img.build_pattern_mask(img.PatternSpec("center", 16), (32, 32))
    assert c.sum() == 256
    assert np.all(m * (1 - m) == 0)


def test_rgb_pattern_per_channel():
    spec = img.PatternSpec("border", 2, "rgb")
    out = img.apply_pattern(np.zeros((3, 4, 4)), (0.0, 0.5, 1.0), spec)
    m = img.build_pattern_mask(spec, out.shape[1:]).astype(bool)
    assert out[:, m].mean(axis=1).tolist() == [0.0, 0.5, 1.0]


@pytest.mark.parametrize("bad", [dict(placement="edge"), dict(thickness=0), dict(color_mode="cmyk")])
def test_pattern_spec_validation(bad):
    with pytest.raises(ConfigurationError):
        img.PatternSpec(**bad)


def test_invalid_thickness_names_field():
    with pytest.raises(ConfigurationError, match="thickness"):
        img.PatternSpec("border", -1)


@settings(max_examples=40, deadline=None)
@given(level=st.integers(0, 255), p=st.integers(1, 6), h=st.integers(2, 12), w=st.integers(2, 12),
       c=st.sampled_from([1, 3]))
def test_masked_mean_recovers_key(level, p, h, w, c):
    spec = img.PatternSpec("border", p)
    x = img.quantize(np.random.default_rng(level).random((c, h, w)))
    out = img.apply_pattern(x, level / 255, spec)
    m = img.build_pattern_mask(spec, out.shape[1:]).astype(bool)
    assert np.all(out[:, m] == level / 255)
    assert np.array_equal(img.strip_pattern(out, spec), x)


def test_duplicate_injection(small_dataset):
    a = small_dataset.ids()[0]
    dup = img.inject_duplicates(small_dataset, [a], 3)
    assert len(dup) == len(small_dataset) + 2
    group = [it for it in dup.items if (it.provenance or it.id) == a]
    assert len(group) == 3
    assert len({it.id for it in group}) == 3
    assert [dup.keymap[it.id] for it in group] != [small_dataset.keymap[a]] * 3
    # originals untouched (superset property)
    for orig, now in zip(small_dataset.items, dup.items):
        assert orig.id == now.id and np.array_equal(orig.image, now.image)
        assert dup.keymap[orig.id] == small_dataset.keymap[orig.id]


def test_shared_key_duplicates(small_dataset):
    a = small_dataset.ids()[1]
    dup = img.inject_duplicates(small_dataset, [a], 4, independent_keys=False)
    keys = {dup.keymap[i] for i in img.key_groups(dup)[a]}
    assert keys == {small_dataset.keymap[a]}


def test_duplicate_unknown_id(small_dataset):
    with pytest.raises(DatasetLookupError):
        img.inject_duplicates(small_dataset, ["missing"], 2)
    with pytest.raises(ConfigurationError):
        img.inject_duplicates(small_dataset, [small_dataset.ids()[0]], 1)


def test_query_transform_parse():
    assert img.QueryTransform.parse("crop:2") == img.QueryTransform("crop", 2)
    assert img.QueryTransform.parse("identity").is_identity
    for bad in ("crop:5", "blur:-1", "rotate:45", "zoom:1"):
        with pytest.raises(ConfigurationError):
            img.QueryTransform.parse(bad)


def test_identity_levels():
    x = np.random.default_rng(1).random((3, 16, 16))
    for t in (img.QueryTransform("crop", 0), img.QueryTransform("blur", 0)):
        assert np.array_equal(img.augment_query(x, t), x)


def test_rotate_180_involution():
    x = img.quantize(np.random.default_rng(2).random((3, 16, 16)))
    t = img.QueryTransform("rotate", 180)
    twice = img.augment_query(img.augment_query(x, t), t)
    assert np.max(np.abs(twice - x)) <= 1 / 255


def test_crop_size(monkeypatch):
    seen = {}

    def fake_resize(a, h, w):
        seen["shape"] = a.shape
        return np.zeros((a.shape[0], h, w))

    monkeypatch.setattr(img, "_resize", fake_resize)
    img.augment_query(np.zeros((3, 30, 30)), img.QueryTransform("crop", 2))
    assert seen["shape"] == (3, 18, 18)


def test_blur_kernel_side():
    assert img.gaussian_kernel1d(5).size == 5
    k = img.gaussian_kernel1d(5)
    assert np.isclose(k.sum(), 1.0) and np.allclose(k, k[::-1])


@pytest.mark.parametrize("t", ["crop:1", "blur:2", "rotate:2", "rotate:-1", "rotate:180"])
def test_augment_query_keeps_pattern(t):
    spec = img.PatternSpec("border", 3)
    x = img.apply_pattern(np.random.default_rng(3).random((3, 10, 10)), 77 / 255, spec)
    out = img.augment_query(x, img.QueryTransform.parse(t), 5, spec)
    m = img.build_pattern_mask(spec, x.shape[1:]).astype(bool)
    assert np.all(out[:, m] == 77 / 255)
    assert not np.array_equal(out, x)
    assert out.min() >= 0 and out.max() <= 1


def test_augment_query_center_keeps_pattern():
    spec = img.PatternSpec("center", 4)
    x = img.apply_pattern(np.random.default_rng(3).random((3, 12, 12)), 1.0, spec)
    out = img.augment_query(x, img.QueryTransform("blur", 1), 0, spec)
    m = img.build_pattern_mask(spec, x.shape[1:]).astype(bool)
    assert np.all(out[:, m] == 1.0)


def test_dataset_round_trip(tmp_path, small_dataset):
    dup = img.inject_duplicates(small_dataset, [small_dataset.ids()[0]], 3)
    aug = img.augment_dataset(dup, img.PatternSpec("border", 2))
    img.save_dataset(aug, tmp_path)
    back = img.load_dataset(tmp_path, require_keymap=True)
    assert back.ids() == aug.ids()
    assert np.array_equal(back.images(), aug.images())
    assert back.keymap.entries == aug.keymap.entries
    assert back.pattern == aug.pattern
    records = [json.loads(line) for line in (tmp_path / img.MANIFEST_FILE).read_text().splitlines()]
    assert sum(r["provenance"] == small_dataset.ids()[0] for r in records) == 2


def test_grayscale_round_trip(tmp_path):
    ds = img.gen_synthetic_dataset(3, 8, 2, seed=1, channels=1)
    img.save_dataset(ds, tmp_path)
    assert np.array_equal(img.load_dataset(tmp_path).images(), ds.images())


def test_missing_keymap_is_explicit(tmp_path, small_dataset):
    img.save_dataset(small_dataset, tmp_path)
    (tmp_path / img.KEYMAP_FILE).unlink()
    with pytest.raises(KeymapAbsentError, match="keymap absent"):
        img.load_dataset(tmp_path)


def test_corrupt_manifest_names_record(tmp_path, small_dataset):
    img.save_dataset(small_dataset, tmp_path)
    mf = tmp_path / img.MANIFEST_FILE
    lines = mf.read_text().splitlines()
    lines[2] = '{"id": "broken"'
    mf.write_text("\n".join(lines) + "\n")
    with pytest.raises(ManifestParseError) as info:
        img.load_dataset(tmp_path)
    assert info.value.line_no == 3
    assert "broken" in str(info.value)


def test_off_grid_key_rejected():
    with pytest.raises(IntegrityError):
        img.Keymap.from_json({"seed": 0, "keys": {"a": [0.123456]}})


def test_off_grid_image_not_stored(tmp_path):
    with pytest.raises(IntegrityError):
        img.save_image(tmp_path / "x.png", np.full((1, 4, 4), 0.1234))


def test_quantization_bound():
    assert img.key_quantization_bound() == pytest.approx(1 / 510)
    k = np.random.default_rng(0).random(10_000)
    assert np.max(np.abs(img.quantize(k) - k)) <= img.key_quantization_bound() + 1e-12
