import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ark import data as D
from ark.errors import ConfigurationError, DataError, LeakError, SchemaError
from ark.losses import LossKind


def test_taskspec_schema_rules():
    assert D.TaskSpec(0, "m", "multiclass", ("a", "b")).loss_kind is LossKind.CE_MULTICLASS
    assert D.TaskSpec(0, "b", "binary", ("a",)).loss_kind is LossKind.BCE_MULTILABEL
    with pytest.raises(SchemaError):
        D.TaskSpec(0, "b", "binary", ("a", "b"))
    with pytest.raises(SchemaError):
        D.TaskSpec(0, "m", "multiclass", ("a",))
    with pytest.raises(SchemaError):
        D.TaskSpec(0, "x", "ordinal", ("a",))
    with pytest.raises(SchemaError):
        D.TaskSpec(0, "x", "multilabel", ("a", "a"))
    with pytest.raises(SchemaError):
        D.TaskSpec(0, "x", "multiclass", ("a", "b"), loss_kind="bce_multilabel")


def test_taskspec_json_round_trip_and_strictness():
    t = D.TaskSpec(3, "n", "multilabel", ("a", "b"))
    assert D.TaskSpec.from_json(t.to_json()) == t
    with pytest.raises(SchemaError):
        D.TaskSpec.from_json({**t.to_json(), "extra": 1})


def test_suite_is_deterministic_and_labels_match_render(tiny_suite):
    again = D.generate_synthetic_suite(
        n_tasks=3, sizes=120, image_size=16, seed=3, label_modes=["multilabel", "multiclass", "binary"], distractors=0,
        split_fractions={"pretrain": 0.5, "train": 0.25, "val": 0.05, "test": 0.2},
    )
    for m, n in zip(tiny_suite, again):
        assert m.task == n.task
        for a, b in zip(m.records, n.records):
            assert a.id == b.id and a.split == b.split and a.subgroup == b.subgroup
            np.testing.assert_array_equal(a.image, b.image)
            assert a.labels == D.labels_from_render(m.task, a.render)


def test_suite_vocab_overlap():
    suite = D.generate_synthetic_suite(2, 20, 16, vocab_overlap=0.5, n_classes=4, label_modes=["multilabel"] * 2)
    shared = set(suite[0].task.class_names) & set(suite[1].task.class_names)
    assert len(shared) == 2
    disjoint = D.generate_synthetic_suite(2, 20, 16, vocab_overlap=0.0, n_classes=4, label_modes=["multilabel"] * 2)
    assert not set(disjoint[0].task.class_names) & set(disjoint[1].task.class_names)


def test_suite_argument_errors():
    with pytest.raises(ConfigurationError):
        D.generate_synthetic_suite(0)
    with pytest.raises(ConfigurationError):
        D.generate_synthetic_suite(1, 10, subgroup_skew=1.5)
    with pytest.raises(ConfigurationError):
        D.generate_synthetic_suite(2, [10])
    with pytest.raises(ConfigurationError):
        D.generate_synthetic_suite(1, 10, split_fractions={"pretrain": 0.5, "test": 0.2})


def test_zero_skew_gives_identically_styled_subgroups():
    suite = D.generate_synthetic_suite(1, 200, 16, subgroup_skew=0.0, seed=5, label_modes=["multilabel"], distractors=0)
    a = [r.image.mean() for r in suite[0].records if r.subgroup == "A"]
    b = [r.image.mean() for r in suite[0].records if r.subgroup == "B"]
    assert abs(np.mean(a) - np.mean(b)) < 0.01


def test_skew_draws_border_bands_only_in_subgroup_a():
    suite = D.generate_synthetic_suite(1, 200, 16, subgroup_skew=0.8, seed=5, label_modes=["multilabel"], distractors=0)
    m = suite[0]
    top = lambda r: r.image[0, :2, 4:12].mean()  # noqa: E731
    first_pos_a = [top(r) for r in m.records if r.subgroup == "A" and r.labels[0] == 1]
    first_pos_b = [top(r) for r in m.records if r.subgroup == "B" and r.labels[0] == 1]
    assert np.mean(first_pos_a) > 0.6 > np.mean(first_pos_b)


def test_prevalence_is_equal_across_subgroups():
    suite = D.generate_synthetic_suite(1, 3000, 16, subgroup_skew=0.8, seed=2, label_modes=["multilabel"], distractors=0)
    recs = suite[0].records
    for g in ("A", "B"):
        L = np.array([r.labels for r in recs if r.subgroup == g])
        np.testing.assert_allclose(L.mean(0), 0.3, atol=0.05)


def test_manifest_round_trip_inline_and_pgm(tiny_suite, tmp_path):
    m = tiny_suite[1]
    D.save_manifest(m, tmp_path / "inline.jsonl")
    D.save_manifest(m, tmp_path / "files.jsonl", image_dir=tmp_path / "img")
    for name in ("inline.jsonl", "files.jsonl"):
        back = D.load_manifest(tmp_path / name)
        assert back.task == m.task
        for a, b in zip(m.records, back.records):
            assert (a.id, a.labels, a.split, a.subgroup) == (b.id, b.labels, b.split, b.subgroup)
            np.testing.assert_array_equal(a.image, b.image)


def _write_lines(path, header, records):
    path.write_text("\n".join(json.dumps(x) for x in [header] + records) + "\n", encoding="utf-8")


def _grid():
    return D._encode_grid(np.zeros((1, 4, 4)))


@pytest.mark.parametrize(
    "record",
    [
        {"id": "x", "labels": {"a": 1, "zz": 0}, "split": "train"},
        {"id": "x", "labels": {"a": 2}, "split": "train"},
        {"id": "x", "labels": {"a": 1}, "split": "holdout"},
        {"id": "x", "labels": {"a": 1}, "split": "train", "color": "red"},
        {"id": "x", "labels": {"a": 1}},
        {"id": "x", "labels": [1, 0], "split": "train"},
    ],
)
def test_manifest_schema_violations(tmp_path, record):
    header = D.TaskSpec(0, "t", "multilabel", ("a", "b")).to_json()
    record = dict(record)
    record.setdefault("grid", _grid())
    _write_lines(tmp_path / "m.jsonl", header, [record])
    with pytest.raises(SchemaError):
        D.load_manifest(tmp_path / "m.jsonl")


def test_manifest_multiclass_needs_one_positive(tmp_path):
    header = D.TaskSpec(0, "t", "multiclass", ("a", "b")).to_json()
    _write_lines(tmp_path / "m.jsonl", header, [{"id": "x", "labels": {"a": 1, "b": 1}, "split": "train", "grid": _grid()}])
    with pytest.raises(SchemaError):
        D.load_manifest(tmp_path / "m.jsonl")


def test_manifest_leak_is_rejected_with_ids(tmp_path):
    header = D.TaskSpec(0, "t", "binary", ("a",)).to_json()
    recs = [
        {"id": "dup", "labels": {"a": 1}, "split": "pretrain", "grid": _grid()},
        {"id": "dup", "labels": {"a": 1}, "split": "test", "grid": _grid()},
    ]
    _write_lines(tmp_path / "m.jsonl", header, recs)
    with pytest.raises(LeakError) as info:
        D.load_manifest(tmp_path / "m.jsonl")
    assert "dup" in str(info.value)


def test_suite_leak_check_spans_tasks(tiny_suite):
    a = D.DatasetManifest(tiny_suite[0].task, [D.SampleRecord("s", np.zeros((1, 4, 4)), [1, 0, 0, 0], "pretrain")])
    b = D.DatasetManifest(tiny_suite[2].task, [D.SampleRecord("s", np.zeros((1, 4, 4)), [1], "val")])
    with pytest.raises(LeakError):
        D.check_suite_leaks([a, b])


def test_pgm_round_trip(tmp_path, rng):
    img = np.round(rng.uniform(size=(1, 5, 7)) * 255) / 255
    D.write_pgm(tmp_path / "x.pgm", img)
    np.testing.assert_array_equal(D.read_pgm(tmp_path / "x.pgm"), img)


def test_augmentation_is_seeded_and_bounded(rng):
    cfg = D.AugmentationConfig.for_image_size(16)
    assert cfg.crop_pad == 1
    imgs = rng.uniform(size=(3, 1, 16, 16))
    a1, a2 = D.augment_pair(imgs, [0, 1, 2], cfg, 7, 1, 0)
    b1, b2 = D.augment_pair(imgs, [0, 1, 2], cfg, 7, 1, 0)
    np.testing.assert_array_equal(a1, b1)
    np.testing.assert_array_equal(a2, b2)
    c1, _ = D.augment_pair(imgs, [0, 1, 2], cfg, 7, 2, 0)
    assert not np.array_equal(a1, c1)
    assert a2.min() >= 0 and a2.max() <= 1


def test_identity_augmentation():
    cfg = D.AugmentationConfig(0, 0.0, (0, 0), (1, 1), (1, 1))
    x = np.linspace(0, 1, 16).reshape(1, 4, 4)
    x1, x2 = D.augment_pair(x[None], [0], cfg, 0, 0, 0)
    np.testing.assert_allclose(x1[0], x)
    np.testing.assert_allclose(x2[0], x)


def test_rotation_by_90_degrees_matches_rot90():
    x = np.arange(25.0).reshape(1, 5, 5)
    np.testing.assert_array_equal(D.rotate_nearest(x, 90.0)[0], np.rot90(x[0], 1))


def test_augmentation_config_validation():
    with pytest.raises(ConfigurationError):
        D.AugmentationConfig(gamma_range=(0.0, 1.0))
    with pytest.raises(ConfigurationError):
        D.AugmentationConfig(contrast_range=(1.2, 0.8))


def test_batch_iterator_covers_split_once(tiny_suite):
    m = tiny_suite[0]
    ids = [i for b in D.batch_iterator(m, "pretrain", 7, seed=1, epoch=2) for i in b.ids]
    assert sorted(ids) == sorted(r.id for r in m.split("pretrain"))
    again = [i for b in D.batch_iterator(m, "pretrain", 7, seed=1, epoch=2) for i in b.ids]
    assert ids == again
    with pytest.raises(DataError):
        next(D.batch_iterator(D.DatasetManifest(m.task, m.split("test")), "pretrain", 4, 0))


def test_interleave_equal_segments(tiny_suite):
    batches = list(D.interleave_equal(tiny_suite, 6, seed=0))
    largest = max(len(m.split("pretrain")) for m in tiny_suite)
    assert sum(len(b[0]) for b in batches) == largest
    for segs in batches:
        assert len({len(s) for s in segs}) == 1
    with pytest.raises(ConfigurationError):
        next(D.interleave_equal(tiny_suite, 4, seed=0))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_placed_primitives_do_not_overlap(k, seed):
    rng = np.random.default_rng(seed)
    prims = D._place_all(list(D.CONCEPTS[:k]), 32, rng)
    for i in range(len(prims)):
        for j in range(i + 1, len(prims)):
            _, xi, yi, ri, _ = prims[i]
            _, xj, yj, rj, _ = prims[j]
            assert np.hypot(xi - xj, yi - yj) >= ri + rj - 1e-9
