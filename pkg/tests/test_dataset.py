import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from conftest import ALL_SEAT_LABELS, make_manifest
from illumnorm.dataset import (
    LOCATION_POLICY,
    POSE_POLICY,
    SEAT_POLICY,
    AugmentConfigError,
    AugmentSpec,
    Label,
    ManifestError,
    SamplingError,
    SceneRecord,
    TripletSampler,
    augment_pair,
    hamming,
    load_manifest,
    sample_pair,
    sample_triplet,
    write_manifest,
    write_scene,
)


def scene_with(n):
    return SceneRecord(0, Label(seats=(0, 0, 0)), [np.zeros((4, 4, 1), np.float32)] * n)


def test_pair_two_variants_uniform():
    rng = np.random.default_rng(0)
    scene = scene_with(2)
    draws = Counter((p.a, p.b) for p in (sample_pair(scene, rng) for _ in range(10_000)))
    assert set(draws) == {(0, 1), (1, 0)}
    for c in draws.values():
        assert abs(c / 10_000 - 0.5) < 0.05


def test_pair_never_equal_and_uniform_marginal():
    rng = np.random.default_rng(1)
    scene = scene_with(8)
    pairs = [sample_pair(scene, rng) for _ in range(10_000)]
    assert all(p.a != p.b for p in pairs)
    counts = np.bincount([p.a for p in pairs], minlength=8)
    assert stats.chisquare(counts).pvalue > 0.01
    ordered = Counter((p.a, p.b) for p in pairs)
    assert len(ordered) == 56
    assert stats.chisquare(list(ordered.values())).pvalue > 0.01


def test_pair_deterministic():
    scene = scene_with(5)
    r1, r2 = np.random.default_rng(42), np.random.default_rng(42)
    assert [sample_pair(scene, r1) for _ in range(100)] == [sample_pair(scene, r2) for _ in range(100)]


def test_pair_needs_two_variants():
    with pytest.raises(ValueError):
        sample_pair(scene_with(1), np.random.default_rng(0))


def test_seat_negatives_for_303_are_hamming_one():
    m = make_manifest(ALL_SEAT_LABELS, n=2, size=4)
    anchor = next(s for s in m.scenes if s.label.seats == (3, 0, 3))
    # brute-force enumeration of every label at Hamming distance 1 from (3, 0, 3)
    expected = set()
    for c in range(4):
        expected |= {(c, 0, 3), (3, c, 3), (3, 0, c)}
    expected.discard((3, 0, 3))
    rng = np.random.default_rng(0)
    # add a duplicate scene so the anchor has a positive
    m2 = make_manifest(ALL_SEAT_LABELS + [(3, 0, 3)], n=2, size=4)
    seen = set()
    for _ in range(2000):
        t = sample_triplet(m2, anchor.scene_id, SEAT_POLICY, rng)
        seen.add(m2.scene(t.negative.scene_id).label.seats)
    assert seen == expected
    assert len(expected) == 9


def test_all_empty_never_negative():
    labels = [(3, 0, 0), (3, 0, 0), (0, 0, 0), (1, 0, 0)]
    m = make_manifest(labels, n=2, size=4)
    rng = np.random.default_rng(0)
    negs = {m.scene(sample_triplet(m, 0, SEAT_POLICY, rng).negative.scene_id).label.seats for _ in range(500)}
    assert negs == {(1, 0, 0)}


def test_all_empty_only_negative_raises():
    m = make_manifest([(3, 0, 0), (3, 0, 0), (0, 0, 0)], n=2, size=4)
    with pytest.raises(SamplingError, match="negative"):
        sample_triplet(m, 0, SEAT_POLICY, np.random.default_rng(0))


def test_missing_positive_raises():
    m = make_manifest([(3, 0, 0), (1, 0, 0)], n=2, size=4)
    with pytest.raises(SamplingError, match="positive"):
        sample_triplet(m, 0, SEAT_POLICY, np.random.default_rng(0))


def test_all_empty_anchor_rejected():
    m = make_manifest([(0, 0, 0), (0, 0, 0), (1, 0, 0)], n=2, size=4)
    with pytest.raises(SamplingError):
        sample_triplet(m, 0, SEAT_POLICY, np.random.default_rng(0))


@pytest.mark.parametrize("policy", [POSE_POLICY, LOCATION_POLICY])
def test_category_policies(policy):
    labels = [Label(category=c) for c in [0, 0, 0, 1, 1, 2, 2, 2]]
    m = make_manifest(labels, n=3, size=4)
    rng = np.random.default_rng(3)
    for _ in range(500):
        k = int(rng.integers(len(m)))
        t = sample_triplet(m, k, policy, rng)
        a = m.scene(t.anchor.scene_id).label
        assert m.scene(t.positive.scene_id).label.category == a.category
        assert m.scene(t.negative.scene_id).label.category != a.category
        assert t.positive.scene_id != k and t.negative.scene_id != k


def test_seat_triplet_invariants_over_many_draws():
    rng = np.random.default_rng(5)
    labels = [ALL_SEAT_LABELS[i] for i in rng.integers(0, 64, 300)] + ALL_SEAT_LABELS * 2
    m = make_manifest(labels, n=3, size=4)
    sampler = TripletSampler(m, SEAT_POLICY)
    anchors = sampler.anchors
    for _ in range(1000):
        k = anchors[int(rng.integers(len(anchors)))]
        t = sampler.sample(k, rng)
        a = m.scene(t.anchor.scene_id).label
        p = m.scene(t.positive.scene_id).label
        n = m.scene(t.negative.scene_id).label
        assert p == a and t.positive.scene_id != t.anchor.scene_id
        assert hamming(a, n) == 1
        assert not n.is_all_empty
        for member in t.members:
            assert member.a != member.b


def test_triplet_members_draw_independent_pairs():
    m = make_manifest([(1, 1, 1)] * 3 + [(1, 1, 2)] * 3, n=6, size=4)
    rng = np.random.default_rng(0)
    pairs = [sample_triplet(m, 0, SEAT_POLICY, rng) for _ in range(300)]
    # with shared draws these would always coincide
    assert any(t.anchor.a != t.positive.a for t in pairs)
    assert any(t.anchor.b != t.negative.b for t in pairs)


def test_cached_sampler_matches_uncached():
    m = make_manifest(ALL_SEAT_LABELS * 2, n=3, size=4)
    sampler = TripletSampler(m, SEAT_POLICY)
    r1, r2 = np.random.default_rng(9), np.random.default_rng(9)
    for k in sampler.anchors[:30]:
        assert sampler.sample(k, r1) == sample_triplet(m, k, SEAT_POLICY, r2)


# -- manifest I/O -----------------------------------------------------------


def test_manifest_round_trip(tmp_path, small_train):
    write_manifest(small_train, tmp_path)
    loaded = load_manifest(tmp_path, "train")
    assert [s.scene_id for s in loaded.scenes] == [s.scene_id for s in small_train.scenes]
    assert [s.label for s in loaded.scenes] == [s.label for s in small_train.scenes]
    for a, b in zip(loaded.scenes, small_train.scenes):
        np.testing.assert_allclose(a.images(), b.images(), atol=0.5 / 255 + 1e-7)
    write_manifest(loaded, tmp_path / "again")
    again = load_manifest(tmp_path / "again", "train")
    for a, b in zip(loaded.scenes, again.scenes):
        np.testing.assert_array_equal(a.images(), b.images())
        assert a.label == b.label
    assert loaded.seat_count == again.seat_count == 3


def test_load_rejects_single_variant(tmp_path):
    write_scene(tmp_path / "train", 0, Label(seats=(1, 2, 3)), [np.zeros((8, 8, 1))] * 2)
    write_scene(tmp_path / "train", 1, Label(seats=(1, 2, 3)), [np.zeros((8, 8, 1))])
    with pytest.raises(ManifestError, match="scene 1"):
        load_manifest(tmp_path, "train")


def test_load_rejects_missing_label(tmp_path):
    write_scene(tmp_path / "train", 4, Label(seats=(1, 2, 3)), [np.zeros((8, 8, 1))] * 2)
    (tmp_path / "train" / "scene_4" / "label.json").unlink()
    with pytest.raises(ManifestError, match="scene 4"):
        load_manifest(tmp_path, "train")


def test_load_rejects_unreadable_image(tmp_path):
    write_scene(tmp_path / "train", 2, Label(seats=(1, 2, 3)), [np.zeros((8, 8, 1))] * 2)
    (tmp_path / "train" / "scene_2" / "variant_1.png").write_bytes(b"not a png")
    with pytest.raises(ManifestError, match="scene 2"):
        load_manifest(tmp_path, "train")


def test_category_labels_round_trip(tmp_path):
    write_scene(tmp_path / "train", 0, Label(category=5), [np.zeros((8, 8, 1))] * 2)
    data = json.loads((tmp_path / "train" / "scene_0" / "label.json").read_text())
    assert data == {"category": 5}
    assert load_manifest(tmp_path, "train").scenes[0].label == Label(category=5)


def test_iteration_order_is_numeric(tmp_path):
    for k in (10, 2, 1):
        write_scene(tmp_path / "train", k, Label(seats=(0, 0, 1)), [np.zeros((8, 8, 1))] * 2)
    assert [s.scene_id for s in load_manifest(tmp_path, "train").scenes] == [1, 2, 10]


@given(st.lists(st.integers(0, 3), min_size=3, max_size=3))
def test_label_key_round_trip(seats):
    lb = Label(seats=tuple(seats))
    assert Label.from_key(lb.key) == lb
    assert Label.from_json(lb.to_json()) == lb


# -- augmentation ------------------------------------------------------------


def test_augment_identity():
    x = np.random.default_rng(0).random((8, 8, 1)).astype(np.float32)
    a, b = augment_pair(x, AugmentSpec(), "both", np.random.default_rng(0))
    np.testing.assert_array_equal(a, x)
    np.testing.assert_array_equal(b, x)


def test_reverse_denoise_keeps_clean_input():
    x = np.random.default_rng(0).random((8, 8, 1)).astype(np.float32)
    spec = AugmentSpec((("gain", (0.5, 0.9)),))
    clean, noisy = augment_pair(x, spec, "reverse_denoise", np.random.default_rng(1))
    assert np.array_equal(clean, x)
    assert not np.array_equal(noisy, x)


def test_augment_both_independent_and_deterministic():
    x = np.random.default_rng(0).random((8, 8, 1)).astype(np.float32)
    spec = AugmentSpec.from_dict({"gain": (0.5, 1.5), "bias": (-0.1, 0.1), "gradient": (0, 0.3), "noise": (0, 0.05)})
    a1, b1 = augment_pair(x, spec, "both", np.random.default_rng(7))
    a2, b2 = augment_pair(x, spec, "both", np.random.default_rng(7))
    np.testing.assert_array_equal(a1, a2)
    np.testing.assert_array_equal(b1, b2)
    assert not np.array_equal(a1, b1)
    assert a1.min() >= 0 and a1.max() <= 1


@pytest.mark.parametrize("op", ["flip", "rotate", "crop", "translate"])
def test_geometric_augment_rejected(op):
    with pytest.raises(AugmentConfigError):
        AugmentSpec(((op, (0, 1)),))


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**31))
def test_pair_property(n, seed):
    rng = np.random.default_rng(seed)
    for _ in range(50):
        p = sample_pair(scene_with(n), rng)
        assert p.a != p.b and 0 <= p.a < n and 0 <= p.b < n
