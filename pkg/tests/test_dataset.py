"""Manifest loading, split rules, and augmentation determinism."""
from __future__ import annotations

import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roadcoder.codebook import parse_codebook
from roadcoder.dataset import (
    DatasetSplit,
    NoiseKind,
    NoiseParams,
    SegmentRecord,
    SplitFractions,
    augment_image,
    augmented_image_id,
    load_dataset,
    read_split,
    source_image_id,
    split_dataset,
    write_split,
)
from roadcoder.errors import (
    DanglingReference,
    EmptyDataset,
    GroundTruthCodeUnknown,
    ManifestParseError,
    UnsupportedPixelFormat,
)


def _codebook(attrs: dict[str, int]):
    doc = {
        "version": "t",
        "attribute_count": len(attrs),
        "attributes": [
            {
                "id": attr_id,
                "display_name": attr_id,
                "description": "x",
                "group": "Mid-block",
                "classes": [
                    {
                        "code": str(i + 1),
                        "label": f"c{i + 1}",
                        "description": "x",
                        "risk_rank": i,
                    }
                    for i in range(n_classes)
                ],
            }
            for attr_id, n_classes in attrs.items()
        ],
    }
    return parse_codebook(doc, source="mem")


def _write_png(path, width=4, height=3):
    from PIL import Image

    path.parent.mkdir(parents=True, exist_ok=True)
    Image.new("RGB", (width, height), (90, 90, 90)).save(path)


def _manifest_text(rows, gt_cols=("gt_alpha",)):
    header = "image_id,segment_id,order_in_segment,relative_path,latitude,longitude,captured_at"
    if gt_cols:
        header += "," + ",".join(gt_cols)
    return header + "\n" + "\n".join(rows) + "\n"


@pytest.fixture
def two_attr_codebook():
    return _codebook({"alpha": 3, "beta": 2})


def test_load_dataset_happy_path(tmp_path, two_attr_codebook):
    root = tmp_path / "imgs"
    _write_png(root / "a.png")
    _write_png(root / "b.png")
    manifest = tmp_path / "manifest.csv"
    manifest.write_text(
        _manifest_text(
            [
                "i1,s1,1,a.png,14.02,100.52,2023-05-01T10:00:00Z,1",
                "i2,s1,2,b.png,14.03,100.53,,1",
            ],
            gt_cols=("gt_alpha",),
        )
    )
    images, segments = load_dataset(manifest, root, two_attr_codebook)
    assert [i.image_id for i in images] == ["i1", "i2"]
    assert images[0].width == 4 and images[0].height == 3
    assert images[0].captured_at is not None and images[0].captured_at.tzinfo is not None
    assert images[1].captured_at is None
    assert len(segments) == 1
    seg = segments[0]
    assert seg.image_ids == ("i1", "i2")
    assert seg.ground_truth == {"alpha": "1"}


def test_conflicting_ground_truth_rejected(tmp_path, two_attr_codebook):
    root = tmp_path / "imgs"
    _write_png(root / "a.png")
    _write_png(root / "b.png")
    manifest = tmp_path / "manifest.csv"
    manifest.write_text(
        _manifest_text(
            [
                "i1,s1,1,a.png,14.0,100.0,,1",
                "i2,s1,2,b.png,14.0,100.0,,2",
            ]
        )
    )
    with pytest.raises(ManifestParseError, match="conflicting"):
        load_dataset(manifest, root, two_attr_codebook)


def test_segment_ground_truth_consistent(tmp_path, two_attr_codebook):
    root = tmp_path / "imgs"
    _write_png(root / "a.png")
    _write_png(root / "b.png")
    manifest = tmp_path / "manifest.csv"
    manifest.write_text(
        _manifest_text(
            [
                "i1,s1,1,a.png,14.0,100.0,,2",
                "i2,s1,2,b.png,14.0,100.0,,2",
            ]
        )
    )
    _, segments = load_dataset(manifest, root, two_attr_codebook)
    assert segments[0].ground_truth == {"alpha": "2"}


def test_multi_code_cell_takes_first(tmp_path, two_attr_codebook):
    root = tmp_path / "imgs"
    _write_png(root / "a.png")
    manifest = tmp_path / "manifest.csv"
    manifest.write_text(_manifest_text(["i1,s1,1,a.png,14.0,100.0,,3;1"]))
    _, segments = load_dataset(manifest, root, two_attr_codebook)
    assert segments[0].ground_truth == {"alpha": "3"}


def test_multi_code_cell_validates_every_token(tmp_path, two_attr_codebook):
    root = tmp_path / "imgs"
    _write_png(root / "a.png")
    manifest = tmp_path / "manifest.csv"
    manifest.write_text(_manifest_text(["i1,s1,1,a.png,14.0,100.0,,1;9"]))
    with pytest.raises(GroundTruthCodeUnknown, match="'9'"):
        load_dataset(manifest, root, two_attr_codebook)


def test_unknown_ground_truth_code_names_row(tmp_path, two_attr_codebook):
    root = tmp_path / "imgs"
    _write_png(root / "a.png")
    _write_png(root / "b.png")
    manifest = tmp_path / "manifest.csv"
    manifest.write_text(
        _manifest_text(
            [
                "i1,s1,1,a.png,14.0,100.0,,1",
                "i2,s2,1,b.png,14.0,100.0,,7",
            ]
        )
    )
    with pytest.raises(GroundTruthCodeUnknown, match="row 3"):
        load_dataset(manifest, root, two_attr_codebook)


def test_missing_image_file_is_dangling(tmp_path, two_attr_codebook):
    manifest = tmp_path / "manifest.csv"
    manifest.write_text(_manifest_text(["i1,s1,1,gone.png,14.0,100.0,,1"]))
    with pytest.raises(DanglingReference, match="gone.png"):
        load_dataset(manifest, tmp_path, two_attr_codebook)
    images, _ = load_dataset(
        manifest, tmp_path, two_attr_codebook, allow_missing_images=True
    )
    assert images[0].width == 0 and images[0].height == 0


def test_empty_manifest_yields_empty_lists(tmp_path, two_attr_codebook):
    manifest = tmp_path / "manifest.csv"
    manifest.write_text(_manifest_text([])[:-1])
    images, segments = load_dataset(manifest, tmp_path, two_attr_codebook)
    assert images == [] and segments == []


@pytest.mark.parametrize(
    "row,message",
    [
        ("i1,s1,0,a.png,14.0,100.0,,1", "order_in_segment"),
        ("i1,s1,5,a.png,14.0,100.0,,1", "order_in_segment"),
        ("i1,s1,x,a.png,14.0,100.0,,1", "order_in_segment"),
        ("i1,s1,1,a.png,95.0,100.0,,1", "latitude"),
        ("i1,s1,1,a.png,14.0,190.0,,1", "longitude"),
        ("i1,s1,1,a.png,14.0,100.0,yesterday,1", "captured_at"),
    ],
)
def test_malformed_rows_rejected(tmp_path, two_attr_codebook, row, message):
    root = tmp_path / "imgs"
    _write_png(root / "a.png")
    manifest = tmp_path / "manifest.csv"
    manifest.write_text(_manifest_text([row]))
    with pytest.raises(ManifestParseError, match=message):
        load_dataset(manifest, root, two_attr_codebook)


def test_duplicate_image_id_rejected(tmp_path, two_attr_codebook):
    root = tmp_path / "imgs"
    _write_png(root / "a.png")
    manifest = tmp_path / "manifest.csv"
    manifest.write_text(
        _manifest_text(
            ["i1,s1,1,a.png,14.0,100.0,,1", "i1,s2,1,a.png,14.0,100.0,,1"]
        )
    )
    with pytest.raises(ManifestParseError, match="duplicate image_id"):
        load_dataset(manifest, root, two_attr_codebook)


def test_duplicate_segment_slot_rejected(tmp_path, two_attr_codebook):
    root = tmp_path / "imgs"
    _write_png(root / "a.png")
    manifest = tmp_path / "manifest.csv"
    manifest.write_text(
        _manifest_text(
            ["i1,s1,2,a.png,14.0,100.0,,1", "i2,s1,2,a.png,14.0,100.0,,1"]
        )
    )
    with pytest.raises(ManifestParseError, match="position 2"):
        load_dataset(manifest, root, two_attr_codebook)


def test_unknown_column_rejected(tmp_path, two_attr_codebook):
    manifest = tmp_path / "manifest.csv"
    manifest.write_text(
        _manifest_text(["i1,s1,1,a.png,14.0,100.0,,1"], gt_cols=("gt_alpha", "mood"))
    )
    with pytest.raises(ManifestParseError, match="mood"):
        load_dataset(manifest, tmp_path, two_attr_codebook)


def test_gt_column_for_unknown_attribute_rejected(tmp_path, two_attr_codebook):
    manifest = tmp_path / "manifest.csv"
    manifest.write_text(
        _manifest_text(["i1,s1,1,a.png,14.0,100.0,,1,1"], gt_cols=("gt_alpha", "gt_zeta"))
    )
    with pytest.raises(ManifestParseError, match="zeta"):
        load_dataset(manifest, tmp_path, two_attr_codebook)


def test_segments_csv_extras(tmp_path, two_attr_codebook):
    root = tmp_path / "imgs"
    _write_png(root / "a.png")
    manifest = tmp_path / "manifest.csv"
    manifest.write_text(_manifest_text(["i1,s1,1,a.png,14.0,100.0,,1"]))
    (tmp_path / "segments.csv").write_text(
        "segment_id,aadt,operating_speed\ns1,12000,80\n"
    )
    _, segments = load_dataset(manifest, root, two_attr_codebook)
    assert segments[0].aadt == 12000.0
    assert segments[0].operating_speed == 80.0


def test_segments_csv_dangling_segment(tmp_path, two_attr_codebook):
    root = tmp_path / "imgs"
    _write_png(root / "a.png")
    manifest = tmp_path / "manifest.csv"
    manifest.write_text(_manifest_text(["i1,s1,1,a.png,14.0,100.0,,1"]))
    (tmp_path / "segments.csv").write_text(
        "segment_id,aadt,operating_speed\ns9,100,50\n"
    )
    with pytest.raises(DanglingReference, match="s9"):
        load_dataset(manifest, root, two_attr_codebook)


# ── split rules, hand-enumerated 20-image fixture ──
#
# alpha (3 classes): 1 ×13, 2 ×3, 3 ×4   → rule 4 sends classes 2 and 3 unseen
# beta  (2 classes): 1 ×17, 2 ×3         → rule 3 marks (beta, 2); members unseen
# delta (2 classes): 2 ×5, 1 ×15         → rule 2 marks (delta, 2)
# gamma (1 observed class everywhere)    → rule 1 excludes the attribute


def _rule_fixture():
    segments = []
    for i in range(1, 21):
        image_id = f"img{i:02d}"
        alpha = "1" if i <= 13 else ("2" if i <= 16 else "3")
        beta = "2" if i >= 18 else "1"
        delta = "2" if i <= 5 else "1"
        segments.append(
            SegmentRecord(
                segment_id=f"s{i:02d}",
                image_ids=(image_id,),
                ground_truth={"alpha": alpha, "beta": beta, "delta": delta, "gamma": "1"},
            )
        )
    codebook = _codebook({"alpha": 3, "beta": 2, "delta": 2, "gamma": 2})
    return segments, codebook


def test_rule_one_excludes_single_class_attribute():
    segments, codebook = _rule_fixture()
    split = split_dataset(segments, codebook, seed=1)
    assert "gamma" in split.excluded_attributes
    assert split.excluded == frozenset()


def test_rule_four_routes_rare_classes_unseen():
    segments, codebook = _rule_fixture()
    split = split_dataset(segments, codebook, seed=1)
    assert split.unseen == frozenset(f"img{i:02d}" for i in range(14, 21))
    cited = {img for img, note in split.provenance_log if note.startswith("rule 4")}
    assert cited == split.unseen


def test_rules_two_and_three_mark_cells():
    segments, codebook = _rule_fixture()
    split = split_dataset(segments, codebook, seed=1)
    assert split.augmented_cells == (("beta", "2"), ("delta", "2"))


def test_unseen_takes_precedence_over_augmentation():
    segments, codebook = _rule_fixture()
    split = split_dataset(segments, codebook, seed=1)
    # All three (beta, 2) members are unseen via alpha, so no copies of them.
    sources = {source_image_id(a)[0] for a in split.train_augmented}
    assert sources.isdisjoint(split.unseen)
    assert all(src in split.train_original for src in sources)


def test_augmented_copies_cover_marked_train_members():
    segments, codebook = _rule_fixture()
    split = split_dataset(segments, codebook, seed=1)
    marked_members = {f"img{i:02d}" for i in range(1, 6)}
    expected = {
        augmented_image_id(img, kind)
        for img in marked_members & split.train_original
        for kind in NoiseKind
    }
    assert split.train_augmented == frozenset(expected)


def test_split_counts_follow_fractions():
    segments, codebook = _rule_fixture()
    split = split_dataset(segments, codebook, seed=1)
    assert len(split.train_original) == 8
    assert len(split.validation) == 2
    assert len(split.test) == 3
    assert len(split.unseen) == 7


def test_split_sets_partition_inputs():
    segments, codebook = _rule_fixture()
    split = split_dataset(segments, codebook, seed=5)
    buckets = [
        split.train_original,
        split.validation,
        split.test,
        split.unseen,
        split.excluded,
    ]
    union: set[str] = set()
    for bucket in buckets:
        assert union.isdisjoint(bucket)
        union |= bucket
    assert union == {f"img{i:02d}" for i in range(1, 21)}


def test_split_is_pure_function_of_inputs():
    segments, codebook = _rule_fixture()
    first = split_dataset(segments, codebook, seed=11)
    second = split_dataset(segments, codebook, seed=11)
    assert first == second


def test_images_without_ground_truth_are_excluded():
    segments, codebook = _rule_fixture()
    segments = segments + [
        SegmentRecord(segment_id="s99", image_ids=("img99",), ground_truth={})
    ]
    split = split_dataset(segments, codebook, seed=1)
    assert split.excluded == frozenset({"img99"})
    assert ("img99", "excluded: segment carries no ground truth") in split.provenance_log


def test_empty_dataset_raises():
    _, codebook = _rule_fixture()
    with pytest.raises(EmptyDataset):
        split_dataset([], codebook, seed=0)


def test_split_round_trip(tmp_path):
    segments, codebook = _rule_fixture()
    split = split_dataset(segments, codebook, seed=3)
    path = tmp_path / "split.json"
    write_split(split, path)
    assert read_split(path) == split


def test_augmented_id_round_trip():
    for kind in NoiseKind:
        aug = augmented_image_id("img07", kind)
        assert source_image_id(aug) == ("img07", kind)
    with pytest.raises(ValueError):
        source_image_id("img07")


@st.composite
def _random_segments(draw):
    n = draw(st.integers(min_value=1, max_value=25))
    segments = []
    for i in range(n):
        gt = {}
        if draw(st.booleans()):
            gt["alpha"] = draw(st.sampled_from(["1", "2", "3"]))
        if draw(st.booleans()):
            gt["beta"] = draw(st.sampled_from(["1", "2"]))
        segments.append(
            SegmentRecord(segment_id=f"s{i}", image_ids=(f"i{i}",), ground_truth=gt)
        )
    return segments


@settings(max_examples=40, deadline=None)
@given(segments=_random_segments(), seed=st.integers(min_value=0, max_value=99))
def test_split_invariants_hold_for_random_datasets(segments, seed):
    codebook = _codebook({"alpha": 3, "beta": 2})
    split = split_dataset(segments, codebook, seed=seed)
    buckets = [
        split.train_original,
        split.validation,
        split.test,
        split.unseen,
        split.excluded,
    ]
    union: set[str] = set()
    for bucket in buckets:
        assert union.isdisjoint(bucket)
        union |= bucket
    assert union == {s.image_ids[0] for s in segments}
    assert split == split_dataset(segments, codebook, seed=seed)
    for augmented in split.train_augmented:
        assert source_image_id(augmented)[0] in split.train_original


# ── augmentation ──


def test_augment_preserves_shape_and_dtype():
    rng = np.random.default_rng(0)
    for shape in [(8, 8), (5, 7, 3), (4, 4, 1), (6, 3, 4)]:
        image = rng.integers(0, 256, size=shape, dtype=np.uint8)
        for kind in NoiseKind:
            out = augment_image(image, kind, seed=9)
            assert out.shape == image.shape
            assert out.dtype == np.uint8


def test_augment_deterministic_under_seed():
    image = np.arange(64, dtype=np.uint8).reshape(8, 8)
    for kind in NoiseKind:
        a = augment_image(image, kind, seed=123)
        b = augment_image(image, kind, seed=123)
        assert np.array_equal(a, b)


def test_gaussian_golden_checksum():
    image = np.arange(64, dtype=np.uint8).reshape(8, 8)
    out = augment_image(image, NoiseKind.Gaussian, seed=42)
    digest = hashlib.sha256(out.tobytes()).hexdigest()
    assert digest.startswith("13a462637da518a6")


def test_quantisation_constant_image_snaps_to_nearest_level():
    image = np.full((6, 6, 3), 100, dtype=np.uint8)
    out = augment_image(image, NoiseKind.Quantisation, seed=7)
    # 16 levels step 17; 100 / 17 rounds to level 6 → 102.
    assert np.unique(out).tolist() == [102]


def test_quantisation_ignores_seed():
    image = np.arange(64, dtype=np.uint8).reshape(8, 8)
    a = augment_image(image, NoiseKind.Quantisation, seed=1)
    b = augment_image(image, NoiseKind.Quantisation, seed=2)
    assert np.array_equal(a, b)


def test_salt_pepper_flips_whole_pixels():
    image = np.full((32, 32, 3), 128, dtype=np.uint8)
    out = augment_image(image, NoiseKind.SaltPepper, seed=5, params=NoiseParams(salt_pepper_amount=0.3))
    changed = np.any(out != 128, axis=2)
    assert changed.any()
    # A flipped pixel goes fully white or fully black across channels.
    flipped_values = out[changed]
    assert set(np.unique(flipped_values)).issubset({0, 255})


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(min_value=0, max_value=10_000),
    kind=st.sampled_from(list(NoiseKind)),
    height=st.integers(min_value=1, max_value=12),
    width=st.integers(min_value=1, max_value=12),
)
def test_augment_shape_preservation_property(seed, kind, height, width):
    image = np.random.default_rng(seed).integers(0, 256, size=(height, width, 3), dtype=np.uint8)
    out = augment_image(image, kind, seed=seed)
    assert out.shape == image.shape and out.dtype == np.uint8


@pytest.mark.parametrize(
    "bad",
    [
        np.zeros((4, 4), dtype=np.float32),
        np.zeros((0, 4), dtype=np.uint8),
        np.zeros((4,), dtype=np.uint8),
        np.zeros((4, 4, 2), dtype=np.uint8),
        "not an array",
    ],
)
def test_augment_rejects_bad_pixels(bad):
    with pytest.raises(UnsupportedPixelFormat):
        augment_image(bad, NoiseKind.Gaussian, seed=0)
