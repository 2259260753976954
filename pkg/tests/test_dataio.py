"""Serialization formats (golden-byte fixtures), manifest validation,
and the synthetic dataset generator."""

import json
import os

import numpy as np
import pytest

from stan.dataio import (
    Manifest,
    ManifestEntry,
    SyntheticSpec,
    dump_scores,
    generate_synthetic,
    load_checkpoint,
    load_entry_image,
    load_manifest,
    parse_scores,
    read_tensor,
    save_checkpoint,
    save_manifest,
    tensor_bytes,
    tensor_from_bytes,
    write_tensor,
)
from stan.errors import DataError, IoError

GOLDEN = os.path.join(os.path.dirname(__file__), "golden")

# reference values the committed golden files were built from
GOLDEN_ARRAY = np.array([[1.0, -2.5], [0.5, 3.25], [-0.0, 7.0]], dtype=np.float32)
GOLDEN_STATE = {
    "lin.w": np.array([[0.25, -1.5]], dtype=np.float32),
    "lin.b": np.array([2.0], dtype=np.float32),
}
GOLDEN_META = {"config_hash": "abc123", "seed": 5}
GOLDEN_ROWS = [
    ("images/a.stan", 0, 0, 1.25),
    ("images/b.stan", -1, -1, -0.0),
    ("images/c.stan", 2, 1, 0.123456789123),
]
# first 8 bytes: magic, version 1 (u16 LE), dtype 0 (f32), rank 2
GOLDEN_TENSOR_HEADER = bytes.fromhex("5354414e01000002")


# ---------------------------------------------------------------------------
# tensor files
# ---------------------------------------------------------------------------


def test_tensor_serialization_matches_golden_bytes():
    with open(os.path.join(GOLDEN, "tensor_3x2.stan"), "rb") as f:
        want = f.read()
    assert tensor_bytes(GOLDEN_ARRAY) == want
    assert want[:8] == GOLDEN_TENSOR_HEADER


def test_tensor_golden_parses_back():
    arr = read_tensor(os.path.join(GOLDEN, "tensor_3x2.stan"))
    assert arr.dtype == np.float32
    np.testing.assert_array_equal(arr, GOLDEN_ARRAY)


def test_tensor_roundtrip_is_byte_stable(tmp_path, rng):
    p = str(tmp_path / "t.stan")
    arr = rng.normal(size=(2, 5, 3)).astype(np.float32)
    write_tensor(p, arr)
    first = open(p, "rb").read()
    write_tensor(p, read_tensor(p))
    assert open(p, "rb").read() == first


def test_tensor_rejects_rank_zero():
    with pytest.raises(IoError):
        tensor_bytes(np.float32(1.0))


def test_tensor_rejects_bad_magic():
    with pytest.raises(IoError):
        tensor_from_bytes(b"NOPE" + b"\x00" * 20)


def test_tensor_rejects_truncated_payload():
    good = tensor_bytes(np.ones((4, 4), dtype=np.float32))
    with pytest.raises(IoError):
        tensor_from_bytes(good[:-3])


def test_tensor_rejects_trailing_garbage(tmp_path):
    p = str(tmp_path / "t.stan")
    with open(p, "wb") as f:
        f.write(tensor_bytes(np.ones(2, dtype=np.float32)) + b"xx")
    with pytest.raises(IoError):
        read_tensor(p)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_matches_golden_bytes(tmp_path):
    p = str(tmp_path / "ck.stck")
    save_checkpoint(p, GOLDEN_STATE, GOLDEN_META)
    with open(os.path.join(GOLDEN, "tiny.stck"), "rb") as f:
        assert open(p, "rb").read() == f.read()


def test_checkpoint_golden_parses_back():
    state, meta = load_checkpoint(os.path.join(GOLDEN, "tiny.stck"))
    assert meta == GOLDEN_META
    assert set(state) == {"lin.w", "lin.b"}
    np.testing.assert_array_equal(state["lin.w"], GOLDEN_STATE["lin.w"])


def test_checkpoint_name_order_does_not_change_bytes(tmp_path):
    # records are sorted by name, so insertion order is irrelevant
    p1, p2 = str(tmp_path / "a.stck"), str(tmp_path / "b.stck")
    save_checkpoint(p1, dict(GOLDEN_STATE), GOLDEN_META)
    save_checkpoint(p2, dict(reversed(list(GOLDEN_STATE.items()))), GOLDEN_META)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_checkpoint_rejects_wrong_magic(tmp_path):
    p = str(tmp_path / "bad.stck")
    with open(p, "wb") as f:
        f.write(b"JUNKJUNKJUNK")
    with pytest.raises(IoError):
        load_checkpoint(p)


def test_checkpoint_rejects_trailer_mismatch(tmp_path):
    p = str(tmp_path / "ck.stck")
    save_checkpoint(p, GOLDEN_STATE, GOLDEN_META)
    with open(p, "ab") as f:
        f.write(b"!")
    with pytest.raises(IoError):
        load_checkpoint(p)


# ---------------------------------------------------------------------------
# score CSV
# ---------------------------------------------------------------------------


def test_scores_match_golden_bytes(tmp_path):
    p = str(tmp_path / "s.csv")
    dump_scores(p, GOLDEN_ROWS)
    with open(os.path.join(GOLDEN, "scores.csv"), "rb") as f:
        assert open(p, "rb").read() == f.read()


def test_scores_golden_parse_back():
    rows = parse_scores(os.path.join(GOLDEN, "scores.csv"))
    assert rows[0] == ("images/a.stan", 0, 0, 1.25)
    assert rows[1][3] == 0.0 and str(rows[1][3]) == "0.0"  # -0.0 normalized
    assert rows[2][3] == pytest.approx(0.123456789123, abs=1e-9)


def test_scores_reject_missing_header(tmp_path):
    p = str(tmp_path / "s.csv")
    with open(p, "w") as f:
        f.write("a,b,c\n")
    with pytest.raises(DataError):
        parse_scores(p)


def test_scores_nine_significant_digits(tmp_path):
    p = str(tmp_path / "s.csv")
    dump_scores(p, [("x", 0, 0, 1.0 / 3.0)])
    assert "0.333333333" in open(p).read()


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def make_manifest(entries):
    return Manifest(name="t", image_shape=(3, 8, 8), num_known_classes=2, entries=entries)


def roundtrip(tmp_path, m):
    p = str(tmp_path / "manifest.json")
    save_manifest(p, m)
    return load_manifest(p)


def test_manifest_roundtrip(tmp_path):
    m = make_manifest([
        ManifestEntry("images/a.stan", 0, "train", "known"),
        ManifestEntry("images/b.stan", -1, "test", "unknown"),
    ])
    back = roundtrip(tmp_path, m)
    assert back.num_known_classes == 2
    assert back.entries[1].openness == "unknown"
    assert back.root == str(tmp_path)


def test_manifest_rejects_unknown_in_train(tmp_path):
    m = make_manifest([ManifestEntry("a", -1, "train", "unknown")])
    with pytest.raises(DataError):
        roundtrip(tmp_path, m)


def test_manifest_rejects_unknown_with_real_label(tmp_path):
    m = make_manifest([ManifestEntry("a", 1, "test", "unknown")])
    with pytest.raises(DataError):
        roundtrip(tmp_path, m)


def test_manifest_rejects_out_of_range_label(tmp_path):
    m = make_manifest([ManifestEntry("a", 5, "train", "known")])
    with pytest.raises(DataError):
        roundtrip(tmp_path, m)


def test_manifest_rejects_bad_split(tmp_path):
    m = make_manifest([ManifestEntry("a", 0, "dev", "known")])
    with pytest.raises(DataError):
        roundtrip(tmp_path, m)


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------


def test_synthetic_spec_validation():
    with pytest.raises(DataError):
        SyntheticSpec(k_known=1).validate()
    with pytest.raises(DataError):
        SyntheticSpec(inter_class_similarity=1.0).validate()
    with pytest.raises(DataError):
        SyntheticSpec(image_side=4).validate()


def test_synthetic_split_sizes(tmp_path):
    spec = SyntheticSpec(k_known=3, k_unknown=2, per_class=8, image_side=16, seed=1)
    m = load_manifest(generate_synthetic(spec, str(tmp_path)))
    assert len(m.select(split="train")) == 3 * 8
    assert len(m.select(split="val")) == 3 * max(2, 8 // 4)
    assert len(m.select(split="test", openness="known")) == 3 * max(2, 8 // 2)
    assert len(m.select(split="test", openness="unknown")) == 2 * max(2, 8 // 2)
    assert all(e.openness == "known" for e in m.select(split="train"))


def test_synthetic_images_load_with_declared_shape(easy_dataset):
    e = easy_dataset.select(split="train")[0]
    img = load_entry_image(easy_dataset, e)
    assert img.shape == tuple(easy_dataset.image_shape)
    assert img.dtype == np.float32
    assert np.isfinite(img).all()


def test_synthetic_deterministic_by_seed(tmp_path):
    spec = SyntheticSpec(k_known=2, k_unknown=1, per_class=2, image_side=8, seed=9)
    p1 = generate_synthetic(spec, str(tmp_path / "a"))
    p2 = generate_synthetic(spec, str(tmp_path / "b"))
    m1, m2 = load_manifest(p1), load_manifest(p2)
    for e1, e2 in zip(m1.entries, m2.entries):
        assert e1.path == e2.path
        b1 = open(m1.resolve(e1), "rb").read()
        b2 = open(m2.resolve(e2), "rb").read()
        assert b1 == b2


def test_synthetic_seed_changes_pixels(tmp_path):
    s1 = SyntheticSpec(k_known=2, k_unknown=0, per_class=1, image_side=8, seed=1)
    s2 = SyntheticSpec(k_known=2, k_unknown=0, per_class=1, image_side=8, seed=2)
    m1 = load_manifest(generate_synthetic(s1, str(tmp_path / "a")))
    m2 = load_manifest(generate_synthetic(s2, str(tmp_path / "b")))
    a = load_entry_image(m1, m1.entries[0])
    b = load_entry_image(m2, m2.entries[0])
    assert np.abs(a - b).max() > 0


def test_similarity_knob_shrinks_motif_spread(tmp_path):
    """Higher s pulls class motifs toward the shared prototype, so the
    pairwise distance between class mean images shrinks."""

    def mean_gap(s, seed=3):
        spec = SyntheticSpec(k_known=4, k_unknown=0, per_class=4, image_side=16,
                             inter_class_similarity=s, seed=seed)
        m = load_manifest(generate_synthetic(spec, str(tmp_path / f"s{s}")))
        means = []
        for c in range(4):
            imgs = [load_entry_image(m, e) for e in m.select(split="train") if e.label == c]
            means.append(np.mean(imgs, axis=0))
        gaps = [np.linalg.norm(means[i] - means[j])
                for i in range(4) for j in range(i + 1, 4)]
        return float(np.mean(gaps))

    assert mean_gap(0.9) < mean_gap(0.0)


def test_manifest_json_is_valid_json():
    # golden dir has no manifest; just check the schema written by save_manifest
    m = make_manifest([ManifestEntry("images/a.stan", 0, "train", "known")])
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "m.json")
        save_manifest(p, m)
        doc = json.load(open(p))
        assert set(doc) == {"name", "image_shape", "num_known_classes", "entries"}
