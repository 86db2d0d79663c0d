import numpy as np
import pytest

from sketchret.errors import AuditViolation, ConfigurationError, CorpusError
from sketchret.synthdata import (MANIFEST_NAME, corpus_from_manifest, generate_corpus,
                                 load_corpus, load_manifest, manifest_to_text,
                                 poison_with_color_attributes, read_raster, save_manifest,
                                 write_raster)


def _all_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_generation_deterministic(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    for d in (a, b):
        generate_corpus(d, seed=5, n_source_ids=10, n_target_train_ids=4,
                        n_target_test_ids=4, photos_per_source_id=2)
    assert _all_bytes(a) == _all_bytes(b)


def test_identity_spaces_disjoint(tiny_corpus):
    m = tiny_corpus.manifest
    src = {r["identity"] for r in m["samples"]["source"]}
    tr = {r["identity"] for r in m["samples"]["target_train"]}
    te = {r["identity"] for r in m["samples"]["target_test"]}
    assert src & tr == set() and src & te == set() and tr & te == set()


def test_target_identities_have_photo_and_sketch(tiny_corpus):
    for split in ("target_train", "target_test"):
        recs = tiny_corpus.manifest["samples"][split]
        by_id = {}
        for r in recs:
            by_id.setdefault(r["identity"], set()).add(r["domain"])
        assert all({"t1", "t2"} <= doms for doms in by_id.values())


def test_renders_of_one_identity_share_attributes(tiny_corpus):
    by_id = {}
    for r in tiny_corpus.manifest["samples"]["source"]:
        by_id.setdefault(r["identity"], []).append(tuple(r["attributes"]))
    for atts in by_id.values():
        assert len(set(atts)) == 1


def test_attribute_bits_have_both_values(tiny_corpus):
    atts = np.array([r["attributes"] for r in tiny_corpus.manifest["samples"]["source"]])
    assert np.all(atts.min(axis=0) == 0) and np.all(atts.max(axis=0) == 1)


def test_photo_sketch_intensity_gap(tiny_corpus):
    split = tiny_corpus.splits["target_train"]
    photos = split.images(split.indices_for(domain="t1"))
    sketches = split.images(split.indices_for(domain="t2"))
    gap = sketches.mean() - photos.mean()
    assert gap > 0.2


def test_sketches_are_grayscale(tiny_corpus):
    split = tiny_corpus.splits["target_train"]
    sk = split.images(split.indices_for(domain="t2"))
    assert np.array_equal(sk[..., 0], sk[..., 1]) and np.array_equal(sk[..., 1], sk[..., 2])


def test_layout_paths(tiny_corpus):
    for split, recs in tiny_corpus.manifest["samples"].items():
        for r in recs:
            parts = r["path"].split("/")
            assert parts[0] == split
            assert parts[1] == str(r["identity"])
            assert parts[2].startswith(r["domain"] + "_")
            assert parts[2].endswith(".pgm" if r["domain"] == "t2" else ".ppm")


def test_split_sizes_match_arguments(tmp_path):
    generate_corpus(tmp_path, seed=2, n_source_ids=10, n_target_train_ids=5,
                    n_target_test_ids=4, photos_per_source_id=3,
                    photos_per_target_id=2, sketches_per_target_id=2)
    c = load_corpus(tmp_path)
    assert len(c.splits["source"]) == 30
    assert len(c.splits["target_train"]) == 5 * 4
    assert len(c.splits["target_test"]) == 4 * 4


def test_image_size_validation(tmp_path):
    with pytest.raises(ConfigurationError, match="image_size"):
        generate_corpus(tmp_path, seed=0, n_source_ids=10, image_size=8)


def test_min_identity_counts(tmp_path):
    with pytest.raises(ConfigurationError):
        generate_corpus(tmp_path, seed=0, n_source_ids=5)
    with pytest.raises(ConfigurationError):
        generate_corpus(tmp_path, seed=0, n_source_ids=10, n_target_train_ids=2)


def test_manifest_round_trip_bytes(tiny_corpus_dir):
    path = tiny_corpus_dir / MANIFEST_NAME
    manifest = load_manifest(path)
    assert manifest_to_text(manifest).encode() == path.read_bytes()


def test_checksum_mismatch_raises(tmp_path):
    generate_corpus(tmp_path, seed=3, n_target_train_ids=4, n_target_test_ids=4,
                    n_source_ids=10, photos_per_source_id=2)
    victim = next(tmp_path.glob("source/*/s_0.ppm"))
    data = bytearray(victim.read_bytes())
    data[-1] ^= 0xFF
    victim.write_bytes(bytes(data))
    with pytest.raises(CorpusError, match="checksum"):
        load_corpus(tmp_path)


def test_raster_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    rgb = rng.integers(0, 256, (6, 5, 3), dtype=np.uint8)
    write_raster(tmp_path / "x.ppm", rgb)
    back = read_raster(tmp_path / "x.ppm")
    assert back.shape == (6, 5, 3)
    np.testing.assert_allclose(back * 255.0, rgb, atol=1e-9)
    gray = rng.integers(0, 256, (4, 7), dtype=np.uint8)
    write_raster(tmp_path / "y.pgm", gray)
    back = read_raster(tmp_path / "y.pgm")
    assert back.shape == (4, 7, 3)
    assert np.array_equal(back[..., 0], back[..., 1])


# ---------------------------------------------------------------------------
# color poisoning


def test_poison_appends_color_bits(tiny_corpus):
    poisoned = poison_with_color_attributes(tiny_corpus.manifest)
    n0 = len(tiny_corpus.manifest["attribute_names"])
    assert len(poisoned["attribute_names"]) == n0 + 3
    assert poisoned["attribute_is_color"][n0:] == [True, True, True]
    assert poisoned["attribute_is_color"][:n0] == [False] * n0
    for rec in poisoned["samples"]["source"]:
        assert len(rec["attributes"]) == n0 + 3
    # original untouched
    assert len(tiny_corpus.manifest["samples"]["source"][0]["attributes"]) == n0


def test_poisoned_corpus_loads_same_images(tiny_corpus, tiny_corpus_dir):
    poisoned = poison_with_color_attributes(tiny_corpus.manifest)
    pc = corpus_from_manifest(poisoned, tiny_corpus_dir)
    img_a = tiny_corpus.splits["source"].image(0)
    img_b = pc.splits["source"].image(0)
    assert np.array_equal(img_a, img_b)


# ---------------------------------------------------------------------------
# access audit


def test_audit_records_and_blocks(tiny_corpus):
    split = tiny_corpus.splits["target_test"]
    split.image(0)
    assert tiny_corpus.audit.count("target_test") == 1
    with tiny_corpus.audit.guard("training", ("target_test",)):
        tiny_corpus.splits["source"].image(0)
        with pytest.raises(AuditViolation, match="target_test"):
            split.image(1)
    # guard released: reads allowed again
    split.image(1)
    assert tiny_corpus.audit.count("source", "training") == 1
