import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dgseg import data as D
from dgseg.errors import ConfigurationError, DataError, DimensionError

# hand-written lookup tables, one row per rule in the published mapping tables
RESCUENET_TO_POTSDAM = {
    0: "Clut",   # Bkdg -> Clut
    1: "Clut",   # Water -> Bkdg -> Clut
    2: "Bldg", 3: "Bldg", 4: "Bldg", 5: "Bldg",   # building-related -> Bldg
    6: "Car",    # Vehicle -> Car
    7: "Surf", 8: "Surf",   # road-related -> Surf
    9: "Tree",
    10: "Clut",  # Pool -> Bkdg -> Clut
}
OEM_TO_LOVEDA = {1: "Barr", 2: "Bkgd", 3: "Bkgd", 4: "Rd", 5: "Frst", 6: "Wtr", 7: "Agri", 8: "Bldg"}


# -- tiling --------------------------------------------------------------------

def pair(h, w, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((3, h, w)).astype(np.float32), rng.integers(0, 5, (h, w))


def test_tile_counts():
    img, lab = pair(64, 64)
    assert len(D.tile(img, lab, 32, 32)) == 4
    one = D.tile(img, lab, 64)
    assert len(one) == 1 and np.array_equal(one[0].image, img) and np.array_equal(one[0].label, lab)
    img, lab = pair(1024, 1024)
    assert len(D.tile(img, lab, 512, 512)) == 4


def test_tile_remainder_reflect_oracle():
    img, lab = pair(1000, 1000, 1)
    tiles = D.tile(img, lab, 512, 512)
    assert len(tiles) == 4 and [t.origin for t in tiles] == [(0, 0), (0, 512), (512, 0), (512, 512)]
    padded = np.pad(img, ((0, 0), (0, 24), (0, 24)), mode="reflect")
    for t in tiles:
        r, c = t.origin
        assert np.array_equal(t.image, padded[:, r:r + 512, c:c + 512])
    last = tiles[-1].label
    assert np.all(last[488:, :] == 255) and np.all(last[:, 488:] == 255)
    assert np.array_equal(last[:488, :488], lab[512:, 512:])


def test_tile_overlap_count():
    img, lab = pair(100, 70)
    tiles = D.tile(img, lab, 32, 16)
    ny = -(-(100 - 32) // 16) + 1
    nx = -(-(70 - 32) // 16) + 1
    assert len(tiles) == ny * nx


def test_tile_errors():
    img, lab = pair(8, 8)
    with pytest.raises(ConfigurationError):
        D.tile(img, lab, 0)
    with pytest.raises(ConfigurationError):
        D.tile(img, lab, 16, pad=False)
    with pytest.raises(DimensionError):
        D.tile(img, lab[:4], 4)


@settings(max_examples=30, deadline=None)
@given(st.integers(5, 60), st.integers(5, 60), st.integers(4, 32), st.integers(0, 2**31))
def test_tile_stitch_roundtrip(h, w, ts, seed):
    img, lab = pair(h, w, seed)
    out_img, out_lab = D.stitch(D.tile(img, lab, ts), (h, w))
    assert np.array_equal(out_img, img) and np.array_equal(out_lab, lab)


# -- remapping -------------------------------------------------------------------

def test_identity_mapping():
    lab = np.random.default_rng(0).integers(0, 4, (6, 6))
    assert np.array_equal(D.remap_labels(lab, D.LabelMapping.identity(4)), lab)


@pytest.mark.parametrize("name,table", [("rescuenet_to_potsdam", RESCUENET_TO_POTSDAM),
                                        ("oem_to_loveda", OEM_TO_LOVEDA)])
def test_mapping_golden(name, table):
    m = D.load_mapping(name)
    assert {r.source_id for r in m.rules} == set(table)
    for src, tgt in table.items():
        out = D.remap_labels(np.full((3, 3), src), m)
        assert np.all(out == m.classes.index(tgt)), (src, tgt)


def test_final_class_lists():
    assert D.load_mapping("rescuenet_to_potsdam").classes == ("Surf", "Bldg", "Tree", "Car", "Clut")
    assert D.load_mapping("oem_to_loveda").classes == ("Bkgd", "Bldg", "Rd", "Wtr", "Barr", "Frst", "Agri")
    pots = D.load_mapping("potsdam_to_rescuenet_classes")
    assert np.all(D.remap_labels(np.full((2, 2), 2), pots) == 255)  # low vegetation excluded


def test_building_damage_to_building():
    m = D.load_mapping("rescuenet_to_potsdam")
    lab = np.random.default_rng(0).integers(2, 6, (8, 8))
    assert np.all(D.remap_labels(lab, m) == m.classes.index("Bldg"))


def test_oem_random_vs_lookup():
    m = D.load_mapping("oem_to_loveda")
    lab = np.random.default_rng(1).integers(1, 9, (16, 16))
    ref = np.vectorize(lambda v: m.classes.index(OEM_TO_LOVEDA[int(v)]))(lab)
    assert np.array_equal(D.remap_labels(lab, m), ref)


def test_unmapped_value_error():
    m = D.load_mapping("oem_to_loveda")
    lab = np.ones((4, 4), int)
    lab[0, :3] = 0
    with pytest.raises(DataError, match=r"0 \(3 px\)"):
        D.remap_labels(lab, m)


def test_remap_idempotent_on_fixed_points():
    m = D.LabelMapping("fp", (D.MappingRule("a", 0, "a"), D.MappingRule("b", 1, "b"), D.MappingRule("c", 2, "a")),
                       ("a", "b"))
    lab = np.random.default_rng(0).integers(0, 3, (5, 5))
    once = D.remap_labels(lab, m)
    assert np.array_equal(D.remap_labels(once, m), once)


def test_mapping_file_roundtrip(tmp_path):
    m = D.load_mapping("rescuenet_to_potsdam")
    (tmp_path / "m.json").write_text(json.dumps(m.to_dict()))
    assert D.load_mapping(tmp_path / "m.json") == m
    assert "oem_to_loveda" in D.shipped_mappings()


def test_mapping_rejects_duplicates():
    with pytest.raises(DataError):
        D.LabelMapping("x", (D.MappingRule("a", 0, "a"), D.MappingRule("b", 0, "a")), ("a",))


# -- splits ------------------------------------------------------------------------

def write_pairs(d, stems, size=8):
    (d / "images").mkdir(parents=True, exist_ok=True)
    (d / "labels").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(0)
    for s in stems:
        D.save_image(d / "images" / f"{s}.png", rng.random((3, size, size)))
        D.save_label(d / "labels" / f"{s}.png", rng.integers(0, 6, (size, size)))


def test_build_split_empty(tmp_path):
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        out = D.build_split(tmp_path, "P(i)2V")
    assert out["train"] == [] and out["test"] == [] and len(out["warnings"]) == 2


def test_build_split_isprs_layout(tmp_path):
    stems = ["b", "a", "f", "c", "e", "d"]
    write_pairs(tmp_path / "isprs" / "potsdam_irrg" / "train", stems)
    write_pairs(tmp_path / "isprs" / "potsdam_irrg" / "test", ["zz"])
    write_pairs(tmp_path / "isprs" / "vaihingen_irrg" / "test", ["v1", "v2"])
    write_pairs(tmp_path / "isprs" / "vaihingen_irrg" / "train", ["v0"])
    out = D.build_split(tmp_path, "P(i)2V", manifest={"P(i)2V": {"train": 3456, "test": 398}})
    assert [p[0].stem for p in out["train"]] == sorted(stems)
    assert [p[0].stem for p in out["test"]] == ["v1", "v2"]
    assert out["count_check"]["ok"] is False
    again = D.build_split(tmp_path, "P(i)2V")
    assert again["train"] == out["train"] and again["test"] == out["test"]


def test_build_split_orphans(tmp_path):
    d = tmp_path / "isprs" / "potsdam_irrg" / "train"
    write_pairs(d, ["a", "b"])
    (d / "labels" / "b.png").unlink()
    with pytest.raises(DataError, match="b"):
        D.build_split(tmp_path, "P(i)2V")


def test_benchmark_table_rows():
    b = D.BENCHMARKS
    assert (b["P(i)2V"].train, b["P(i)2V"].test, b["P(i)2V"].size) == (3456, 398, 512)
    assert (b["U2R"].train, b["U2R"].test, b["U2R"].size, b["U2R"].classes) == (1156, 992, 1024, 7)
    assert sum(1 for k in b if b[k].group == "casid") == 12
    with pytest.raises(ConfigurationError):
        D.build_split(".", "X2Y")


def test_preprocess_domain(tmp_path):
    src = tmp_path / "src"
    (src / "images").mkdir(parents=True)
    (src / "labels").mkdir(parents=True)
    rng = np.random.default_rng(0)
    D.save_image(src / "images" / "s.png", rng.random((3, 20, 20)))
    D.save_label(src / "labels" / "s.png", rng.integers(1, 9, (20, 20)))
    rec = D.preprocess_domain(src, tmp_path / "out", 16, mapping=D.load_mapping("oem_to_loveda"), domain="oem")
    assert rec["tiles"] == 4 and rec["source_pairs"] == 1
    hist = rec["class_histogram"]
    assert sum(hist.values()) == 4 * 16 * 16 and hist["255"] == 4 * 256 - 400
    for f in rec["files"]:
        assert D.sha256(tmp_path / "out" / "images" / f["image"]) == f["image_sha256"]


def test_image_label_io_roundtrip(tmp_path):
    img, lab = pair(6, 7)
    D.save_label(tmp_path / "l.png", lab)
    assert np.array_equal(D.load_label(tmp_path / "l.png"), lab)
    D.save_image(tmp_path / "i.png", img)
    assert np.max(np.abs(D.load_image(tmp_path / "i.png") - img)) <= 0.5 / 255 + 1e-6


# -- synthetic domains ----------------------------------------------------------------

def test_synth_determinism_and_shared_geometry():
    a1, b1 = D.synth_two_domain(3, 5)
    a2, _ = D.synth_two_domain(3, 5)
    for x, y in zip(a1, a2):
        assert np.array_equal(x.image, y.image) and np.array_equal(x.label, y.label)
    for x, y in zip(a1, b1):
        assert np.array_equal(x.label, y.label)
    ha = np.bincount(np.concatenate([s.label.ravel() for s in a1]), minlength=3)
    hb = np.bincount(np.concatenate([s.label.ravel() for s in b1]), minlength=3)
    assert np.array_equal(ha, hb)


def test_synth_domain_gap():
    a, b = D.synth_two_domain(0, 32)
    ma = np.mean([s.image.mean(axis=(1, 2)) for s in a], axis=0)
    mb = np.mean([s.image.mean(axis=(1, 2)) for s in b], axis=0)
    assert np.max(np.abs(ma - mb)) > 0.2


def test_synth_needs_two_classes():
    with pytest.raises(ConfigurationError):
        D.synth_two_domain(0, 1, k=1)
