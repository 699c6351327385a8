import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgshuffle.data import (
    CatalogError,
    EmbeddingProvider,
    SceneSchemaError,
    SyntheticConfig,
    box_geometry,
    embed_label,
    generate_synthetic,
    iou,
    load_catalog,
    load_scenes_json,
    normalized_pos,
    save_catalog,
    save_scenes_json,
)
from sgshuffle.data.catalog import PredicateCatalog, catalog_from_json
from sgshuffle.data.geometry import center, contains
from sgshuffle.data.scenes import ObjectInstance, SceneDataset, SceneRecord, catalog_with_counts
from sgshuffle.data.synthetic import FREQUENCY_ORDER, GEOMETRIC_RULES

# Membership transcribed from the published category table.
TABLE1 = {
    "Geometric": {
        "above", "across", "against", "along", "at", "behind", "between", "in front of",
        "near", "on", "on back of", "over", "under", "in", "and",
    },
    "Possessive": {"belonging to", "has", "part of", "wearing", "attached to", "of", "wears", "with"},
    "Semantic": {
        "to", "carrying", "covered in", "covering", "eating", "flying in", "growing on", "hanging from",
        "holding", "laying on", "looking at", "lying on", "mounted on", "painted on", "parked on", "playing",
        "riding", "says", "sitting on", "standing on", "using", "walking in", "walking on", "watching",
    },
    "Misc": {"for", "from", "made of"},
}  # fmt: skip


# -- catalog ---------------------------------------------------------------

def test_default_catalog_matches_table(catalog):
    assert len(catalog) == 50
    for cat, labels in TABLE1.items():
        assert {catalog.labels[i] for i in catalog.members(cat)} == labels
    assert catalog.category_sizes() == {"Geometric": 15, "Possessive": 8, "Semantic": 24, "Misc": 3}


def test_catalog_examples(catalog):
    assert catalog.category("above") == "Geometric"
    assert catalog.category("made of") == "Misc"
    assert sum(catalog.category_sizes().values()) == 50


def test_catalog_rejects_duplicates_and_unknown_category():
    with pytest.raises(CatalogError):
        catalog_from_json({"predicates": [{"label": "on", "category": "Geometric"}] * 2})
    with pytest.raises(CatalogError):
        catalog_from_json({"predicates": [{"label": "on", "category": "Spatial"}]})


def test_catalog_round_trip_with_frequencies(catalog, tmp_path):
    cat = catalog.with_frequencies(range(50))
    save_catalog(cat, tmp_path / "c.json")
    back = load_catalog(tmp_path / "c.json")
    assert back.labels == cat.labels and back.frequencies() == list(range(50))


def test_category_index(catalog):
    assert catalog.category_index(catalog.index("made of")) == ("Misc", 2)


# -- geometry --------------------------------------------------------------

def test_box_geometry_identical():
    g = box_geometry((0, 0, 2, 2), (0, 0, 2, 2))
    assert g.iou == 1.0 and g.intersection == (0, 0, 2, 2)


def test_box_geometry_disjoint():
    g = box_geometry((0, 0, 1, 1), (2, 2, 3, 3))
    assert g.iou == 0.0 and g.intersection is None and g.union == (0, 0, 3, 3)


def test_box_geometry_partial_overlap():
    assert box_geometry((0, 0, 2, 2), (1, 1, 3, 3)).iou == pytest.approx(1 / 7, abs=1e-15)


def test_normalized_pos():
    np.testing.assert_allclose(normalized_pos((10, 20, 30, 60), 100, 200), [0.1, 0.1, 0.3, 0.3, 0.2, 0.2, 0.2, 0.2])
    assert not normalized_pos(None, 10, 10).any()


box_st = st.tuples(
    st.floats(0, 50), st.floats(0, 50), st.floats(1, 50), st.floats(1, 50)
).map(lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


@settings(max_examples=100, deadline=None)
@given(box_st, box_st)
def test_geometry_symmetry(a, b):
    ab, ba = box_geometry(a, b), box_geometry(b, a)
    assert ab.iou == pytest.approx(ba.iou, abs=1e-12) and ab.union == ba.union
    assert 0.0 <= ab.iou <= 1.0
    assert iou(a, a) == pytest.approx(1.0)


def test_iou_monotone_when_sliding_apart():
    values = [iou((0, 0, 4, 4), (dx, 0, dx + 4, 4)) for dx in np.linspace(0, 4, 9)]
    assert all(x > y for x, y in zip(values, values[1:]))


# -- embeddings ------------------------------------------------------------

def test_fallback_embedding_deterministic():
    p = EmbeddingProvider(12, seed=3)
    v = embed_label(p, "dog")
    assert v.shape == (12,)
    assert np.array_equal(v, embed_label(EmbeddingProvider(12, seed=3), "dog"))


def test_file_embedding_parse(tmp_path):
    f = tmp_path / "glove.txt"
    f.write_text("cat 0.1 0.2\nhot 1 2\ndog 3 4\n")
    p = EmbeddingProvider.from_file(f)
    np.testing.assert_array_equal(embed_label(p, "cat"), [0.1, 0.2])
    np.testing.assert_allclose(embed_label(p, "hot dog"), [2.0, 3.0])


def test_file_embedding_missing_token_logs_once(tmp_path, caplog):
    f = tmp_path / "glove.txt"
    f.write_text("cat 0.1 0.2\n")
    p = EmbeddingProvider.from_file(f)
    with caplog.at_level(logging.WARNING):
        a = embed_label(p, "zebra")
        b = embed_label(p, "zebra")
    assert np.array_equal(a, b) and a.shape == (2,)
    assert sum("zebra" in r.message for r in caplog.records) == 1


def test_embedding_file_dimension_mismatch(tmp_path):
    f = tmp_path / "glove.txt"
    f.write_text("cat 0.1 0.2\ndog 1\n")
    with pytest.raises(ValueError, match=":2:"):
        EmbeddingProvider.from_file(f)


# -- scene files -----------------------------------------------------------

def _one_scene():
    objs = [ObjectInstance((1.0, 2.0, 5.0, 9.0), 0, np.array([0.5, -1.25])), ObjectInstance((3.0, 3.0, 8.0, 8.0), 1, np.array([2.0, 0.0]))]
    return SceneDataset(["man", "hat"], [SceneRecord((10.0, 12.0), objs, [(0, 1, 1)], scene_id="s0")])


def test_scene_round_trip_bit_identical(catalog, tmp_path):
    ds = _one_scene()
    save_scenes_json(ds, tmp_path / "a.json", catalog)
    back = load_scenes_json(tmp_path / "a.json", catalog)
    save_scenes_json(back, tmp_path / "b.json", catalog)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert back.scenes[0].gt_triplets == [(0, 1, 1)]
    assert np.array_equal(back.scenes[0].objects[0].visual, [0.5, -1.25])


def test_empty_scene_file(tmp_path):
    f = tmp_path / "e.json"
    f.write_text('{"images": []}')
    assert len(load_scenes_json(f)) == 0


def _write(tmp_path, obj):
    f = tmp_path / "s.json"
    f.write_text(json.dumps(obj))
    return f


def test_malformed_box_reports_field_path(tmp_path):
    img = {"width": 10, "height": 10, "objects": [{"box": [0, 0, 2, 2], "label": "a"}, {"box": [5, 0, 1, 2], "label": "a"}], "triplets": []}
    with pytest.raises(SceneSchemaError, match=r"images\[0\]\.objects\[1\]\.box"):
        load_scenes_json(_write(tmp_path, {"images": [img]}))


def test_triplet_index_out_of_range(tmp_path):
    img = {"width": 10, "height": 10, "objects": [{"box": [0, 0, 2, 2], "label": "a"}], "triplets": [[0, 3, "on"]]}
    with pytest.raises(SceneSchemaError, match=r"triplets\[0\]"):
        load_scenes_json(_write(tmp_path, {"images": [img]}))


def test_json_syntax_error_reports_line(tmp_path):
    f = tmp_path / "bad.json"
    f.write_text('{"images": [\n  {"width": 1,,}\n]}')
    with pytest.raises(SceneSchemaError, match="line 2"):
        load_scenes_json(f)


def test_visual_synthesized_when_missing(tmp_path):
    img = {"width": 10, "height": 10, "objects": [{"box": [0, 0, 2, 2], "label": "a"}], "triplets": []}
    ds = load_scenes_json(_write(tmp_path, {"images": [img]}), d_v=6)
    assert ds.scenes[0].objects[0].visual.shape == (6,)


def test_scene_record_invariants():
    obj = ObjectInstance((0, 0, 1, 1), 0, np.zeros(2))
    with pytest.raises(ValueError):
        SceneRecord((5, 5), [obj, obj], [(0, 0, 1)])
    with pytest.raises(ValueError):
        SceneRecord((5, 5), [obj, obj], [(0, 1, 1), (0, 1, 1)])


def test_frequencies_from_training_split(catalog):
    ds = _one_scene()
    assert catalog_with_counts(catalog, ds.scenes).frequencies()[1] == 1


# -- synthetic -------------------------------------------------------------

def test_synthetic_byte_identical(catalog, tmp_path):
    cfg = SyntheticConfig(n_scenes=15, seed=4, d_v=8)
    save_scenes_json(generate_synthetic(cfg)[0], tmp_path / "a.json", catalog)
    save_scenes_json(generate_synthetic(cfg)[0], tmp_path / "b.json", catalog)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_synthetic_geometric_rules_hold(catalog):
    ds, _ = generate_synthetic(SyntheticConfig(n_scenes=200, seed=9, d_v=8))
    checked = 0
    for scene in ds:
        for s, o, p in scene.gt_triplets:
            rule = GEOMETRIC_RULES.get(catalog.labels[p])
            if rule:
                checked += 1
                assert rule(scene.objects[s].box, scene.objects[o].box)
    assert checked > 50
    above = catalog.index("above")
    for scene in ds:
        for s, o, p in scene.gt_triplets:
            if p == above:
                assert center(scene.objects[s].box)[1] < center(scene.objects[o].box)[1]


def test_synthetic_long_tail_ratio():
    _, cat = generate_synthetic(SyntheticConfig(n_scenes=500, zipf_exponent=1.5, seed=0))
    freq = cat.frequencies()
    assert max(freq) >= 20 * max(min(freq), 1)


def test_synthetic_shapes_and_tree_structure():
    ds, cat = generate_synthetic(SyntheticConfig(n_scenes=20, n_objects_range=(3, 6), d_v=16, seed=2))
    for scene in ds:
        assert 3 <= len(scene.objects) <= 6
        assert len(scene.gt_triplets) == len(scene.objects) - 1
        assert all(o.visual.shape == (16,) for o in scene.objects)
        assert len(scene.detected_objects) == len(scene.objects)
        w, h = scene.image_size
        assert all(0 <= b[0] < b[2] <= w and 0 <= b[1] < b[3] <= h for b in (o.box for o in scene.objects))
    assert sum(cat.frequencies()) == sum(len(s.gt_triplets) for s in ds)


def test_synthetic_rejects_bad_config():
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticConfig(n_objects_range=(0, 0)))


def test_synthetic_zero_scenes():
    ds, cat = generate_synthetic(SyntheticConfig(n_scenes=0))
    assert len(ds) == 0 and sum(cat.frequencies()) == 0


def test_frequency_order_covers_catalog(catalog):
    assert sorted(FREQUENCY_ORDER) == sorted(catalog.labels)


def test_contains():
    assert contains((0, 0, 10, 10), (2, 2, 3, 3)) and not contains((2, 2, 3, 3), (0, 0, 10, 10))
