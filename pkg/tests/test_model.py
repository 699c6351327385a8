import numpy as np
import pytest

from sgshuffle import tensor as T
from sgshuffle.checkpoint import CheckpointError, save
from sgshuffle.checks import check_end_to_end
from sgshuffle.data.catalog import CATEGORIES
from sgshuffle.data.scenes import ObjectInstance, SceneRecord
from sgshuffle.model import (
    ConfigError,
    ModelConfig,
    batch_scenes,
    category_encode,
    category_head,
    encode_inputs,
    final_classify,
    forward,
    init_params,
    load_model,
    make_batch,
    ordered_pairs,
    parameter_count,
    predict_logits,
    protocol_objects,
    save_model,
    scene_arrays,
    shuffle_stage,
)
from sgshuffle.tensor import Tensor


def tiny(catalog, **kw):
    base = dict(d_model=8, n_encoder_layers=1, n_shuffle_layers=2, ffn_hidden=16, d_v=8, d_e=4, n_object_classes=30, seed=3)
    base.update(kw)
    return ModelConfig.for_catalog(catalog, **base)


def make_params(cfg, seed=0):
    return init_params(cfg, np.random.default_rng(seed).standard_normal((cfg.n_object_classes, cfg.d_e)))


def scene_with(n, d_v=8, seed=0):
    rng = np.random.default_rng(seed)
    objs = []
    for i in range(n):
        x, y = rng.uniform(0, 50, 2)
        objs.append(ObjectInstance((x, y, x + rng.uniform(5, 30), y + rng.uniform(5, 30)), int(rng.integers(30)), rng.standard_normal(d_v)))
    trips = [(0, 1, 3)] if n > 1 else []
    return SceneRecord((100.0, 100.0), objs, trips, scene_id=f"n{n}")


def test_config_defaults_and_invariants(catalog):
    cfg = ModelConfig()
    assert (cfg.n_encoder_layers, cfg.n_heads, cfg.n_shuffle_layers, cfg.d_model) == (6, 4, 5, 128)
    assert cfg.ffn_hidden == 256 and cfg.category_sizes == (15, 8, 24, 3)
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, n_heads=2)
    with pytest.raises(ConfigError):
        ModelConfig(n_shuffle_layers=0)
    with pytest.raises(ConfigError):
        ModelConfig(shuffle_mode="diagonal")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_parameter_count_is_pure(catalog):
    cfg = tiny(catalog)
    assert parameter_count(cfg) == make_params(cfg).count() == parameter_count(tiny(catalog))


@pytest.mark.parametrize("n", [1, 2, 7])
def test_shapes(catalog, n):
    cfg = tiny(catalog)
    params = make_params(cfg)
    out = forward(params, batch_scenes([scene_with(n)]))
    pairs = n * (n - 1)
    assert out.final_logits.shape == (pairs, 51)
    for cat, size in zip(CATEGORIES, (15, 8, 24, 3)):
        assert out.head_logits[cat].shape == (pairs, size + 1)
    x = encode_inputs(params, batch_scenes([scene_with(n)]))
    assert x.shape == (n, 8) and category_encode(x, params, "Semantic").shape == (n, 8)


def test_misc_head_width(catalog):
    params = make_params(tiny(catalog))
    batch = batch_scenes([scene_with(3)])
    feats = category_encode(encode_inputs(params, batch), params, "Misc")
    assert category_head(feats, batch, params, "Misc").shape == (6, 4)


def test_encode_inputs_zero_object_oracle(catalog):
    cfg = tiny(catalog)
    params = make_params(cfg)
    obj = ObjectInstance((0.0, 0.0, 1.0, 1.0), 5, np.zeros(8))
    batch = make_batch([scene_arrays(SceneRecord((1.0, 1.0), [obj], []))])
    batch.features[:] = 0.0  # zero box features and zero visual
    row = encode_inputs(params, batch).data[0]
    vec = np.concatenate([np.zeros(8 + 8), params.label_embeddings[5]])
    expected = vec @ params["input.weight"].data + params["input.bias"].data
    np.testing.assert_allclose(row, expected, rtol=1e-13, atol=1e-15)


def test_identical_objects_identical_rows(catalog):
    params = make_params(tiny(catalog))
    obj = ObjectInstance((1.0, 1.0, 5.0, 5.0), 2, np.ones(8))
    x = encode_inputs(params, batch_scenes([SceneRecord((10.0, 10.0), [obj, obj], [])]))
    assert np.array_equal(x.data[0], x.data[1])


def test_residual_identity_when_sublayers_zeroed(catalog):
    params = make_params(tiny(catalog, n_encoder_layers=2))
    for k, t in params.items():
        if k.startswith("enc.geometric") and any(s in k for s in (".attn.", ".ffn1.", ".ffn2.")):
            t.data[...] = 0.0
    rng = np.random.default_rng(0)
    # rows already normalised so identity LayerNorm returns them unchanged (up to eps)
    x = rng.standard_normal((3, 8))
    x = (x - x.mean(1, keepdims=True)) / x.std(1, keepdims=True)
    out = category_encode(Tensor(x), params, "Geometric").data
    np.testing.assert_allclose(out, x, atol=1e-4)


def test_head_matches_dense_oracle(catalog):
    params = make_params(tiny(catalog))
    batch = batch_scenes([scene_with(3)])
    feats = category_encode(encode_inputs(params, batch), params, "Possessive")
    logits = category_head(feats, batch, params, "Possessive").data
    f = feats.data
    rows = np.stack([np.concatenate([f[s], f[o], batch.pair_geo[k]]) for k, (s, o) in enumerate(ordered_pairs(3))])
    expected = rows @ params["head.possessive.weight"].data + params["head.possessive.bias"].data
    np.testing.assert_allclose(logits, expected, rtol=1e-12, atol=1e-12)


def test_identical_scenes_identical_logits(catalog):
    params = make_params(tiny(catalog))
    a, b = predict_logits(params, [scene_with(4, seed=2), scene_with(4, seed=2)])
    assert np.array_equal(a, b)


def test_batching_does_not_leak_between_scenes(catalog):
    params = make_params(tiny(catalog))
    scenes = [scene_with(3, seed=1), scene_with(5, seed=2), scene_with(2, seed=3)]
    with T.no_grad():
        joint = forward(params, batch_scenes(scenes)).final_logits.data
    single = np.concatenate(predict_logits(params, scenes))
    np.testing.assert_allclose(joint, single, rtol=1e-10, atol=1e-10)


def test_object_permutation_permutes_pairs(catalog):
    params = make_params(tiny(catalog))
    scene = scene_with(4, seed=7)
    perm = [2, 0, 3, 1]  # new index i holds old object perm[i]
    permuted = SceneRecord(scene.image_size, [scene.objects[j] for j in perm], [])
    (a,) = predict_logits(params, [scene])
    (b,) = predict_logits(params, [permuted])
    row = {p: k for k, p in enumerate(ordered_pairs(4))}
    for k, (s, o) in enumerate(ordered_pairs(4)):
        np.testing.assert_allclose(b[k], a[row[(perm[s], perm[o])]], rtol=1e-10, atol=1e-10)


def test_none_mode_pathways_independent(catalog):
    params = make_params(tiny(catalog, shuffle_mode="none"))
    rng = np.random.default_rng(0)
    inputs = [rng.standard_normal((3, 8)) for _ in range(4)]
    _, base = shuffle_stage([Tensor(x) for x in inputs], params, return_pathways=True)
    bumped = [x.copy() for x in inputs]
    bumped[2] += rng.standard_normal((3, 8))
    _, after = shuffle_stage([Tensor(x) for x in bumped], params, return_pathways=True)
    for k in range(4):
        same = np.array_equal(base[k].data, after[k].data)
        assert same == (k != 2)


def test_full_mode_pathways_all_depend_on_each_input(catalog):
    params = make_params(tiny(catalog, shuffle_mode="full", n_shuffle_layers=1))
    rng = np.random.default_rng(0)
    inputs = [rng.standard_normal((3, 8)) for _ in range(4)]
    _, base = shuffle_stage([Tensor(x) for x in inputs], params, return_pathways=True)
    bumped = [x.copy() for x in inputs]
    bumped[0] += 1.0 * rng.standard_normal((3, 8))
    _, after = shuffle_stage([Tensor(x) for x in bumped], params, return_pathways=True)
    assert all(not np.allclose(base[k].data, after[k].data) for k in range(4))


def test_protocol_objects(small_world):
    ds, _ = small_world
    scene = ds[0]
    _, labels, scores = protocol_objects(scene, "predcls")
    assert labels == [o.label_id for o in scene.objects] and scores == [1.0] * len(scene.objects)
    _, labels, _ = protocol_objects(scene, "sgcls")
    assert labels == [o.predicted_label() for o in scene.objects]
    bare = SceneRecord(scene.image_size, scene.objects, scene.gt_triplets)
    with pytest.raises(ValueError, match="detected_objects"):
        protocol_objects(bare, "sgdet")


def test_feature_width_mismatch(catalog):
    params = make_params(tiny(catalog))
    with pytest.raises(ConfigError):
        encode_inputs(params, batch_scenes([scene_with(2, d_v=5)]))


def test_checkpoint_round_trip(catalog, tmp_path):
    params = make_params(tiny(catalog))
    save_model(tmp_path / "m.sgsp", params)
    back = load_model(tmp_path / "m.sgsp")
    assert back.config == params.config
    assert all(np.array_equal(back[k].data, v.data) for k, v in params.items())
    assert np.array_equal(back.label_embeddings, params.label_embeddings)


def test_checkpoint_shape_validation(catalog, tmp_path):
    params = make_params(tiny(catalog))
    arrays = params.arrays()
    arrays["fuse.bias"] = np.zeros(3)
    save(tmp_path / "bad.sgsp", arrays, {"model_config": params.config.to_dict()})
    with pytest.raises(CheckpointError, match="fuse.bias"):
        load_model(tmp_path / "bad.sgsp")


@pytest.mark.parametrize("mode", ["full", "pair_to_pair", "none"])
def test_end_to_end_gradient(mode):
    row = check_end_to_end(mode, max_entries=2)
    assert row.passed, row.max_error
