import numpy as np
import pytest

from mcdit import data as toydata
from mcdit.data import (
    SceneGraph,
    Shape,
    Split,
    caption_for,
    decode_caption,
    depth_map,
    edge_map,
    extract_depth,
    gen_scene,
    partition,
    render_target,
    shape_color,
    shape_mask,
)
from mcdit.errors import ContractError
from mcdit.lora import ConditionType


def test_gen_scene_deterministic():
    a = gen_scene(123)
    b = gen_scene(123)
    assert a.caption == b.caption and a.scores == b.scores
    assert np.array_equal(a.target, b.target)
    for ct in a.conditions:
        assert np.array_equal(a.conditions[ct], b.conditions[ct])
    c = gen_scene(124)
    assert not np.array_equal(a.target, c.target)


def test_stored_conditions_recomputable():
    for seed in range(20):
        s = gen_scene(seed)
        assert np.array_equal(s.conditions[ConditionType.CANNY], edge_map(s.target))
        assert np.array_equal(s.conditions[ConditionType.DEPTH], depth_map(s.scene))


def test_generator_invariants_sweep():
    """Shapes stay in-bounds on distinct layers; captions parse back."""
    for seed in range(10_000):
        rng_sample = gen_scene(seed)
        scene = rng_sample.scene
        layers = [sh.layer for sh in scene.shapes]
        assert len(set(layers)) == len(layers)
        for sh in scene.shapes:
            mask = shape_mask(sh)
            assert mask.any()
            assert not mask[0, :].any() and not mask[-1, :].any()
            assert not mask[:, 0].any() and not mask[:, -1].any()


def test_caption_scene_consistency():
    for seed in range(300):
        s = gen_scene(seed)
        words = decode_caption(s.caption_ids)
        subject = s.scene.subject()
        assert words[1] == subject.color
        assert words[2] == subject.kind
        vert, horiz = words[4].split("-")
        assert (subject.cy < 16) == (vert == "top")
        assert (subject.cx < 16) == (horiz == "left")


# -- edge map -------------------------------------------------------------------------


def test_edge_map_constant_image_is_empty():
    img = np.full((16, 16, 3), 0.5)
    assert not edge_map(img).any()


def test_edge_map_step_edge_single_line():
    img = np.zeros((16, 16, 3))
    img[:, 8:] = 1.0
    edges = edge_map(img)
    cols = np.flatnonzero(edges.any(axis=0))
    assert cols.tolist() == [7]  # one single-pixel vertical line
    assert edges[:, 7].all()


def test_edge_map_circle_ring_near_analytic_boundary():
    shape = Shape("circle", "red", 16.0, 16.0, 7.0, 7.0, 3)
    scene = SceneGraph([shape], background=0.06)
    edges = edge_map(render_target(scene))
    ys, xs = np.nonzero(edges)
    assert len(ys) > 0
    r = np.sqrt((xs - 16.0) ** 2 + (ys - 16.0) ** 2)
    assert np.all(np.abs(r - 7.0) <= 1.5)  # within ~1 px of the analytic circle
    # and the ring surrounds the disk: all four sides represented
    assert (ys < 16).any() and (ys > 16).any() and (xs < 16).any() and (xs > 16).any()


# -- depth map ------------------------------------------------------------------------


def test_depth_map_empty_scene_zero():
    scene = SceneGraph([], background=0.1)
    assert not depth_map(scene).any()


def test_depth_map_full_canvas_constant():
    shape = Shape("rectangle", "green", 16.0, 16.0, 40.0, 40.0, 2)
    scene = SceneGraph([shape], background=0.1)
    dm = depth_map(scene)
    assert (dm == 170).all()


def test_depth_map_occlusion_topmost_wins():
    lo = Shape("rectangle", "red", 12.0, 16.0, 6.0, 6.0, 1)
    hi = Shape("rectangle", "blue", 18.0, 16.0, 6.0, 6.0, 3)
    dm = depth_map(SceneGraph([lo, hi], background=0.1))
    overlap = shape_mask(lo) & shape_mask(hi)
    assert overlap.any()
    assert (dm[overlap] == 255).all()
    only_lo = shape_mask(lo) & ~shape_mask(hi)
    assert (dm[only_lo] == 85).all()


def test_extract_depth_inverts_rendering_exactly():
    for seed in range(50):
        s = gen_scene(seed)
        assert np.array_equal(extract_depth(s.target), s.conditions[ConditionType.DEPTH])


def test_shape_color_hits_layer_luma():
    for hue in toydata.HUES:
        for layer, target in toydata.LAYER_LUMAS.items():
            c = shape_color(hue, layer)
            assert abs(float(c @ np.array([0.299, 0.587, 0.114])) - target) < 1e-9
            assert (0.0 <= c).all() and (c <= 1.0).all()


# -- partitioning ----------------------------------------------------------------------


def test_partition_paper_examples():
    assert partition((5, 5, 5)) is Split.TRAIN
    assert partition((3, 5, 5)) is Split.TEST
    assert partition((5, 4, 5)) is Split.DISCARD


def test_partition_exhaustive_and_disjoint():
    train = test = discard = 0
    for cs in range(1, 6):
        for iq in range(1, 6):
            for sc in range(1, 6):
                split = partition((cs, iq, sc))
                if cs == 5 and iq == 5 and sc == 5:
                    assert split is Split.TRAIN
                    train += 1
                elif cs >= 3 and iq == 5 and sc == 5:
                    assert split is Split.TEST
                    test += 1
                else:
                    assert split is Split.DISCARD
                    discard += 1
    assert (train, test, discard) == (1, 2, 122)


def test_partition_train_condition_strictly_stronger():
    # every TRAIN triple also satisfies the TEST branch condition
    cs, iq, sc = 5, 5, 5
    assert cs >= 3 and iq == 5 and sc == 5


def test_partition_rejects_out_of_range():
    with pytest.raises(ContractError):
        partition((0, 5, 5))
    with pytest.raises(ContractError):
        partition((5, 6, 5))


# -- file round-trips -------------------------------------------------------------------


def test_dataset_write_and_reload(tmp_path):
    manifest = toydata.write_dataset(tmp_path, count=6, seed=50)
    records = toydata.read_manifest(manifest)
    assert len(records) == 6
    for rec in records:
        arrays = toydata.load_sample_arrays(tmp_path, rec)
        original = gen_scene(rec["seed"])
        assert np.array_equal(arrays["target"], original.target)
        assert np.array_equal(arrays["conditions"][ConditionType.CANNY],
                              original.conditions[ConditionType.CANNY])
        assert np.array_equal(arrays["conditions"][ConditionType.DEPTH],
                              original.conditions[ConditionType.DEPTH])
        assert np.array_equal(arrays["conditions"][ConditionType.MASK_FILL],
                              original.conditions[ConditionType.MASK_FILL])


def test_write_dataset_deterministic(tmp_path):
    m1 = toydata.write_dataset(tmp_path / "a", count=5, seed=9)
    m2 = toydata.write_dataset(tmp_path / "b", count=5, seed=9)
    assert m1.read_text() == m2.read_text()


def test_model_input_ranges():
    s = gen_scene(77)
    for ct in s.conditions:
        arr = toydata.to_model_input(ct, s)
        assert arr.shape == (32, 32, 3)
        assert arr.min() >= -1.0 and arr.max() <= 1.0


def test_mask_fill_hole_covers_subject():
    s = gen_scene(88)
    hole = toydata.hole_mask(s)
    subject = toydata.subject_mask(s.scene)
    assert (hole | ~subject).all()  # subject entirely inside the hole
    mf = s.conditions[ConditionType.MASK_FILL]
    assert np.array_equal(mf[:, :, :3][hole], np.zeros((hole.sum(), 3)))
