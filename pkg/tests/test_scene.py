"""Scene data model: instance indexing, pair sets, skeleton, manifest loading."""

import json

import numpy as np
import pytest

from o3dsg import formats
from o3dsg.formats import ParseError
from o3dsg.scene import (
    InstanceSet,
    ScenePointCloud,
    build_pair_set,
    build_skeleton,
    load_scene,
)


def toy_cloud():
    points = np.array(
        [
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.5, 0.0, 0.0],
            [5.0, 5.0, 5.0],
            [5.5, 5.0, 5.0],
            [2.5, 2.5, 2.5],
        ],
        dtype=np.float32,
    )
    ids = np.array([1, 1, 1, 2, 2, 3], dtype=np.uint32)
    colors = np.zeros((6, 3), dtype=np.uint8)
    return ScenePointCloud(points=points, colors=colors, instance_ids=ids)


class TestInstanceSet:
    def test_indices_and_boxes(self):
        inst = InstanceSet.from_cloud(toy_cloud())
        assert inst.ids == (1, 2, 3)
        np.testing.assert_array_equal(inst.point_index[1], [0, 1, 2])
        lo, hi = inst.aabb[1]
        np.testing.assert_allclose(lo, [0, 0, 0])
        np.testing.assert_allclose(hi, [1, 0, 0])
        np.testing.assert_allclose(inst.center(1), [0.5, 0, 0])

    def test_require_unknown(self):
        inst = InstanceSet.from_cloud(toy_cloud())
        with pytest.raises(KeyError, match="99"):
            inst.require(99)

    def test_empty_cloud_rejected(self):
        with pytest.raises(ValueError):
            ScenePointCloud(
                points=np.zeros((0, 3), dtype=np.float32),
                colors=np.zeros((0, 3), dtype=np.uint8),
                instance_ids=np.zeros(0, dtype=np.uint32),
            )


class TestPairSet:
    def test_membership_and_masks(self):
        cloud = toy_cloud()
        inst = InstanceSet.from_cloud(cloud)
        pair = build_pair_set(cloud, inst, 1, 2)
        # instance 3's point is outside both boxes
        np.testing.assert_array_equal(pair.source_indices, [0, 1, 2, 3, 4])
        np.testing.assert_array_equal(pair.mask_channel, [1, 1, 1, 2, 2])

    def test_order_swaps_masks_only(self):
        cloud = toy_cloud()
        inst = InstanceSet.from_cloud(cloud)
        a = build_pair_set(cloud, inst, 1, 2)
        b = build_pair_set(cloud, inst, 2, 1)
        np.testing.assert_array_equal(a.source_indices, b.source_indices)
        swapped = np.where(a.mask_channel == 1, 2, np.where(a.mask_channel == 2, 1, 0))
        np.testing.assert_array_equal(b.mask_channel, swapped)

    def test_bystander_inside_union(self):
        points = np.array([[0, 0, 0], [1, 1, 1], [0.5, 0.5, 0.5]], dtype=np.float32)
        ids = np.array([1, 2, 3], dtype=np.uint32)
        cloud = ScenePointCloud(points=points, colors=np.zeros((3, 3), np.uint8), instance_ids=ids)
        inst = InstanceSet.from_cloud(cloud)
        pair = build_pair_set(cloud, inst, 1, 2)
        # the id-3 point sits inside neither degenerate box, but a bystander
        # inside box(1) must be kept with mask 0
        points2 = np.array([[0, 0, 0], [2, 0, 0], [1, 0, 0], [9, 9, 9]], dtype=np.float32)
        ids2 = np.array([1, 1, 2, 2], dtype=np.uint32)
        cloud2 = ScenePointCloud(points=points2, colors=np.zeros((4, 3), np.uint8), instance_ids=ids2)
        inst2 = InstanceSet.from_cloud(cloud2)
        got = build_pair_set(cloud2, inst2, 1, 2)
        assert 2 in got.source_indices
        assert pair.i == 1 and pair.j == 2

    def test_same_instance_rejected(self):
        cloud = toy_cloud()
        inst = InstanceSet.from_cloud(cloud)
        with pytest.raises(ValueError):
            build_pair_set(cloud, inst, 1, 1)


class TestSkeleton:
    def test_fully_connected_ordered(self):
        inst = InstanceSet.from_cloud(toy_cloud())
        sk = build_skeleton(inst)
        assert sk.nodes == (1, 2, 3)
        assert len(sk.edges) == 6
        assert (1, 2) in sk.edges and (2, 1) in sk.edges
        assert all(i != j for i, j in sk.edges)

    def test_distance_pruning(self):
        inst = InstanceSet.from_cloud(toy_cloud())
        # centers: 1 at (0.5,0,0), 2 at (5.25,5,5), 3 at (2.5,2.5,2.5)
        d13 = float(np.linalg.norm(inst.center(1) - inst.center(3)))
        sk = build_skeleton(inst, max_pair_distance=d13)
        assert (1, 3) in sk.edges and (3, 1) in sk.edges
        assert (1, 2) not in sk.edges
        # boundary is inclusive
        assert (1, 3) in build_skeleton(inst, max_pair_distance=d13).edges

    def test_feature_slots_exist(self):
        inst = InstanceSet.from_cloud(toy_cloud())
        sk = build_skeleton(inst)
        assert set(sk.node_feature_slots) == {1, 2, 3}
        assert set(sk.edge_feature_slots) == set(sk.edges)
        assert sk.node_feature_slots[1].f2d is None


class TestManifest:
    def write_minimal(self, tmp_path, mutate=None):
        cloud = toy_cloud()
        formats.write_point_cloud(tmp_path / "c.o3pc", cloud.points, cloud.colors, cloud.instance_ids)
        formats.write_depth(tmp_path / "d0.o3dp", np.full((4, 4), 2.0, dtype=np.float32))
        manifest = {
            "cloud": "c.o3pc",
            "frames": [
                {
                    "width": 4,
                    "height": 4,
                    "intrinsics": [2.0, 0, 2.0, 0, 2.0, 2.0, 0, 0, 1.0],
                    "extrinsics": [1.0, 0, 0, 0, 0, 1.0, 0, 0, 0, 0, 1.0, 0],
                    "depth": "d0.o3dp",
                }
            ],
        }
        if mutate:
            mutate(manifest)
        path = tmp_path / "scene.json"
        path.write_text(json.dumps(manifest))
        return path

    def test_round_trip(self, tmp_path):
        path = self.write_minimal(tmp_path)
        cloud, inst, frames = load_scene(path)
        assert len(cloud) == 6
        assert inst.ids == (1, 2, 3)
        assert len(frames) == 1
        assert frames[0].index == 0
        assert frames[0].intrinsics.shape == (3, 3)
        assert frames[0].depth.shape == (4, 4)

    def test_missing_field_named(self, tmp_path):
        path = self.write_minimal(tmp_path, mutate=lambda m: m.pop("cloud"))
        with pytest.raises(ParseError, match="cloud"):
            load_scene(path)

    def test_missing_frame_field_named(self, tmp_path):
        path = self.write_minimal(tmp_path, mutate=lambda m: m["frames"][0].pop("depth"))
        with pytest.raises(ParseError, match=r"frames\[0\].depth"):
            load_scene(path)

    def test_bad_intrinsics_length(self, tmp_path):
        path = self.write_minimal(tmp_path, mutate=lambda m: m["frames"][0].update(intrinsics=[1, 2, 3]))
        with pytest.raises(ParseError, match=r"frames\[0\].intrinsics"):
            load_scene(path)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "scene.json"
        path.write_text("{not json")
        with pytest.raises(ParseError, match="json"):
            load_scene(path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ParseError, match="missing file"):
            load_scene(tmp_path / "nope.json")

    def test_invalid_camera_rejected(self, tmp_path):
        def mutate(m):
            m["frames"][0]["intrinsics"] = [-2.0, 0, 2.0, 0, 2.0, 2.0, 0, 0, 1.0]

        path = self.write_minimal(tmp_path, mutate=mutate)
        with pytest.raises(ParseError, match=r"frames\[0\]"):
            load_scene(path)
