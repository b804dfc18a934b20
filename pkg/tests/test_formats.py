"""Round-trip and corruption tests for the binary container formats."""

import numpy as np
import pytest

from o3dsg import formats
from o3dsg.formats import ParseError


def rng_for(case):
    return np.random.default_rng([11, case])


def write_cloud(path, rng, n=None):
    n = n if n is not None else int(rng.integers(1, 40))
    points = rng.normal(size=(n, 3)).astype(np.float32)
    colors = rng.integers(0, 256, size=(n, 3)).astype(np.uint8)
    ids = rng.integers(0, 9, size=n).astype(np.uint32)
    formats.write_point_cloud(path, points, colors, ids)
    return points, colors, ids


class TestPointCloud:
    @pytest.mark.parametrize("case", range(10))
    def test_round_trip_byte_identical(self, tmp_path, case):
        rng = rng_for(case)
        p1 = tmp_path / "a.o3pc"
        points, colors, ids = write_cloud(p1, rng)
        rp, rc, ri = formats.read_point_cloud(p1)
        np.testing.assert_array_equal(rp, points)
        np.testing.assert_array_equal(rc, colors)
        np.testing.assert_array_equal(ri, ids)
        p2 = tmp_path / "b.o3pc"
        formats.write_point_cloud(p2, rp, rc, ri)
        assert p1.read_bytes() == p2.read_bytes()

    def test_length_mismatch_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            formats.write_point_cloud(tmp_path / "x.o3pc", np.zeros((3, 3)), np.zeros((2, 3)), np.zeros(3))

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.o3pc"
        write_cloud(p, rng_for(0))
        raw = bytearray(p.read_bytes())
        raw[0] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(ParseError, match="magic"):
            formats.read_point_cloud(p)

    def test_truncated_records(self, tmp_path):
        p = tmp_path / "x.o3pc"
        write_cloud(p, rng_for(1), n=5)
        raw = p.read_bytes()
        p.write_bytes(raw[: len(raw) - 7])
        with pytest.raises(ParseError, match="length"):
            formats.read_point_cloud(p)

    def test_trailing_bytes(self, tmp_path):
        p = tmp_path / "x.o3pc"
        write_cloud(p, rng_for(2), n=5)
        p.write_bytes(p.read_bytes() + b"\x00" * 3)
        with pytest.raises(ParseError, match="trailing"):
            formats.read_point_cloud(p)

    def test_empty_cloud_rejected(self, tmp_path):
        p = tmp_path / "x.o3pc"
        import struct

        p.write_bytes(b"O3PC" + struct.pack("<IQ", 1, 0))
        with pytest.raises(ParseError, match="count"):
            formats.read_point_cloud(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParseError, match="missing file"):
            formats.read_point_cloud(tmp_path / "nope.o3pc")

    def test_wrong_version(self, tmp_path):
        p = tmp_path / "x.o3pc"
        write_cloud(p, rng_for(3))
        raw = bytearray(p.read_bytes())
        raw[4] = 9
        p.write_bytes(bytes(raw))
        with pytest.raises(ParseError, match="version"):
            formats.read_point_cloud(p)


class TestDepth:
    @pytest.mark.parametrize("case", range(5))
    def test_round_trip(self, tmp_path, case):
        rng = rng_for(100 + case)
        depth = rng.uniform(0, 8, size=(int(rng.integers(1, 20)), int(rng.integers(1, 20)))).astype(np.float32)
        p1 = tmp_path / "a.o3dp"
        formats.write_depth(p1, depth)
        out = formats.read_depth(p1)
        np.testing.assert_array_equal(out, depth)
        p2 = tmp_path / "b.o3dp"
        formats.write_depth(p2, out)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncation_names_field(self, tmp_path):
        p = tmp_path / "x.o3dp"
        formats.write_depth(p, np.ones((4, 4), dtype=np.float32))
        raw = p.read_bytes()
        p.write_bytes(raw[: len(raw) - 2])
        with pytest.raises(ParseError, match="depth values"):
            formats.read_depth(p)


class TestPixelEmbeddings:
    @pytest.mark.parametrize("case", range(5))
    def test_round_trip(self, tmp_path, case):
        rng = rng_for(200 + case)
        grid = rng.normal(size=(int(rng.integers(1, 9)), int(rng.integers(1, 9)), int(rng.integers(1, 12)))).astype(
            np.float32
        )
        p1 = tmp_path / "a.o3pe"
        formats.write_pixel_embeddings(p1, grid)
        out = formats.read_pixel_embeddings(p1)
        np.testing.assert_array_equal(out, grid)
        p2 = tmp_path / "b.o3pe"
        formats.write_pixel_embeddings(p2, out)
        assert p1.read_bytes() == p2.read_bytes()

    def test_rank_guard(self, tmp_path):
        with pytest.raises(ValueError):
            formats.write_pixel_embeddings(tmp_path / "x.o3pe", np.zeros((3, 3)))


class TestCropEmbeddings:
    @pytest.mark.parametrize("case", range(5))
    def test_round_trip(self, tmp_path, case):
        rng = rng_for(300 + case)
        dim = int(rng.integers(1, 10))
        records = []
        for _ in range(int(rng.integers(0, 8))):
            box = tuple(int(v) for v in rng.integers(0, 64, size=4))
            records.append((int(rng.integers(0, 4)), box, float(np.float32(rng.uniform(1, 3))), rng.normal(size=dim).astype(np.float32)))
        p1 = tmp_path / "a.o3ce"
        formats.write_crop_embeddings(p1, dim, records)
        rdim, out = formats.read_crop_embeddings(p1)
        assert rdim == dim
        assert len(out) == len(records)
        for got, want in zip(out, records):
            assert got[0] == want[0] and got[1] == want[1]
            assert got[2] == pytest.approx(want[2])
            np.testing.assert_array_equal(got[3], want[3])
        p2 = tmp_path / "b.o3ce"
        formats.write_crop_embeddings(p2, rdim, out)
        assert p1.read_bytes() == p2.read_bytes()

    def test_dim_guard(self, tmp_path):
        with pytest.raises(ValueError, match="dim"):
            formats.write_crop_embeddings(tmp_path / "x.o3ce", 4, [(0, (0, 0, 1, 1), 1.0, np.zeros(3))])

    def test_truncated_record_names_index(self, tmp_path):
        p = tmp_path / "x.o3ce"
        formats.write_crop_embeddings(p, 4, [(0, (0, 0, 1, 1), 1.0, np.zeros(4)), (1, (0, 0, 2, 2), 1.5, np.ones(4))])
        raw = p.read_bytes()
        p.write_bytes(raw[: len(raw) - 3])
        with pytest.raises(ParseError, match="record 1 vector"):
            formats.read_crop_embeddings(p)


class TestFusedTargets:
    @pytest.mark.parametrize("case", range(5))
    def test_round_trip_with_missing(self, tmp_path, case):
        rng = rng_for(400 + case)
        d_obj, d_rel = int(rng.integers(1, 8)), int(rng.integers(1, 8))
        nodes = []
        for nid in range(int(rng.integers(0, 6))):
            vec = None if rng.uniform() < 0.3 else rng.normal(size=d_obj).astype(np.float32)
            nodes.append((nid + 1, vec))
        edges = []
        for _ in range(int(rng.integers(0, 6))):
            pair = (int(rng.integers(1, 5)), int(rng.integers(5, 9)))
            vec = None if rng.uniform() < 0.3 else rng.normal(size=d_rel).astype(np.float32)
            edges.append((pair, vec))
        p1 = tmp_path / "a.o3ft"
        formats.write_fused_targets(p1, d_obj, d_rel, nodes, edges)
        ro, rr, rn, re = formats.read_fused_targets(p1)
        assert (ro, rr) == (d_obj, d_rel)
        assert [(i, v is None) for i, v in rn] == [(i, v is None) for i, v in nodes]
        for (_, got), (_, want) in zip(rn, nodes):
            if want is not None:
                np.testing.assert_array_equal(got, want)
        p2 = tmp_path / "b.o3ft"
        formats.write_fused_targets(p2, ro, rr, rn, re)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_presence_flag(self, tmp_path):
        p = tmp_path / "x.o3ft"
        formats.write_fused_targets(p, 2, 2, [(1, np.zeros(2))], [])
        raw = bytearray(p.read_bytes())
        # flag byte sits right after the 4-byte node id, after the 31-byte header
        raw[4 + 4 + 4 + 4 + 8 + 8 + 4] = 7
        p.write_bytes(bytes(raw))
        with pytest.raises(ParseError, match="presence flag"):
            formats.read_fused_targets(p)


class TestEmbeddingTable:
    @pytest.mark.parametrize("case", range(5))
    def test_round_trip(self, tmp_path, case):
        rng = rng_for(500 + case)
        dim = int(rng.integers(1, 10))
        labels = [f"label {k}" for k in range(int(rng.integers(1, 6)))]
        entries = [(lab, rng.normal(size=dim).astype(np.float32)) for lab in labels]
        p1 = tmp_path / "a.o3et"
        formats.write_embedding_table(p1, "objects", dim, entries)
        space, rdim, out = formats.read_embedding_table(p1)
        assert space == "objects" and rdim == dim
        assert [lab for lab, _ in out] == labels
        p2 = tmp_path / "b.o3et"
        formats.write_embedding_table(p2, space, rdim, out)
        assert p1.read_bytes() == p2.read_bytes()

    def test_unicode_labels(self, tmp_path):
        p = tmp_path / "x.o3et"
        formats.write_embedding_table(p, "t", 2, [("stuhl ü", np.zeros(2))])
        _, _, out = formats.read_embedding_table(p)
        assert out[0][0] == "stuhl ü"

    def test_truncated_label(self, tmp_path):
        p = tmp_path / "x.o3et"
        formats.write_embedding_table(p, "t", 2, [("chair", np.zeros(2))])
        raw = p.read_bytes()
        p.write_bytes(raw[: len(raw) - 9])
        with pytest.raises(ParseError):
            formats.read_embedding_table(p)


class TestCheckpoint:
    @pytest.mark.parametrize("case", range(5))
    def test_round_trip(self, tmp_path, case):
        rng = rng_for(600 + case)
        params = {
            "layer.w": rng.normal(size=(3, 4)).astype(np.float32),
            "layer.b": rng.normal(size=4).astype(np.float32),
        }
        opt = {"layer.w.m": np.zeros((3, 4), dtype=np.float32)}
        counters = {"step": int(rng.integers(0, 1000)), "epoch": 3}
        p1 = tmp_path / "a.o3ck"
        formats.write_checkpoint(p1, '{"k": 1}', params, opt, counters)
        cfg, rp, ro, rc = formats.read_checkpoint(p1)
        assert cfg == '{"k": 1}'
        assert rc == counters
        for name in params:
            np.testing.assert_array_equal(rp[name], params[name])
        p2 = tmp_path / "b.o3ck"
        formats.write_checkpoint(p2, cfg, rp, ro, rc)
        assert p1.read_bytes() == p2.read_bytes()

    def test_key_order_does_not_change_bytes(self, tmp_path):
        a = {"b": np.ones(2, dtype=np.float32), "a": np.zeros(2, dtype=np.float32)}
        b = {"a": np.zeros(2, dtype=np.float32), "b": np.ones(2, dtype=np.float32)}
        p1, p2 = tmp_path / "a.o3ck", tmp_path / "b.o3ck"
        formats.write_checkpoint(p1, "{}", a, {}, {})
        formats.write_checkpoint(p2, "{}", b, {}, {})
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_tensor_names_it(self, tmp_path):
        p = tmp_path / "x.o3ck"
        formats.write_checkpoint(p, "{}", {"w": np.ones((2, 2), dtype=np.float32)}, {}, {})
        raw = p.read_bytes()
        # strip the 8 trailing section counters plus part of the tensor payload
        p.write_bytes(raw[: len(raw) - 10])
        with pytest.raises(ParseError, match="w data"):
            formats.read_checkpoint(p)


def test_parse_error_message_shape(tmp_path):
    """Errors carry path, field, and detail in a fixed format."""
    p = tmp_path / "ghost.o3dp"
    with pytest.raises(ParseError) as exc:
        formats.read_depth(p)
    assert str(exc.value) == f"{p}: bad file: missing file"
