import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from picocodec.codec import (NUM_COARSE_LEVELS, NUM_LEVELS, BitstreamHeader, Codec, CodecError, GainTable,
                             TileGrid, apply_level_gain, decode_image, encode_image, estimate_tile_bits,
                             extract_padded_tile, level_embedding, parse_header, partition_tiles, place_core,
                             serialize_header)


@pytest.fixture(scope="module")
def codec():
    return Codec.synthetic(3, "tiny")


def random_image(seed, h, w):
    return np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)


class TestTiling:
    @pytest.mark.parametrize("w,h,cols,rows", [(1, 1, 1, 1), (504, 504, 1, 1), (505, 504, 2, 1),
                                               (700, 500, 2, 1), (1512, 1512, 3, 3), (4032, 3024, 8, 6)])
    def test_grid_counts(self, w, h, cols, rows):
        g = partition_tiles(w, h)
        assert (g.cols, g.rows, len(g)) == (cols, rows, cols * rows)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 3000), st.integers(1, 3000))
    def test_cores_partition_image(self, w, h):
        g = partition_tiles(w, h)
        cover = np.zeros((h, w), dtype=np.int32) if w * h <= 2_000_000 else None
        area = 0
        for r, c in g.tiles():
            x0, y0, cw, ch = g.core_rect(r, c)
            assert 1 <= cw <= 504 and 1 <= ch <= 504
            area += cw * ch
            if cover is not None:
                cover[y0:y0 + ch, x0:x0 + cw] += 1
        assert area == w * h
        if cover is not None:
            assert np.all(cover == 1)

    def test_last_column_is_partial(self):
        g = TileGrid(700, 500)
        assert g.core_rect(0, 1) == (504, 0, 196, 500)
        with pytest.raises(IndexError):
            g.core_rect(1, 0)

    def test_bad_dimensions(self):
        with pytest.raises(ValueError):
            TileGrid(0, 10)

    def test_padded_tile_replicates_edges(self):
        img = random_image(0, 20, 30)
        g = partition_tiles(30, 20)
        t = extract_padded_tile(img, g, 0, 0)
        assert t.shape == (3, 512, 512)
        np.testing.assert_array_equal(t[:, 4:24, 4:34], img.transpose(2, 0, 1))
        np.testing.assert_array_equal(t[:, 0, 0], img[0, 0])
        np.testing.assert_array_equal(t[:, 511, 511], img[-1, -1])

    def test_extract_then_place_is_identity(self):
        img = random_image(1, 600, 1100)
        g = partition_tiles(1100, 600)
        out = np.zeros_like(img)
        for r, c in g.tiles():
            place_core(out, extract_padded_tile(img, g, r, c), g, r, c)
        np.testing.assert_array_equal(out, img)

    def test_neighbour_margin_comes_from_adjacent_tile(self):
        img = random_image(2, 100, 600)
        g = partition_tiles(600, 100)
        t = extract_padded_tile(img, g, 0, 1)
        np.testing.assert_array_equal(t[:, 4:104, 0:4], img[:, 500:504].transpose(2, 0, 1))


class TestLevel:
    @pytest.mark.parametrize("level", range(NUM_LEVELS))
    def test_embedding_sums_to_one(self, level):
        e = level_embedding(level)
        assert e.shape == (NUM_COARSE_LEVELS,)
        assert e.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.count_nonzero(e) <= 2 and np.all(e >= 0)

    def test_embedding_examples(self):
        np.testing.assert_allclose(level_embedding(0), np.eye(8)[0])
        np.testing.assert_allclose(level_embedding(70), np.eye(8)[7])
        np.testing.assert_allclose(level_embedding(35), 0.5 * np.eye(8)[3] + 0.5 * np.eye(8)[4])
        np.testing.assert_allclose(level_embedding(12), 0.8 * np.eye(8)[1] + 0.2 * np.eye(8)[2])

    @pytest.mark.parametrize("bad", [-1, 71, 3.5, True, "7"])
    def test_embedding_rejects(self, bad):
        with pytest.raises(ValueError):
            level_embedding(bad)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 70), st.integers(0, 2**32 - 1))
    def test_gain_roundtrip(self, level, seed):
        rng = np.random.default_rng(seed)
        gt = GainTable(np.exp(rng.uniform(-3, 3, (8, 5))))
        y = rng.normal(0, 10, (5, 3, 4))
        back = apply_level_gain(apply_level_gain(y, level, gt), level, gt, "inverse")
        np.testing.assert_allclose(back, y, rtol=1e-6, atol=1e-12)

    def test_gain_interpolates(self):
        gt = GainTable(np.arange(1, 9, dtype=float)[:, None] * np.ones((8, 2)))
        np.testing.assert_allclose(gt.at(25), [3.5, 3.5])

    def test_gain_validation(self):
        with pytest.raises(ValueError):
            GainTable(np.ones((7, 3)))
        with pytest.raises(ValueError):
            GainTable(np.zeros((8, 3)))
        with pytest.raises(ValueError):
            apply_level_gain(np.ones((4, 2, 2)), 0, GainTable.ones(3))
        with pytest.raises(ValueError):
            apply_level_gain(np.ones((3, 2, 2)), 0, GainTable.ones(3), "sideways")


class TestHeader:
    def make(self, w=1100, h=600, level=12):
        g = partition_tiles(w, h)
        sizes = tuple((10 + i, 200 + 3 * i) for i in range(len(g)))
        return BitstreamHeader(level, w, h, g.cols, g.rows, sizes)

    def test_roundtrip(self):
        h = self.make()
        data = serialize_header(h)
        back, n = parse_header(data + b"payload")
        assert back == h and n == len(data)
        assert h.payload_size == sum(z + y for z, y in h.tile_sizes)

    def test_single_pixel(self):
        h = self.make(1, 1, 0)
        assert parse_header(serialize_header(h))[0] == h

    def test_any_bit_flip_detected(self):
        data = bytearray(serialize_header(self.make()))
        for i in range(len(data)):
            for bit in (0, 7):
                bad = bytearray(data)
                bad[i] ^= 1 << bit
                with pytest.raises(CodecError):
                    parse_header(bytes(bad))

    def test_truncated(self):
        data = serialize_header(self.make())
        for n in (0, 5, 17, len(data) - 1):
            with pytest.raises(CodecError):
                parse_header(data[:n])

    def test_inconsistent_grid(self):
        h = BitstreamHeader(0, 600, 100, 1, 1, ((1, 1),))
        with pytest.raises(CodecError):
            parse_header(serialize_header(h))
        with pytest.raises(CodecError):
            serialize_header(BitstreamHeader(0, 600, 100, 2, 1, ((1, 1),)))


class TestRoundtrip:
    def test_small_image(self, codec):
        img = random_image(4, 37, 53)
        data, enc_lat = encode_image(img, 20, codec, return_latents=True)
        out, dec_lat = decode_image(data, codec, return_latents=True)
        assert out.shape == img.shape and out.dtype == np.uint8
        np.testing.assert_array_equal(enc_lat[0].y_hat, dec_lat[0]["y_hat"])
        np.testing.assert_array_equal(enc_lat[0].z_hat, dec_lat[0]["z_hat"])
        np.testing.assert_array_equal(enc_lat[0].y_tilde, dec_lat[0]["y_tilde"])

    def test_multi_tile_pipelined_equals_sequential(self, codec):
        img = random_image(5, 120, 1020)
        data = encode_image(img, 55, codec)
        a = decode_image(data, codec, pipelined=True)
        b = decode_image(data, codec, pipelined=False)
        assert a.shape == img.shape
        np.testing.assert_array_equal(a, b)
        assert parse_header(data)[0].cols == 3

    def test_encode_is_deterministic(self, codec):
        img = random_image(6, 40, 40)
        assert encode_image(img, 7, codec) == encode_image(img, 7, codec)

    def test_rate_estimate_close(self, codec):
        img = random_image(7, 64, 64)
        data, lat = encode_image(img, 40, codec, return_latents=True)
        h, n = parse_header(data)
        est = estimate_tile_bits(codec, lat[0]) / 8
        actual = h.payload_size
        assert abs(actual - est) <= 0.01 * est + 64

    def test_truncated_stream_names_tile(self, codec):
        data = encode_image(random_image(8, 30, 600), 3, codec)
        with pytest.raises(CodecError, match="tile 1"):
            decode_image(data[:-5], codec)

    def test_trailing_bytes(self, codec):
        data = encode_image(random_image(9, 8, 8), 3, codec)
        with pytest.raises(CodecError, match="trailing"):
            decode_image(data + b"\0", codec)

    def test_rejects_bad_inputs(self, codec):
        with pytest.raises(CodecError):
            encode_image(np.zeros((8, 8, 3), dtype=np.float32), 0, codec)
        with pytest.raises(CodecError):
            encode_image(np.zeros((8, 8), dtype=np.uint8), 0, codec)
        with pytest.raises(ValueError):
            encode_image(np.zeros((8, 8, 3), dtype=np.uint8), 71, codec)

    def test_higher_level_changes_stream(self, codec):
        img = random_image(10, 32, 32)
        assert encode_image(img, 0, codec) != encode_image(img, 70, codec)


class TestPersistence:
    def test_save_load_same_bitstream(self, codec, tmp_path):
        p = tmp_path / "w.pico"
        codec.save(p)
        other = Codec.load(p)
        img = random_image(11, 24, 31)
        data = encode_image(img, 33, codec)
        assert encode_image(img, 33, other) == data
        np.testing.assert_array_equal(decode_image(data, other), decode_image(data, codec))

    def test_bytes_roundtrip_stable(self, codec):
        blob = codec.to_bytes()
        assert Codec.from_bytes(blob).to_bytes() == blob

    def test_synthetic_is_reproducible(self, codec):
        assert Codec.synthetic(3, "tiny").to_bytes() == codec.to_bytes()

    def test_schedule_kept(self):
        c = Codec.synthetic(0, "tiny", "checkerboard")
        assert Codec.from_bytes(c.to_bytes()).schedule == "checkerboard"

    def test_bad_preset(self):
        with pytest.raises(ValueError):
            Codec.synthetic(0, "huge")
