import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rsic import bitstream as bs
from rsic import weight_map as wm


def make_container(dims=(512, 512), levels=8, caption="a red circle",
                   streams=(b"\x01\x02", b"", b"abc", b"\xff" * 5),
                   model_hash=b"\x11" * 8):
    rows, cols = wm.grid_shape(dims)
    grid = np.arange(rows * cols).reshape(rows, cols) % levels
    m = wm.WeightMap(grid.astype(np.int64), levels, dims)
    return bs.RsicContainer(dims, levels, model_hash, caption, m.pack(), tuple(streams))


class TestDescription:
    def test_roundtrip(self):
        for text in ("", "a cat sat on the mat", "naïve café — ünïcode ⚙"):
            assert bs.decompress_description(bs.compress_description(text)) == text

    def test_empty_is_tiny(self):
        assert len(bs.compress_description("")) <= 16

    def test_oversize_rejected(self):
        with pytest.raises(bs.ContainerError):
            bs.compress_description("x" * 1025)

    def test_truncated_rejected(self):
        data = bs.compress_description("a long enough caption to truncate")
        with pytest.raises(bs.ContainerError):
            bs.decompress_description(data[:-1])

    def test_typical_caption_sizes(self):
        # 50 captions of ~120 characters: each compresses into [40, 150]
        # bytes, the same order of magnitude as a ~60-byte text budget.
        subjects = ["lighthouse", "traffic sign", "wooden bridge", "red barn",
                    "fishing boat", "stone tower", "vintage car", "street lamp",
                    "mountain hut", "garden gate"]
        scenes = ["on a rocky coast with breaking waves under a cloudy sky",
                  "beside a quiet country road in the early morning fog",
                  "near the harbor entrance at sunset with warm orange light",
                  "surrounded by tall pine trees after a fresh snowfall",
                  "in the middle of a busy market square full of people"]
        sizes = []
        for i in range(50):
            caption = (f"a detailed color photograph of a {subjects[i % 10]} "
                       f"{scenes[i % 5]}, taken from a distance, frame {i:02d}")
            assert 100 <= len(caption) <= 140
            size = len(bs.compress_description(caption))
            assert 40 <= size <= 150
            sizes.append(size)
        assert 40 <= sorted(sizes)[len(sizes) // 2] <= 120


class TestHeader:
    def test_fixed_header_is_22_bytes(self):
        c = make_container()
        data = bs.serialize(c)
        assert bs.HEADER_SIZE == 22
        assert data[:4] == b"RSIC"
        assert data[4] == 1
        assert int.from_bytes(data[5:9], "big") == 512
        assert int.from_bytes(data[9:13], "big") == 512
        assert data[13] == 8
        assert data[14:22] == b"\x11" * 8

    def test_total_length_identity(self):
        c = make_container()
        sizes = c.section_sizes()
        assert sum(sizes.values()) == len(bs.serialize(c))


class TestRoundTrip:
    def test_simple(self):
        c = make_container()
        assert bs.unpack_container(bs.serialize(c)) == c

    @given(st.data())
    @settings(max_examples=80, deadline=None)
    def test_random_containers(self, data):
        bh = data.draw(st.integers(1, 8))
        bw = data.draw(st.integers(1, 8))
        dims = (64 * bh, 64 * bw)
        levels = data.draw(st.integers(1, 8))
        rows, cols = wm.grid_shape(dims)
        grid = np.array(data.draw(st.lists(st.integers(0, levels - 1),
                                           min_size=rows * cols, max_size=rows * cols)))
        m = wm.WeightMap(grid.reshape(rows, cols).astype(np.int64), levels, dims)
        caption = data.draw(st.text(max_size=120))
        streams = tuple(data.draw(st.binary(max_size=64)) for _ in range(4))
        mh = data.draw(st.binary(min_size=8, max_size=8))
        c = bs.RsicContainer(dims, levels, mh, caption, m.pack(), streams)
        assert bs.unpack_container(bs.serialize(c)) == c

    def test_weight_map_recoverable(self):
        c = make_container(levels=5)
        m = bs.unpack_container(bs.serialize(c)).weight_map()
        assert m.levels == 5 and m.image_dims == (512, 512)


class TestParseErrors:
    def test_bad_magic_names_field(self):
        data = bytearray(bs.serialize(make_container()))
        data[0] ^= 0xFF
        with pytest.raises(bs.ContainerError, match="magic"):
            bs.unpack_container(bytes(data))

    def test_bad_version_names_field(self):
        data = bytearray(bs.serialize(make_container()))
        data[4] = 99
        with pytest.raises(bs.ContainerError, match="version"):
            bs.unpack_container(bytes(data))

    def test_bad_levels_names_field(self):
        data = bytearray(bs.serialize(make_container()))
        data[13] = 0xFF
        with pytest.raises(bs.ContainerError, match="levels"):
            bs.unpack_container(bytes(data))

    def test_zero_dims_rejected(self):
        data = bytearray(bs.serialize(make_container()))
        data[5:9] = (0).to_bytes(4, "big")
        with pytest.raises(bs.ContainerError, match="image_dims"):
            bs.unpack_container(bytes(data))

    def test_dim_tamper_breaks_length_accounting(self):
        data = bytearray(bs.serialize(make_container()))
        data[5:9] = (64 * 100).to_bytes(4, "big")  # claims a much larger map
        with pytest.raises(bs.ContainerError):
            bs.unpack_container(bytes(data))

    def test_truncation_names_section(self):
        data = bs.serialize(make_container())
        with pytest.raises(bs.ContainerError, match="scale3"):
            bs.unpack_container(data[:-1])

    def test_trailing_bytes_rejected(self):
        data = bs.serialize(make_container())
        with pytest.raises(bs.ContainerError, match="trailing"):
            bs.unpack_container(data + b"\x00")

    def test_hash_flip_is_surfaced_not_fatal(self):
        data = bytearray(bs.serialize(make_container()))
        data[14] ^= 0xFF
        c = bs.unpack_container(bytes(data))
        assert c.model_hash != b"\x11" * 8  # caller sees the mismatch


class TestTotalBpp:
    def test_map_section_contribution(self):
        c = make_container((512, 512), 8)
        _, breakdown = bs.total_bpp(c)
        assert breakdown["map"] == pytest.approx(24 * 8 / 262144)
        assert breakdown["map"] == pytest.approx(0.000732, abs=1e-6)

    def test_breakdown_sums_to_total(self):
        c = make_container(caption="some caption text")
        total, breakdown = bs.total_bpp(c)
        assert sum(breakdown.values()) == pytest.approx(total, abs=1e-15)

    def test_degenerate_container_is_header_floor(self):
        c = make_container((512, 512), 1, caption="", streams=(b"",) * 4)
        total, breakdown = bs.total_bpp(c)
        # header + empty description (2 + 2) + zero map + four length prefixes
        floor_bytes = 22 + 2 + len(bs.compress_description("")) + 0 + 16
        assert total == pytest.approx(8 * floor_bytes / 262144)
        assert breakdown["map"] == 0.0
