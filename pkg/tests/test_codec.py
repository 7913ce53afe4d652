import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from vidfuse import codec
from vidfuse.errors import ConfigError, FrameIOError, ShapeError, TensorFormatError


def frames_of(shape, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=shape, dtype=np.uint8)


class TestEncodeDecode:
    def test_latent_shape(self):
        latent = codec.encode_video(frames_of((8, 32, 32, 3)))
        assert latent.shape == (8, 12, 16, 16)
        assert latent.dtype == torch.float32

    def test_round_trip_bit_exact_all_values(self):
        # every 8-bit value survives encode/decode exactly
        ramp = np.arange(256, dtype=np.uint8).reshape(1, 16, 16, 1).repeat(3, axis=-1)
        ramp = np.repeat(ramp, 2, axis=1)[:, :16]
        assert np.array_equal(codec.decode_video(codec.encode_video(ramp)), ramp)

    def test_round_trip_random(self):
        frames = frames_of((4, 16, 16, 3), seed=5)
        assert np.array_equal(codec.decode_video(codec.encode_video(frames)), frames)

    def test_solid_color_constant_channel_groups(self):
        frames = np.zeros((1, 8, 8, 3), dtype=np.uint8)
        frames[..., 0] = 200
        frames[..., 2] = 30
        latent = codec.encode_video(frames)
        for c in range(12):
            channel = latent[0, c]
            assert float(channel.max()) == float(channel.min())

    def test_indivisible_dimensions_rejected(self):
        with pytest.raises(ConfigError, match="space-to-depth"):
            codec.encode_video(frames_of((1, 15, 16, 3)))

    def test_out_of_range_latent_clamps(self):
        latent = torch.full((1, 12, 2, 2), 5.0)
        assert (codec.decode_video(latent) == 255).all()
        assert (codec.decode_video(-latent) == 0).all()

    def test_requantization_bound(self):
        # a float latent not produced by encode loses at most one 8-bit half-step
        g = torch.Generator().manual_seed(9)
        latent = torch.rand(2, 12, 4, 4, generator=g) * 2 - 1
        again = codec.encode_video(codec.decode_video(latent))
        assert float((again - latent).abs().max()) <= 1.0 / 255.0 + 1e-6


class TestFrameFiles:
    def test_write_read_round_trip(self, tmp_path):
        frames = frames_of((3, 8, 6, 3), seed=2)
        codec.write_frames(tmp_path / "clip", frames)
        names = sorted(p.name for p in (tmp_path / "clip").iterdir())
        assert names == ["frame_0000.ppm", "frame_0001.ppm", "frame_0002.ppm"]
        assert np.array_equal(codec.read_frames(tmp_path / "clip"), frames)

    def test_gap_in_numbering(self, tmp_path):
        frames = frames_of((3, 4, 4, 3))
        codec.write_frames(tmp_path / "clip", frames)
        (tmp_path / "clip" / "frame_0001.ppm").unlink()
        with pytest.raises(FrameIOError, match="missing frame index 1"):
            codec.read_frames(tmp_path / "clip")

    def test_mixed_dimensions(self, tmp_path):
        codec.write_frames(tmp_path / "clip", frames_of((1, 4, 4, 3)))
        header = b"P6\n6 4\n255\n" + bytes(6 * 4 * 3)
        (tmp_path / "clip" / "frame_0001.ppm").write_bytes(header)
        with pytest.raises(FrameIOError, match="mixed frame dimensions"):
            codec.read_frames(tmp_path / "clip")

    def test_malformed_header(self, tmp_path):
        clip = tmp_path / "clip"
        clip.mkdir()
        (clip / "frame_0000.ppm").write_bytes(b"P5\n4 4\n255\n" + bytes(16))
        with pytest.raises(TensorFormatError, match="byte 0"):
            codec.read_frames(clip)


class TestTensorFiles:
    def test_round_trip_fp32(self, tmp_path):
        t = torch.randn(2, 3, 4, 5)
        codec.write_tensor(tmp_path / "t.vt", t)
        assert torch.equal(codec.read_tensor(tmp_path / "t.vt"), t)

    def test_round_trip_fp16(self, tmp_path):
        t = torch.randn(3, 7).half()
        codec.write_tensor(tmp_path / "t.vt", t)
        back = codec.read_tensor(tmp_path / "t.vt")
        assert back.dtype == torch.float16
        assert torch.equal(back, t)

    def test_rank4_header_is_22_bytes(self, tmp_path):
        t = torch.zeros(1, 2, 3, 4)
        codec.write_tensor(tmp_path / "t.vt", t)
        data = (tmp_path / "t.vt").read_bytes()
        assert len(data) == 22 + t.numel() * 4
        assert data[:4] == b"VT01"
        assert data[4] == 0 and data[5] == 4

    def test_dims_little_endian(self, tmp_path):
        codec.write_tensor(tmp_path / "t.vt", torch.zeros(258))
        data = (tmp_path / "t.vt").read_bytes()
        assert data[6:10] == (258).to_bytes(4, "little")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "t.vt").write_bytes(b"XX01" + bytes(20))
        with pytest.raises(TensorFormatError, match="bad magic"):
            codec.read_tensor(tmp_path / "t.vt")

    def test_truncated_payload_reports_lengths(self, tmp_path):
        t = torch.zeros(2, 2)
        codec.write_tensor(tmp_path / "t.vt", t)
        data = (tmp_path / "t.vt").read_bytes()
        (tmp_path / "t.vt").write_bytes(data[:-3])
        with pytest.raises(TensorFormatError, match="expected 16 payload bytes at offset 14, got 13"):
            codec.read_tensor(tmp_path / "t.vt")


class TestGraymap:
    def test_round_trip(self, tmp_path):
        g = np.arange(24, dtype=np.uint8).reshape(4, 6)
        codec.write_graymap(tmp_path / "m.pgm", g)
        assert np.array_equal(codec.read_graymap(tmp_path / "m.pgm"), g)

    def test_rejects_non_2d(self, tmp_path):
        with pytest.raises(ShapeError):
            codec.write_graymap(tmp_path / "m.pgm", np.zeros((2, 2, 2), dtype=np.uint8))


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 3),
    h=st.integers(1, 8),
    w=st.integers(1, 8),
    seed=st.integers(0, 1000),
)
def test_frame_files_round_trip_property(tmp_path_factory, n, h, w, seed):
    frames = frames_of((n, 2 * h, 2 * w, 3), seed=seed)
    target = tmp_path_factory.mktemp("frames")
    codec.write_frames(target, frames)
    assert np.array_equal(codec.read_frames(target), frames)
    assert np.array_equal(codec.decode_video(codec.encode_video(frames)), frames)
