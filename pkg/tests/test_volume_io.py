import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from jbfnet.volume_io import (
    CheckpointError,
    NonFiniteDataError,
    TruncatedPayloadError,
    Volume,
    VolumeFormatError,
    export_png_slice,
    load_checkpoint,
    read_volume,
    save_checkpoint,
    write_volume,
)


def make_ramp(nx, ny, nz):
    data = np.arange(nx * ny * nz, dtype=np.float32).reshape(nz, ny, nx)
    return Volume(nx=nx, ny=ny, nz=nz, spacing=(0.7, 0.7, 2.5), data=data)


class TestVolumeRoundTrip:
    def test_ramp_round_trip_identical_bits(self, tmp_path):
        vol = make_ramp(4, 4, 16)
        p = tmp_path / "ramp.jbfvol"
        write_volume(vol, p)
        back = read_volume(p)
        assert back.data.tobytes() == vol.data.tobytes()
        assert (back.nx, back.ny, back.nz) == (4, 4, 16)
        assert back.spacing == vol.spacing

    def test_truncated_payload_rejected(self, tmp_path):
        p = tmp_path / "trunc.jbfvol"
        header = "jbfvol 1\ndims 2 2 2\nspacing 1.0 1.0 1.0\ndtype f32\n\n"
        with open(p, "wb") as f:
            f.write(header.encode())
            f.write(np.zeros(7, dtype="<f4").tobytes())
        with pytest.raises(TruncatedPayloadError):
            read_volume(p)

    def test_nan_rejected_on_read(self, tmp_path):
        p = tmp_path / "nan.jbfvol"
        header = "jbfvol 1\ndims 2 2 2\nspacing 1.0 1.0 1.0\ndtype f32\n\n"
        payload = np.zeros(8, dtype="<f4")
        payload[3] = np.nan
        with open(p, "wb") as f:
            f.write(header.encode())
            f.write(payload.tobytes())
        with pytest.raises(NonFiniteDataError):
            read_volume(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.jbfvol"
        with open(p, "wb") as f:
            f.write(b"notavolume\nxxxx\nyyyy\nzzzz\n\n")
        with pytest.raises(VolumeFormatError):
            read_volume(p)

    def test_nan_rejected_on_write(self, tmp_path):
        vol = make_ramp(3, 3, 3)
        vol.data[0, 0, 0] = np.inf
        with pytest.raises(NonFiniteDataError):
            write_volume(vol, tmp_path / "x.jbfvol")

    @settings(max_examples=25, deadline=None)
    @given(
        nx=st.integers(1, 9),
        ny=st.integers(1, 9),
        nz=st.integers(1, 9),
        seed=st.integers(0, 2**31),
    )
    def test_round_trip_property(self, nx, ny, nz, seed):
        import tempfile

        rng = np.random.default_rng(seed)
        data = rng.normal(scale=1000, size=(nz, ny, nx)).astype(np.float32)
        vol = Volume(nx=nx, ny=ny, nz=nz, data=data)
        with tempfile.TemporaryDirectory() as td:
            p = f"{td}/v.jbfvol"
            write_volume(vol, p)
            back = read_volume(p)
        assert back.data.tobytes() == vol.data.tobytes()


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {
            "prior.conv1.w": rng.normal(size=(32, 1, 3, 3, 3)).astype(np.float32),
            "prior.conv1.b": rng.normal(size=32).astype(np.float32),
            "block1.f.l1.w": rng.normal(size=(1, 1, 3, 3, 3)).astype(np.float32),
        }
        meta = {"epoch": "3", "ablation": "none", "range_mode": "response"}
        p = tmp_path / "ckpt.jbfn"
        save_checkpoint(p, tensors, meta)
        back, meta2 = load_checkpoint(p)
        assert list(back) == list(tensors)
        for name in tensors:
            assert back[name].tobytes() == tensors[name].tobytes()
            assert back[name].shape == tensors[name].shape
        assert meta2 == meta

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.jbfn"
        p.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(CheckpointError):
            load_checkpoint(p)

    def test_version_mismatch(self, tmp_path):
        import struct

        p = tmp_path / "v9.jbfn"
        p.write_bytes(b"JBFN" + struct.pack("<I", 9) + struct.pack("<I", 0))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(p)

    def test_round_trip_bitexact_property(self, tmp_path):
        rng = np.random.default_rng(7)
        for trial in range(10):
            tensors = {
                f"t{j}": rng.normal(size=tuple(rng.integers(1, 5, size=rng.integers(1, 4)))).astype(np.float32)
                for j in range(int(rng.integers(1, 6)))
            }
            p = tmp_path / f"c{trial}.jbfn"
            save_checkpoint(p, tensors, {"k": str(trial)})
            back, _ = load_checkpoint(p)
            for name in tensors:
                assert back[name].tobytes() == tensors[name].tobytes()


class TestPngExport:
    def test_window_endpoints(self, tmp_path):
        data = np.zeros((1, 2, 3), dtype=np.float32)
        data[0, 0] = [-800.0, 200.0, 1200.0]
        data[0, 1] = [-2000.0, 5000.0, 199.99]
        vol = Volume(nx=3, ny=2, nz=1, data=data)
        p = tmp_path / "s.png"
        export_png_slice(vol, 0, p, window=(-800, 1200))
        px = np.asarray(Image.open(p))
        assert px.dtype == np.uint8
        assert px[0, 0] == 0  # lo -> 0
        assert px[0, 2] == 255  # hi -> 255
        assert px[0, 1] == 127  # midpoint floors to 127
        assert px[1, 0] == 0  # below lo clamps
        assert px[1, 1] == 255  # above hi clamps

    def test_bad_window(self, tmp_path):
        vol = make_ramp(3, 3, 3)
        with pytest.raises(ValueError):
            export_png_slice(vol, 0, tmp_path / "x.png", window=(5, 5))

    def test_bad_slice_index(self, tmp_path):
        vol = make_ramp(3, 3, 3)
        with pytest.raises(ValueError):
            export_png_slice(vol, 7, tmp_path / "x.png")
