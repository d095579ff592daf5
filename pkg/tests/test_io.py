import os
import struct

import numpy as np
import pytest

from patchdiff.io import (
    CONFIG_DEFAULTS,
    FormatError,
    PRESETS,
    format_config,
    load_checkpoint,
    load_config,
    load_sinogram,
    load_volume,
    parse_config,
    save_checkpoint,
    save_sinogram,
    save_volume,
)
from patchdiff.io import _atomic_write


def test_volume_roundtrip_is_bitwise(tmp_path):
    v = np.random.default_rng(0).standard_normal((3, 4, 5)).astype(np.float32)
    path = tmp_path / "v.pdv"
    save_volume(path, v)
    out = load_volume(path)
    assert out.dtype == np.float32
    np.testing.assert_array_equal(out, v)
    assert out.tobytes() == v.tobytes()


def test_volume_file_layout_is_x_fastest(tmp_path):
    # Hand-build the file bytes to pin the on-disk layout independent of the writer.
    payload = np.arange(12, dtype="<f4")  # nx=3, ny=2, nz=2
    raw = b"PDV1" + struct.pack("<4I", 3, 2, 2, 0) + payload.tobytes()
    path = tmp_path / "hand.pdv"
    path.write_bytes(raw)
    v = load_volume(path)
    assert v.shape == (2, 2, 3)
    assert v[0, 0, 1] == 1.0  # stepping x moves one payload slot
    assert v[0, 1, 0] == 3.0  # stepping y moves nx slots
    assert v[1, 0, 0] == 6.0  # stepping z moves nx*ny slots
    # And the writer produces those exact bytes back.
    save_volume(tmp_path / "w.pdv", v)
    assert (tmp_path / "w.pdv").read_bytes() == raw


def test_volume_rejects_malformed(tmp_path):
    good = np.zeros((2, 2, 2), dtype=np.float32)
    path = tmp_path / "v.pdv"
    save_volume(path, good)
    raw = path.read_bytes()

    bad_magic = tmp_path / "m.pdv"
    bad_magic.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        load_volume(bad_magic)

    truncated = tmp_path / "t.pdv"
    truncated.write_bytes(raw[:-5])
    with pytest.raises(FormatError):
        load_volume(truncated)

    trailing = tmp_path / "x.pdv"
    trailing.write_bytes(raw + b"\x00")
    with pytest.raises(FormatError):
        load_volume(trailing)

    bad_dtype = tmp_path / "d.pdv"
    bad_dtype.write_bytes(raw[:16] + struct.pack("<I", 9) + raw[20:])
    with pytest.raises(FormatError):
        load_volume(bad_dtype)

    zero_dim = tmp_path / "z.pdv"
    zero_dim.write_bytes(b"PDV1" + struct.pack("<4I", 0, 2, 2, 0))
    with pytest.raises(FormatError):
        load_volume(zero_dim)

    with pytest.raises(ValueError):
        save_volume(tmp_path / "bad.pdv", np.zeros((2, 2)))


def test_huge_header_fails_before_reading_payload(tmp_path):
    # A 4 GiB dim claim must be rejected from the header alone; the payload
    # is absent, so surviving validation would mean an attempted giant read.
    path = tmp_path / "huge.pdv"
    path.write_bytes(b"PDV1" + struct.pack("<4I", 1 << 30, 1 << 30, 1 << 30, 0))
    with pytest.raises(FormatError):
        load_volume(path)


def test_sinogram_roundtrip(tmp_path):
    s = np.random.default_rng(1).standard_normal((2, 5, 7)).astype(np.float32)
    angles = np.arange(5) * np.pi / 5
    path = tmp_path / "s.pds"
    save_sinogram(path, s, angles)
    out, out_angles = load_sinogram(path)
    np.testing.assert_array_equal(out, s)
    assert out_angles.dtype == np.float64
    np.testing.assert_array_equal(out_angles, angles.astype(np.float32).astype(np.float64))
    with pytest.raises(ValueError):
        save_sinogram(path, s, np.zeros(4))
    with pytest.raises(FormatError):
        load_volume(path)  # wrong magic for a volume read


def test_checkpoint_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(2)
    raw = {"conv0.w": rng.standard_normal((2, 3)).astype(np.float32), "b": np.array([1.5], np.float32)}
    ema = {"conv0.w": rng.standard_normal((2, 3)).astype(np.float32)}
    echo = "patch_size = 8\nstep = 12\n"
    path = tmp_path / "c.pdck"
    save_checkpoint(path, echo, raw, ema)
    echo2, raw2, ema2 = load_checkpoint(path)
    assert echo2 == echo
    assert set(raw2) == set(raw)
    np.testing.assert_array_equal(raw2["conv0.w"], raw["conv0.w"])
    assert raw2["b"].shape == (1,)
    assert raw2["b"][0] == np.float32(1.5)
    np.testing.assert_array_equal(ema2["conv0.w"], ema["conv0.w"])
    # Two saves of the same content are byte-identical (sorted tensor order).
    save_checkpoint(tmp_path / "c2.pdck", echo, dict(reversed(list(raw.items()))), ema)
    assert (tmp_path / "c.pdck").read_bytes() == (tmp_path / "c2.pdck").read_bytes()


def test_checkpoint_rejects_malformed(tmp_path):
    path = tmp_path / "c.pdck"
    save_checkpoint(path, "a = 1\n", {"t": np.zeros(2, np.float32)}, {})
    raw = path.read_bytes()

    wrong_version = tmp_path / "v.pdck"
    wrong_version.write_bytes(raw[:4] + struct.pack("<I", 99) + raw[8:])
    with pytest.raises(FormatError):
        load_checkpoint(wrong_version)

    silly_count = tmp_path / "n.pdck"
    silly_count.write_bytes(b"PDCK" + struct.pack("<I", 1) + struct.pack("<I", 0) + struct.pack("<I", 1 << 20))
    with pytest.raises(FormatError):
        load_checkpoint(silly_count)

    trailing = tmp_path / "t.pdck"
    trailing.write_bytes(raw + b"z")
    with pytest.raises(FormatError):
        load_checkpoint(trailing)


def test_atomic_write_leaves_nothing_on_failure(tmp_path):
    target = tmp_path / "out.bin"

    def exploding_body(f):
        f.write(b"partial")
        raise RuntimeError("boom")

    with pytest.raises(RuntimeError):
        _atomic_write(target, exploding_body)
    assert not target.exists()
    assert os.listdir(tmp_path) == []  # no orphaned temp file either


def test_atomic_write_replaces_existing(tmp_path):
    target = tmp_path / "out.bin"
    target.write_bytes(b"old")
    _atomic_write(target, lambda f: f.write(b"new"))
    assert target.read_bytes() == b"new"


def test_parse_config_types_comments_and_errors():
    text = """
    # comment line
    patch_size = 4   # trailing comment
    eta = 0.25
    sigma_rule = standard

    K=3
    """
    cfg = parse_config(text)
    assert cfg == {"patch_size": 4, "eta": 0.25, "sigma_rule": "standard", "K": 3}
    with pytest.raises(ValueError, match="line 1"):
        parse_config("mystery = 1")
    with pytest.raises(ValueError, match="line 2"):
        parse_config("patch_size = 4\nnot a pair")
    with pytest.raises(ValueError, match="patch_size"):
        parse_config("patch_size = soon")


def test_parse_config_extras_and_bools():
    extra = {"zero_context": False, "step": int}
    cfg = parse_config("zero_context = true\nstep = 9", extra=extra)
    assert cfg == {"zero_context": True, "step": 9}
    assert parse_config("zero_context = False", extra=extra)["zero_context"] is False
    with pytest.raises(ValueError):
        parse_config("step = 9")  # extras are not globally known


def test_format_config_roundtrips_and_orders():
    cfg = {"seed": 3, "patch_size": 16, "custom_key": "x"}
    text = format_config(cfg)
    lines = text.strip().splitlines()
    assert lines[0] == "patch_size = 16"  # CONFIG_DEFAULTS order first
    assert lines[-1] == "custom_key = x"
    rt = parse_config(text, extra={"custom_key": ""})
    assert rt["seed"] == 3 and rt["patch_size"] == 16 and rt["custom_key"] == "x"


def test_full_defaults_roundtrip():
    text = format_config(CONFIG_DEFAULTS)
    assert parse_config(text) == CONFIG_DEFAULTS


def test_load_config(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("views = 20\nnoise_sigma = 0.5\n")
    assert load_config(path) == {"views": 20, "noise_sigma": 0.5}


def test_presets_are_documentation_only():
    assert "fullscale-unet" in PRESETS
    assert PRESETS["fullscale-unet"]["patch_size"] == 32
