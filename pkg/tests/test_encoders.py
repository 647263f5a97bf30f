import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gncaf.encoders import (
    NotAFeatureArchive,
    PatchEncoder,
    PatchEncoderConfig,
    TruncatedArchive,
    UnsupportedArchiveVersion,
    encode_patches,
    load_feature_archive,
    patches_to_tensor,
    write_feature_archive,
)

CFG = PatchEncoderConfig("trainable_cnn", 64, False)


def _patches(n, p=16, seed=0):
    return np.random.default_rng(seed).integers(0, 256, (n, p, p, 3), dtype=np.uint8)


def test_shape_and_identical_rows():
    torch.manual_seed(0)
    enc = PatchEncoder(64)
    x = _patches(5)
    x[3] = x[1]
    out = encode_patches(x, CFG, enc)
    assert out.shape == (5, 64)
    torch.testing.assert_close(out[1], out[3], rtol=0, atol=0)


def test_zero_parameters_give_zero_features():
    enc = PatchEncoder(64)
    with torch.no_grad():
        for p in enc.parameters():
            p.zero_()
    assert torch.count_nonzero(encode_patches(_patches(4), CFG, enc)) == 0


def test_permutation_equivariance():
    torch.manual_seed(1)
    enc = PatchEncoder(16)
    cfg = PatchEncoderConfig("trainable_cnn", 16, False)
    x = _patches(6, seed=2)
    perm = np.random.default_rng(3).permutation(6)
    a = encode_patches(x, cfg, enc)
    b = encode_patches(x[perm], cfg, enc)
    torch.testing.assert_close(a[perm], b)


def test_mismatched_patch_sizes():
    with pytest.raises(ValueError, match="mismatch"):
        patches_to_tensor([np.zeros((8, 8, 3), np.uint8), np.zeros((16, 16, 3), np.uint8)])


def test_frozen_archive_cannot_train():
    with pytest.raises(ValueError):
        PatchEncoderConfig("frozen_archive", 8, True)
    with pytest.raises(ValueError):
        PatchEncoderConfig("imagenet", 8, False)


def test_calibration_standardizes_features():
    torch.manual_seed(0)
    enc = PatchEncoder(32)
    x = patches_to_tensor(_patches(64, seed=5))
    enc.calibrate_(x)
    with torch.no_grad():
        f = enc(x)
    torch.testing.assert_close(f.mean(0), torch.zeros(32), atol=1e-4, rtol=0)
    torch.testing.assert_close(f.std(0), torch.ones(32), atol=1e-3, rtol=0)


def test_trainable_mode_keeps_graph():
    enc = PatchEncoder(8)
    out = encode_patches(_patches(2), PatchEncoderConfig("trainable_cnn", 8, True), enc)
    assert out.requires_grad


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 12), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_archive_round_trip_bit_exact(tmp_path_factory, n, d, seed):
    rng = np.random.default_rng(seed)
    feats = rng.standard_normal((n, d)).astype(np.float32)
    coords = rng.integers(0, 1000, (n, 2))
    path = tmp_path_factory.mktemp("arch") / "f.gncf"
    write_feature_archive(path, feats, coords, (1000, 1000))
    back, c, shape = load_feature_archive(path)
    assert back.tobytes() == feats.tobytes()
    np.testing.assert_array_equal(c, coords)
    assert shape == (1000, 1000)


def test_archive_layout(tmp_path):
    feats = np.arange(6, dtype=np.float32).reshape(3, 2)
    coords = [[0, 1], [2, 3], [4, 5]]
    write_feature_archive(tmp_path / "a", feats, coords, (7, 9))
    raw = (tmp_path / "a").read_bytes()
    assert raw[:4] == b"GNCF"
    assert struct.unpack_from("<IIIII", raw, 4) == (1, 3, 2, 7, 9)
    assert list(struct.unpack_from("<6I", raw, 24)) == [0, 1, 2, 3, 4, 5]
    assert list(struct.unpack_from("<6f", raw, 48)) == [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]
    assert len(raw) == 48 + 24


def test_archive_errors(tmp_path):
    write_feature_archive(tmp_path / "ok", np.ones((4, 3), np.float32), np.zeros((4, 2)))
    raw = (tmp_path / "ok").read_bytes()
    (tmp_path / "trunc").write_bytes(raw[:-5])
    with pytest.raises(TruncatedArchive, match="truncated archive"):
        load_feature_archive(tmp_path / "trunc")
    (tmp_path / "short").write_bytes(raw[:10])
    with pytest.raises(TruncatedArchive):
        load_feature_archive(tmp_path / "short")
    (tmp_path / "magic").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(NotAFeatureArchive, match="not a feature archive"):
        load_feature_archive(tmp_path / "magic")
    (tmp_path / "empty").write_bytes(b"")
    with pytest.raises(NotAFeatureArchive):
        load_feature_archive(tmp_path / "empty")
    (tmp_path / "ver").write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(UnsupportedArchiveVersion):
        load_feature_archive(tmp_path / "ver")
    codes = {NotAFeatureArchive.code, TruncatedArchive.code, UnsupportedArchiveVersion.code}
    assert len(codes) == 3


def test_archive_rejects_non_finite(tmp_path):
    bad = np.ones((2, 2), np.float32)
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        write_feature_archive(tmp_path / "x", bad, np.zeros((2, 2)))
