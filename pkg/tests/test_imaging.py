import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from glandseg.imaging import (
    CorruptImageError,
    ImageFormatError,
    downsample_half,
    fmap_bytes,
    load_image,
    read_fmap,
    save_image,
    upsample_bilinear,
    write_fmap,
)


def test_gray_png_roundtrip_is_bit_exact(tmp_path):
    img = np.array([[0, 255], [128, 64]], dtype=np.uint8)
    save_image(img, tmp_path / "a.png")
    back = load_image(tmp_path / "a.png")
    assert back.dtype == np.uint8 and back.shape == (2, 2)
    assert back.ravel().tolist() == [0, 255, 128, 64]


def test_rgb_png_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    save_image(img, tmp_path / "c.png")
    np.testing.assert_array_equal(load_image(tmp_path / "c.png"), img)


def test_fmap_header_and_sample_order(tmp_path):
    arr = np.arange(6, dtype=np.float32).reshape(1, 3, 2)  # h=1, w=3, c=2
    write_fmap(arr, tmp_path / "m.fmap")
    raw = (tmp_path / "m.fmap").read_bytes()
    assert raw[:4] == b"FMAP"
    assert np.frombuffer(raw[4:16], "<u4").tolist() == [3, 1, 2]
    assert np.frombuffer(raw[16:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]
    np.testing.assert_array_equal(load_image(tmp_path / "m.fmap"), arr)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=3, max_dims=3, max_side=6),
                  elements=st.floats(width=32, allow_nan=False)))
def test_fmap_roundtrip_any_array(arr):
    from glandseg.imaging import fmap_from_bytes
    back, used = fmap_from_bytes(fmap_bytes(arr))
    assert used == 16 + 4 * arr.size
    np.testing.assert_array_equal(back.reshape(arr.shape), arr)


def test_probability_map_roundtrip_exact(tmp_path):
    p = np.random.default_rng(1).random((16, 16)).astype(np.float32)
    save_image(p, tmp_path / "p.fmap")
    assert np.max(np.abs(load_image(tmp_path / "p.fmap") - p)) == 0


def test_truncated_fmap_is_corrupt(tmp_path):
    raw = fmap_bytes(np.ones((2, 2), np.float32))
    (tmp_path / "t.fmap").write_bytes(raw[:-3])
    with pytest.raises(CorruptImageError):
        load_image(tmp_path / "t.fmap")


def test_trailing_bytes_are_corrupt(tmp_path):
    (tmp_path / "t.fmap").write_bytes(fmap_bytes(np.ones((2, 2), np.float32)) + b"x")
    with pytest.raises(CorruptImageError):
        read_fmap(tmp_path / "t.fmap")


def test_load_errors_are_distinct(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_image(tmp_path / "missing.png")
    (tmp_path / "x.bin").write_bytes(b"GIF89a....")
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "x.bin")
    (tmp_path / "bad.png").write_bytes(b"\x89PNG\r\n\x1a\n" + b"\0" * 20)
    with pytest.raises(CorruptImageError):
        load_image(tmp_path / "bad.png")


def test_save_into_missing_directory_fails(tmp_path):
    with pytest.raises(FileNotFoundError):
        save_image(np.zeros((2, 2), np.uint8), tmp_path / "nope" / "a.png")


def test_png_rejects_non_integer_samples(tmp_path):
    with pytest.raises(ValueError):
        save_image(np.full((2, 2), 0.5), tmp_path / "a.png")


def test_downsample_odd_dims_floor():
    out = downsample_half(np.zeros((522, 775)))
    assert out.shape == (261, 387)


def test_downsample_2x2_is_block_mean():
    out = downsample_half(np.array([[0.0, 2.0], [4.0, 6.0]]))
    assert out.shape == (1, 1) and out[0, 0] == pytest.approx(3.0)


def test_downsample_constant():
    np.testing.assert_allclose(downsample_half(np.full((4, 4), 7.0)), np.full((2, 2), 7.0))


def test_downsample_rejects_degenerate():
    with pytest.raises(ValueError):
        downsample_half(np.zeros((1, 5)))


def test_upsample_linear_ramp():
    out = upsample_bilinear(np.array([[0.0, 1.0]]), 3, 1)
    np.testing.assert_allclose(out, [[0.0, 0.5, 1.0]])


def test_upsample_restores_original_dims():
    small = downsample_half(np.random.default_rng(2).random((522, 775)))
    assert upsample_bilinear(small, 775, 522).shape == (522, 775)


def test_upsample_rejects_smaller_target():
    with pytest.raises(ValueError):
        upsample_bilinear(np.zeros((4, 4)), 3, 4)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, min_side=2, max_side=9),
                  elements=st.floats(-100, 100)),
       st.integers(0, 7), st.integers(0, 7))
def test_bilinear_outputs_stay_within_source_range(img, dh, dw):
    lo, hi = img.min(), img.max()
    for out in (downsample_half(img), upsample_bilinear(img, img.shape[1] + dw, img.shape[0] + dh)):
        assert out.min() >= lo - 1e-9 and out.max() <= hi + 1e-9


@pytest.mark.parametrize("shape", [(2, 2), (5, 3), (9, 12)])
def test_constant_maps_to_constant(shape):
    img = np.full(shape, -2.5)
    np.testing.assert_allclose(downsample_half(img), -2.5)
    np.testing.assert_allclose(upsample_bilinear(img, shape[1] * 2, shape[0] * 2), -2.5)
