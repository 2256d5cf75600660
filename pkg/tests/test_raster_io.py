import numpy as np
import pytest

from mvrefine.raster_io import (RasterFormatError, read_depth, read_mask_png, read_nocs_png,
                                write_depth, write_mask_png, write_nocs_png)


def test_nocs_png_quantization(tmp_path, rng):
    nocs = rng.random((20, 30, 3))
    write_nocs_png(tmp_path / "n.png", nocs)
    back = read_nocs_png(tmp_path / "n.png")
    assert back.shape == (20, 30, 3)
    assert np.array_equal(np.round(back * 65535), np.round(nocs * 65535))
    import cv2
    raw = cv2.imread(str(tmp_path / "n.png"), cv2.IMREAD_UNCHANGED)
    assert raw.dtype == np.uint16
    # stored channel order is RGB in the file (BGR in OpenCV's view)
    assert raw[0, 0, 2] == round(nocs[0, 0, 0] * 65535)


def test_mask_png_values(tmp_path):
    m = np.zeros((8, 9), bool)
    m[2:5, 3:7] = True
    write_mask_png(tmp_path / "m.png", m)
    import cv2
    raw = cv2.imread(str(tmp_path / "m.png"), cv2.IMREAD_UNCHANGED)
    assert set(np.unique(raw)) == {0, 255}
    assert np.array_equal(read_mask_png(tmp_path / "m.png"), m)


def test_mask_png_rejects_grey(tmp_path):
    import cv2
    cv2.imwrite(str(tmp_path / "g.png"), np.full((4, 4), 128, np.uint8))
    with pytest.raises(RasterFormatError):
        read_mask_png(tmp_path / "g.png")


def test_depth_format(tmp_path, rng):
    d = rng.random((5, 7)).astype(np.float32)
    d[0, 0] = np.inf
    write_depth(tmp_path / "d.raw", d)
    data = (tmp_path / "d.raw").read_bytes()
    assert data[:4] == b"DPTH" and len(data) == 16 + 4 * 35
    assert int.from_bytes(data[4:8], "little") == 7 and int.from_bytes(data[8:12], "little") == 5
    assert np.array_equal(read_depth(tmp_path / "d.raw"), d)


def test_depth_rejects_bad_files(tmp_path):
    (tmp_path / "x.raw").write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(RasterFormatError):
        read_depth(tmp_path / "x.raw")
    (tmp_path / "y.raw").write_bytes(b"DPT")
    with pytest.raises(RasterFormatError):
        read_depth(tmp_path / "y.raw")
