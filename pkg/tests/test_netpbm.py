import numpy as np
import pytest

from dsss import netpbm
from dsss.netpbm import FormatError


def test_ppm_round_trip(tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3))
    netpbm.write_ppm(tmp_path / "a.ppm", rgb)
    np.testing.assert_array_equal(netpbm.read_ppm(tmp_path / "a.ppm"), rgb)


def test_pgm_round_trip_8_and_16_bit(tmp_path):
    g8 = np.random.default_rng(1).integers(0, 256, size=(4, 3))
    g16 = np.random.default_rng(2).integers(0, 65536, size=(4, 3))
    netpbm.write_pgm(tmp_path / "a.pgm", g8)
    netpbm.write_pgm(tmp_path / "b.pgm", g16, maxval=65535)
    np.testing.assert_array_equal(netpbm.read_pgm(tmp_path / "a.pgm"), g8)
    arr, maxval = netpbm.read_pgm_maxval(tmp_path / "b.pgm")
    np.testing.assert_array_equal(arr, g16)
    assert maxval == 65535


def test_header_comments_are_skipped():
    buf = b"P5\n# made by hand\n2 1\n# max\n255\n\x01\x02"
    np.testing.assert_array_equal(netpbm.decode(buf, b"P5"), [[1, 2]])


def test_wrong_magic_is_format_error():
    buf = netpbm.encode_pgm(np.zeros((2, 2), dtype=int))
    with pytest.raises(FormatError) as info:
        netpbm.decode(buf, b"P6")
    assert info.value.offset == 0


def test_truncated_payload_reports_offset():
    buf = netpbm.encode_ppm(np.zeros((2, 2, 3), dtype=int))[:-3]
    with pytest.raises(FormatError, match="truncated") as info:
        netpbm.decode(buf, b"P6")
    assert info.value.offset == len(buf)


def test_malformed_header():
    with pytest.raises(FormatError, match="malformed header"):
        netpbm.decode(b"P5\n2 x\n255\n\x00\x00", b"P5")
    with pytest.raises(FormatError, match="maxval"):
        netpbm.decode(b"P5\n1 1\n0\n\x00", b"P5")


def test_encode_rejects_out_of_range():
    with pytest.raises(ValueError):
        netpbm.encode_pgm(np.array([[256]]))
    with pytest.raises(ValueError):
        netpbm.encode_ppm(np.zeros((2, 2)))
