import json
import struct

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from uabackprop.attribution import AttributionMap, MapFormatError, load_map, save_map, write_pgm
from uabackprop.attribution.mapio import heatmap_u8, read_pgm


def sample_map():
    return AttributionMap(np.arange(12.0).reshape(3, 4) / 7.0, "aleatoric", "ua", 0.42)


def test_round_trip_float32_and_sidecar(tmp_path):
    path = tmp_path / "m.uamap"
    side = save_map(sample_map(), path, config_hash="abc", attention=True, alpha=0.2)
    back, meta = load_map(path)
    assert_array_equal(back.values, sample_map().values.astype(np.float32))
    assert back.kind == "aleatoric" and back.method == "ua" and back.total_uncertainty == 0.42
    assert json.loads(side.read_text()) == meta
    assert meta["config_hash"] == "abc" and meta["alpha"] == 0.2 and meta["shape"] == [3, 4]
    assert not list(tmp_path.glob("*.tmp"))


def test_grid_byte_layout(tmp_path):
    path = tmp_path / "m.uamap"
    save_map(sample_map(), path)
    blob = path.read_bytes()
    assert struct.unpack_from("<6sHHII", blob) == (b"UAMAP\x00", 1, 0, 3, 4)
    assert np.frombuffer(blob, "<f4", offset=18)[5] == np.float32(5 / 7)


@pytest.mark.parametrize("damage", ["magic", "major", "truncate", "short"])
def test_load_rejects_damaged_grid(tmp_path, damage):
    path = tmp_path / "m.uamap"
    save_map(sample_map(), path)
    blob = bytearray(path.read_bytes())
    if damage == "magic":
        blob[0] = ord("X")
    elif damage == "major":
        blob[6:8] = struct.pack("<H", 9)
    elif damage == "truncate":
        blob = blob[:-4]
    else:
        blob = blob[:5]
    path.write_bytes(bytes(blob))
    with pytest.raises(MapFormatError):
        load_map(path)


def test_heatmap_min_max_and_pgm(tmp_path):
    u8 = heatmap_u8(np.array([[1.0, 2.0], [3.0, 5.0]]))
    assert_array_equal(u8, [[0, 64], [128, 255]])
    assert_array_equal(heatmap_u8(np.full((2, 2), 3.0)), 0)
    path = tmp_path / "h.pgm"
    write_pgm(np.array([[0.0, 1.0, 2.0]]), path)
    assert path.read_bytes()[:11] == b"P5\n3 1\n255\n"
    assert_array_equal(read_pgm(path), [[0, 128, 255]])
