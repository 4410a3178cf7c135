import json

import numpy as np
import pytest

from volviz.errors import DataError, UnknownDtypeError, VolumeFormatError, VolumeLengthError
from volviz.io import (
    DatasetManifest,
    Sample,
    Volume,
    atomic_write_bytes,
    header_path,
    read_manifest,
    read_volume,
    write_manifest,
    write_volume,
)


def test_f32_round_trip_is_bitwise(tmp_path):
    data = np.random.default_rng(0).standard_normal((8, 8, 8)).astype(np.float32)
    write_volume(Volume(data, "image", {"note": "x"}), tmp_path / "a.vol")
    back = read_volume(tmp_path / "a.vol")
    assert back.data.tobytes() == data.tobytes()
    assert back.kind == "image" and back.meta == {"note": "x"}
    assert (tmp_path / "a.vol").stat().st_size == 8 ** 3 * 4


def test_u16_atlas_round_trip(tmp_path):
    labels = np.random.default_rng(1).integers(0, 65536, (4, 5, 6)).astype(np.uint16)
    write_volume(Volume(labels, "atlas"), tmp_path / "atlas.vol")
    back = read_volume(tmp_path / "atlas.vol")
    assert back.data.dtype == np.uint16
    assert np.array_equal(back.data, labels)


def test_header_layout(tmp_path):
    write_volume(Volume(np.zeros((2, 3, 4), np.float32), "heatmap"), tmp_path / "h.vol")
    header = json.loads(header_path(tmp_path / "h.vol").read_text())
    assert header == {"shape": [2, 3, 4], "dtype": "f32", "order": "C", "endianness": "little",
                      "kind": "heatmap", "meta": {}}


def test_truncated_data_reports_byte_counts(tmp_path):
    write_volume(Volume(np.zeros((4, 4, 4), np.float32)), tmp_path / "a.vol")
    raw = (tmp_path / "a.vol").read_bytes()
    (tmp_path / "a.vol").write_bytes(raw[:-4])
    with pytest.raises(VolumeLengthError, match="252 bytes, expected 256"):
        read_volume(tmp_path / "a.vol")


def _rewrite_header(path, **changes):
    hp = header_path(path)
    header = json.loads(hp.read_text())
    header.update(changes)
    hp.write_text(json.dumps(header))


@pytest.mark.parametrize("changes,error,field", [
    ({"dtype": "f64"}, UnknownDtypeError, "dtype"),
    ({"shape": [4, 4]}, VolumeFormatError, "shape"),
    ({"order": "F"}, VolumeFormatError, "order"),
    ({"endianness": "big"}, VolumeFormatError, "endianness"),
    ({"kind": "atlas"}, VolumeFormatError, "dtype"),
    ({"kind": "photo"}, VolumeFormatError, "kind"),
])
def test_header_validation_names_the_field(tmp_path, changes, error, field):
    path = tmp_path / "a.vol"
    write_volume(Volume(np.zeros((4, 4, 4), np.float32)), path)
    _rewrite_header(path, **changes)
    with pytest.raises(error) as info:
        read_volume(path)
    assert info.value.field == field
    assert str(header_path(path)) in str(info.value)


def test_bad_json_header(tmp_path):
    path = tmp_path / "a.vol"
    write_volume(Volume(np.zeros((2, 2, 2), np.float32)), path)
    header_path(path).write_text("{not json")
    with pytest.raises(VolumeFormatError):
        read_volume(path)


def test_missing_files(tmp_path):
    with pytest.raises(DataError, match="missing volume header"):
        read_volume(tmp_path / "none.vol")


def test_atomic_write_leaves_no_temp_files(tmp_path):
    atomic_write_bytes(tmp_path / "sub" / "f.bin", b"abc")
    assert (tmp_path / "sub" / "f.bin").read_bytes() == b"abc"
    assert sorted(p.name for p in (tmp_path / "sub").iterdir()) == ["f.bin"]


def test_atomic_write_keeps_old_content_on_failure(tmp_path):
    target = tmp_path / "f.bin"
    target.write_bytes(b"old")

    class Boom:
        def __len__(self):
            return 1

    with pytest.raises(TypeError):
        atomic_write_bytes(target, Boom())
    assert target.read_bytes() == b"old"
    assert [p.name for p in tmp_path.iterdir()] == ["f.bin"]


def _manifest(tmp_path):
    for name in ("a", "b"):
        write_volume(Volume(np.zeros((2, 2, 2), np.float32)), tmp_path / f"{name}.vol")
    samples = [Sample("s1", "subA", 0, "a.vol"), Sample("s2", "subB", 1, "b.vol")]
    return DatasetManifest(samples, None, None, {"k": 1}, tmp_path)


def test_manifest_round_trip(tmp_path):
    m = _manifest(tmp_path)
    write_manifest(m, tmp_path / "manifest.json")
    back = read_manifest(tmp_path / "manifest.json")
    assert back.to_dict() == m.to_dict()
    assert back.by_id("s2").label == 1
    assert back.subjects() == {"subA": 0, "subB": 1}


def test_manifest_invariants(tmp_path):
    with pytest.raises(DataError, match="unique"):
        DatasetManifest([Sample("s", "a", 0, "x"), Sample("s", "b", 0, "y")])
    with pytest.raises(DataError, match="more than one class"):
        DatasetManifest([Sample("s1", "a", 0, "x"), Sample("s2", "a", 1, "y")])


def test_manifest_missing_referenced_file(tmp_path):
    m = _manifest(tmp_path)
    write_manifest(m, tmp_path / "manifest.json")
    (tmp_path / "b.vol").unlink()
    with pytest.raises(DataError, match="b.vol"):
        read_manifest(tmp_path / "manifest.json")
    assert len(read_manifest(tmp_path / "manifest.json", check_paths=False).samples) == 2
