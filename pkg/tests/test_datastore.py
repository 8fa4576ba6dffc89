import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pickmae import datastore as ds


DTYPES = [np.uint8, np.uint16, np.float32, np.float64]


@settings(max_examples=60, deadline=None)
@given(
    dtype=st.sampled_from(DTYPES),
    shape=st.lists(st.integers(0, 5), min_size=1, max_size=4),
    seed=st.integers(0, 2**31 - 1),
)
def test_tensor_roundtrip_bit_exact(dtype, shape, seed):
    rng = np.random.default_rng(seed)
    if np.issubdtype(dtype, np.integer):
        arr = rng.integers(0, np.iinfo(dtype).max, size=shape).astype(dtype)
    else:
        arr = rng.standard_normal(size=shape).astype(dtype)
    blob = ds.tensor_bytes(arr)
    back = ds.tensor_from_bytes(blob)
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()
    # serialization itself is deterministic
    assert ds.tensor_bytes(back) == blob


def test_tensor_file_roundtrip(tmp_path):
    arr = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    path = str(tmp_path / "t.pkt")
    ds.write_tensor(path, arr)
    assert np.array_equal(ds.read_tensor(path), arr)
    # no stray temp files after an atomic write
    assert sorted(p.name for p in tmp_path.iterdir()) == ["t.pkt"]


def test_tensor_header_layout():
    arr = np.array([[1, 2], [3, 4]], dtype=np.uint16)
    blob = ds.tensor_bytes(arr)
    assert blob[:4] == b"PKT1"
    assert blob[4] == 1          # dtype code for uint16
    assert blob[5] == 2          # ndim
    assert int.from_bytes(blob[6:10], "little") == 2
    assert int.from_bytes(blob[10:14], "little") == 2
    assert blob[14:] == arr.astype("<u2").tobytes()


def test_tensor_error_messages():
    arr = np.zeros(3, dtype=np.float32)
    blob = ds.tensor_bytes(arr)
    with pytest.raises(ds.DatastoreError, match="bad magic"):
        ds.tensor_from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ds.DatastoreError, match="unknown dtype code"):
        ds.tensor_from_bytes(blob[:4] + bytes([99]) + blob[5:])
    with pytest.raises(ds.DatastoreError, match="truncated payload"):
        ds.tensor_from_bytes(blob[:-1])
    with pytest.raises(ds.DatastoreError, match="truncated"):
        ds.tensor_from_bytes(blob[:5])
    with pytest.raises(ds.DatastoreError, match="dtype"):
        ds.tensor_bytes(np.zeros(2, dtype=np.int64))


def _record(**kw):
    base = dict(split="train", scene_id=1000001, path="train/scene_1000001",
                target=3, x=40, y=40, z=1.73, angle=2, wrist=0.5, cups=5,
                prob=0.875, label=1, failure="none")
    base.update(kw)
    return ds.RecordEntry(**base)


def test_record_line_roundtrip_exact_floats():
    rec = _record(z=1.0 / 3.0, wrist=np.pi, prob=0.1234567890123456789)
    back = ds.RecordEntry.from_line(rec.to_line())
    assert back == rec


def test_record_line_errors():
    with pytest.raises(ds.DatastoreError, match="not a record line"):
        ds.RecordEntry.from_line("nonsense")
    line = _record().to_line().replace(" label=1", "")
    with pytest.raises(ds.DatastoreError, match="missing fields"):
        ds.RecordEntry.from_line(line)


def _manifest(records=None, pretrain=()):
    return ds.DatasetManifest(
        format_version=ds.FORMAT_VERSION, flavor="standard",
        config_hash="abcd" * 4, ratios={"train": 11.0},
        records=list(records or []), pretrain_scenes=list(pretrain))


def test_manifest_roundtrip():
    m = _manifest([_record(), _record(scene_id=1000002,
                                      path="train/scene_1000002", label=0,
                                      failure="drop")],
                  pretrain=["pretrain/scene_0000000"])
    text = ds.format_manifest(m)
    back = ds.parse_manifest(text)
    assert back == m
    assert ds.format_manifest(back) == text


def test_manifest_split_band_violation():
    # a "val" record inside the train scene-id band must be rejected
    bad = _manifest([_record(), _record(split="val")])
    with pytest.raises(ds.DatastoreError, match="appears in splits"):
        ds.parse_manifest(ds.format_manifest(bad))


def test_manifest_missing_scene_reference(tmp_path):
    m = _manifest([_record()])
    with pytest.raises(ds.DatastoreError, match="scene_1000001"):
        ds.write_manifest(str(tmp_path / "manifest.txt"), m, validate=True)


def test_checkpoint_roundtrip(tmp_path):
    params = {
        "blocks.0.w": np.random.default_rng(0).standard_normal((4, 4)).astype(np.float32),
        "head.bias": np.zeros(3, dtype=np.float32),
    }
    ck = ds.Checkpoint(params=params, config={"train.lr": "0.001"},
                       provenance={"stage": "test"}, rng_digest="ff" * 16)
    path = str(tmp_path / "ckpt")
    ds.write_checkpoint(path, ck)
    back = ds.read_checkpoint(path)
    assert back.config == ck.config and back.provenance == ck.provenance
    assert back.rng_digest == ck.rng_digest
    assert set(back.params) == set(params)
    for k in params:
        assert back.params[k].dtype == np.float32
        assert np.array_equal(back.params[k], params[k])
    assert back.param_hash() == ck.param_hash()


def test_checkpoint_rejects_float64(tmp_path):
    ck = ds.Checkpoint(params={"w": np.zeros(2)}, config={}, provenance={},
                       rng_digest="00")
    with pytest.raises(ds.DatastoreError, match="float32"):
        ds.write_checkpoint(str(tmp_path / "c"), ck)


def test_validate_param_table_reports_all_mismatches():
    ck = ds.Checkpoint(
        params={"a": np.zeros((2, 2), dtype=np.float32),
                "extra": np.zeros(1, dtype=np.float32)},
        config={}, provenance={}, rng_digest="")
    expected = {"a": (3, 3), "missing": (1,)}
    with pytest.raises(ds.DatastoreError) as e:
        ds.validate_param_table(ck, expected)
    msg = str(e.value)
    assert "a:" in msg and "missing" in msg and "extra" in msg
