"""On-disk formats: tensor blobs, dataset manifests, model checkpoints.

Everything is endianness-pinned little, written atomically (temp + rename),
and bit-exact on roundtrip. Images are stored as raw tensor blobs rather than
PNG so no codec is in the loop; `export_png` exists for human inspection only.
"""

import dataclasses
import hashlib
import os
import tempfile

import numpy as np

MAGIC = b"PKT1"
FORMAT_VERSION = 1

_DTYPE_CODES = {
    np.dtype("uint8"): 0,
    np.dtype("uint16"): 1,
    np.dtype("float32"): 2,
    np.dtype("float64"): 3,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class DatastoreError(ValueError):
    """Structured parse/validation failure; the message names the bad field."""


def _atomic_write_bytes(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def tensor_bytes(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array)
    if arr.dtype not in _DTYPE_CODES:
        raise DatastoreError(f"unsupported dtype {arr.dtype} (field: dtype_code)")
    header = bytearray()
    header += MAGIC
    header.append(_DTYPE_CODES[arr.dtype])
    header.append(arr.ndim)
    for dim in arr.shape:
        header += int(dim).to_bytes(4, "little")
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return bytes(header) + arr.astype(arr.dtype.newbyteorder("<")).tobytes()


def write_tensor(path: str, array: np.ndarray) -> None:
    _atomic_write_bytes(path, tensor_bytes(array))


def tensor_from_bytes(blob: bytes, origin: str = "<bytes>") -> np.ndarray:
    if len(blob) < 6:
        raise DatastoreError(f"{origin}: truncated header")
    if blob[:4] != MAGIC:
        raise DatastoreError(f"{origin}: bad magic {blob[:4]!r}")
    code, ndim = blob[4], blob[5]
    if code not in _CODE_DTYPES:
        raise DatastoreError(f"{origin}: unknown dtype code {code}")
    dtype = _CODE_DTYPES[code]
    offset = 6
    if len(blob) < offset + 4 * ndim:
        raise DatastoreError(f"{origin}: truncated dims")
    dims = tuple(
        int.from_bytes(blob[offset + 4 * i : offset + 4 * (i + 1)], "little")
        for i in range(ndim)
    )
    offset += 4 * ndim
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
    if ndim == 0:
        expected = dtype.itemsize
    if len(blob) - offset != expected:
        raise DatastoreError(
            f"{origin}: truncated payload (expected {expected} bytes, got {len(blob) - offset})"
        )
    flat = np.frombuffer(blob, dtype=dtype.newbyteorder("<"), offset=offset)
    return flat.reshape(dims).astype(dtype, copy=True)


def read_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        return tensor_from_bytes(f.read(), origin=path)


def export_png(path: str, array: np.ndarray) -> None:
    """Debug-only PNG export (requires matplotlib; never used by the pipeline)."""
    import matplotlib.image

    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        lo, hi = float(arr.min()), float(arr.max())
        arr = ((arr - lo) / (hi - lo + 1e-12) * 255).astype(np.uint8)
    matplotlib.image.imsave(path, arr, cmap=None if arr.ndim == 3 else "viridis")


# ---------------------------------------------------------------------------
# Pick records and dataset manifests
# ---------------------------------------------------------------------------

SCENE_FILES = ("rgb.pkt", "depth.pkt", "instance.pkt", "semantic.pkt")

_RECORD_FIELDS = (
    "split",
    "scene_id",
    "path",
    "target",
    "x",
    "y",
    "z",
    "angle",
    "wrist",
    "cups",
    "prob",
    "label",
    "failure",
)


@dataclasses.dataclass(frozen=True)
class RecordEntry:
    """One pick record as serialized in a dataset manifest."""

    split: str
    scene_id: int
    path: str
    target: int
    x: int
    y: int
    z: float
    angle: int
    wrist: float
    cups: int
    prob: float
    label: int
    failure: str

    def to_line(self) -> str:
        vals = {
            "split": self.split,
            "scene_id": self.scene_id,
            "path": self.path,
            "target": self.target,
            "x": self.x,
            "y": self.y,
            "z": repr(float(self.z)),
            "angle": self.angle,
            "wrist": repr(float(self.wrist)),
            "cups": self.cups,
            "prob": repr(float(self.prob)),
            "label": self.label,
            "failure": self.failure,
        }
        return "record " + " ".join(f"{k}={vals[k]}" for k in _RECORD_FIELDS)

    @staticmethod
    def from_line(line: str, origin: str = "<line>") -> "RecordEntry":
        parts = line.split()
        if not parts or parts[0] != "record":
            raise DatastoreError(f"{origin}: not a record line: {line!r}")
        kv = {}
        for tok in parts[1:]:
            if "=" not in tok:
                raise DatastoreError(f"{origin}: bad record token {tok!r}")
            k, v = tok.split("=", 1)
            kv[k] = v
        missing = [f for f in _RECORD_FIELDS if f not in kv]
        if missing:
            raise DatastoreError(f"{origin}: record missing fields {missing}")
        return RecordEntry(
            split=kv["split"],
            scene_id=int(kv["scene_id"]),
            path=kv["path"],
            target=int(kv["target"]),
            x=int(kv["x"]),
            y=int(kv["y"]),
            z=float(kv["z"]),
            angle=int(kv["angle"]),
            wrist=float(kv["wrist"]),
            cups=int(kv["cups"]),
            prob=float(kv["prob"]),
            label=int(kv["label"]),
            failure=kv["failure"],
        )


@dataclasses.dataclass
class DatasetManifest:
    format_version: int
    flavor: str
    config_hash: str
    ratios: dict[str, float]          # split -> achieved success:fail ratio
    records: list[RecordEntry]
    pretrain_scenes: list[str]        # scene dirs used for pretraining only

    def split_records(self, split: str) -> list[RecordEntry]:
        return [r for r in self.records if r.split == split]


def format_manifest(m: DatasetManifest) -> str:
    lines = [
        f"format_version={m.format_version}",
        f"flavor={m.flavor}",
        f"config_hash={m.config_hash}",
    ]
    for split in sorted(m.ratios):
        lines.append(f"ratio {split}={repr(float(m.ratios[split]))}")
    for path in m.pretrain_scenes:
        lines.append(f"pretrain_scene path={path}")
    for rec in m.records:
        lines.append(rec.to_line())
    return "\n".join(lines) + "\n"


def write_manifest(path: str, manifest: DatasetManifest, validate: bool = True) -> None:
    if validate:
        root = os.path.dirname(os.path.abspath(path))
        _validate_scene_refs(root, manifest)
    _atomic_write_bytes(path, format_manifest(manifest).encode())


def read_manifest(path: str, validate: bool = True) -> DatasetManifest:
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    manifest = parse_manifest(text, origin=path)
    if validate:
        _validate_scene_refs(os.path.dirname(os.path.abspath(path)), manifest)
    return manifest


def parse_manifest(text: str, origin: str = "<text>") -> DatasetManifest:
    header: dict[str, str] = {}
    ratios: dict[str, float] = {}
    records: list[RecordEntry] = []
    pretrain_scenes: list[str] = []
    for line in text.splitlines():
        if not line.strip():
            continue
        if line.startswith("record "):
            records.append(RecordEntry.from_line(line, origin))
        elif line.startswith("ratio "):
            body = line[len("ratio "):]
            split, value = body.split("=", 1)
            ratios[split.strip()] = float(value)
        elif line.startswith("pretrain_scene "):
            pretrain_scenes.append(line.split("path=", 1)[1].strip())
        elif "=" in line:
            k, v = line.split("=", 1)
            header[k.strip()] = v.strip()
        else:
            raise DatastoreError(f"{origin}: unparseable line {line!r}")
    for field in ("format_version", "flavor", "config_hash"):
        if field not in header:
            raise DatastoreError(f"{origin}: manifest missing field {field!r}")
    manifest = DatasetManifest(
        format_version=int(header["format_version"]),
        flavor=header["flavor"],
        config_hash=header["config_hash"],
        ratios=ratios,
        records=records,
        pretrain_scenes=pretrain_scenes,
    )
    _check_split_disjoint(manifest, origin)
    return manifest


def _check_split_disjoint(manifest: DatasetManifest, origin: str) -> None:
    seen: dict[int, str] = {}
    for rec in manifest.records:
        prev = seen.get(rec.scene_id)
        if prev is not None and prev != rec.split:
            raise DatastoreError(
                f"{origin}: scene_id {rec.scene_id} appears in splits {prev!r} and {rec.split!r}"
            )
        seen[rec.scene_id] = rec.split


def _validate_scene_refs(root: str, manifest: DatasetManifest) -> None:
    paths = {r.path for r in manifest.records} | set(manifest.pretrain_scenes)
    for rel in sorted(paths):
        scene_dir = os.path.join(root, rel)
        for fname in SCENE_FILES:
            fpath = os.path.join(scene_dir, fname)
            if not os.path.exists(fpath):
                raise DatastoreError(f"manifest references missing file {fpath}")


def manifest_content_hash(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


# ---------------------------------------------------------------------------
# Model checkpoints
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class Checkpoint:
    params: dict[str, np.ndarray]     # name -> float32 array
    config: dict[str, str]            # flat config snapshot (string values)
    provenance: dict[str, str]        # dataset hash, epochs, stage, ...
    rng_digest: str

    def param_hash(self, names: list[str] | None = None) -> str:
        h = hashlib.sha256()
        for name in sorted(names if names is not None else self.params):
            h.update(name.encode())
            h.update(tensor_bytes(self.params[name]))
        return h.hexdigest()


def write_checkpoint(path: str, ckpt: Checkpoint) -> None:
    os.makedirs(os.path.join(path, "params"), exist_ok=True)
    lines = [f"format_version={FORMAT_VERSION}", f"rng_digest={ckpt.rng_digest}"]
    for k in sorted(ckpt.provenance):
        lines.append(f"provenance {k}={ckpt.provenance[k]}")
    for k in sorted(ckpt.config):
        lines.append(f"config {k}={ckpt.config[k]}")
    for name in sorted(ckpt.params):
        arr = ckpt.params[name]
        if arr.dtype != np.float32:
            raise DatastoreError(f"checkpoint parameter {name} must be float32, got {arr.dtype}")
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"param {name} float32 {shape}")
        write_tensor(os.path.join(path, "params", name + ".pkt"), arr)
    _atomic_write_bytes(os.path.join(path, "checkpoint.txt"), ("\n".join(lines) + "\n").encode())


def read_checkpoint(path: str) -> Checkpoint:
    meta = os.path.join(path, "checkpoint.txt")
    if not os.path.exists(meta):
        raise DatastoreError(f"{path}: missing checkpoint.txt")
    config: dict[str, str] = {}
    provenance: dict[str, str] = {}
    declared: dict[str, tuple[int, ...]] = {}
    rng_digest = ""
    with open(meta, "r", encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("param "):
                _, name, dtype, shape = line.split(" ", 3)
                if dtype != "float32":
                    raise DatastoreError(f"{path}: parameter {name} has dtype {dtype}")
                dims = tuple(int(d) for d in shape.split(",") if d)
                declared[name] = dims
            elif line.startswith("config "):
                k, v = line[len("config "):].split("=", 1)
                config[k] = v
            elif line.startswith("provenance "):
                k, v = line[len("provenance "):].split("=", 1)
                provenance[k] = v
            elif line.startswith("rng_digest="):
                rng_digest = line.split("=", 1)[1]
            elif line.startswith("format_version="):
                version = int(line.split("=", 1)[1])
                if version != FORMAT_VERSION:
                    raise DatastoreError(f"{path}: unsupported format_version {version}")
            else:
                raise DatastoreError(f"{path}: unparseable checkpoint line {line!r}")
    params: dict[str, np.ndarray] = {}
    mismatches = []
    for name, dims in declared.items():
        blob_path = os.path.join(path, "params", name + ".pkt")
        if not os.path.exists(blob_path):
            mismatches.append(f"{name}: blob missing")
            continue
        arr = read_tensor(blob_path)
        if arr.shape != dims:
            mismatches.append(f"{name}: declared {dims}, blob has {arr.shape}")
            continue
        params[name] = arr
    if mismatches:
        raise DatastoreError(f"{path}: parameter mismatches: " + "; ".join(mismatches))
    return Checkpoint(params=params, config=config, provenance=provenance, rng_digest=rng_digest)


def validate_param_table(
    ckpt: Checkpoint, expected: dict[str, tuple[int, ...]], origin: str = "<checkpoint>"
) -> None:
    """Check name/shape agreement, reporting every mismatch at once."""
    problems = []
    for name, shape in sorted(expected.items()):
        if name not in ckpt.params:
            problems.append(f"{name}: missing from checkpoint")
        elif tuple(ckpt.params[name].shape) != tuple(shape):
            problems.append(
                f"{name}: expected shape {tuple(shape)}, got {tuple(ckpt.params[name].shape)}"
            )
    for name in sorted(ckpt.params):
        if name not in expected:
            problems.append(f"{name}: unexpected parameter")
    if problems:
        raise DatastoreError(f"{origin}: " + "; ".join(problems))
