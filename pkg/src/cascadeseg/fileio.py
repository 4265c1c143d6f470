"""File formats: the CSEG tensor container, checkpoints, and datasets.

CSEG layout (all integers and floats little-endian):
    magic "CSEG" (4 bytes), format version u32 = 1, rank u32,
    rank * u32 extents, then product(extents) * f32 payload.

A checkpoint is a zip archive holding one CSEG file per parameter or buffer
plus ``manifest.json`` listing (path, role, shape) per entry. Zip metadata is
pinned (fixed timestamps, no compression) so identical states produce
identical archive bytes.
"""

from __future__ import annotations

import io
import json
import struct
import zipfile
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .synth import SyntheticTask, generate_sample

MAGIC = b"CSEG"
FORMAT_VERSION = 1
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def tensor_bytes(array: np.ndarray) -> bytes:
    array = np.asarray(array, dtype="<f4", order="C")
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + array.tobytes()


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise ValueError("not a CSEG tensor (bad magic)")
    version, rank = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported CSEG version {version}")
    extents = struct.unpack_from(f"<{rank}I", blob, 12)
    count = int(np.prod(extents)) if rank else 1
    offset = 12 + 4 * rank
    payload = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    return payload.reshape(extents).copy()


def save_tensor(path, array: np.ndarray) -> None:
    Path(path).write_bytes(tensor_bytes(array))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# checkpoints

def _state_entries(net):
    """(path, role, array) for every parameter and buffer, in graph order."""
    entries = []
    for full, tensor in net.named_parameters():
        path, role = full.rsplit("/", 1)
        entries.append((path, role, tensor.data))
    for full, arr in net.named_buffers():
        path, role = full.rsplit("/", 1)
        entries.append((path, role, arr))
    return entries


def save_checkpoint(path, net) -> None:
    entries = _state_entries(net)
    manifest = {"format": FORMAT_VERSION, "entries": []}
    blobs = []
    for i, (layer_path, role, arr) in enumerate(entries):
        fname = f"tensors/{i:04d}.cseg"
        manifest["entries"].append({"path": layer_path, "role": role,
                                    "shape": list(arr.shape), "file": fname})
        blobs.append((fname, tensor_bytes(arr)))
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_ZIP_EPOCH)
        zf.writestr(info, json.dumps(manifest, indent=2) + "\n")
        for fname, blob in blobs:
            info = zipfile.ZipInfo(fname, date_time=_ZIP_EPOCH)
            zf.writestr(info, blob)


def read_checkpoint_manifest(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("manifest.json"))


def read_checkpoint_payloads(path) -> dict[tuple[str, str], bytes]:
    """Raw CSEG bytes per (layer path, role), for byte-level comparisons."""
    out = {}
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        for entry in manifest["entries"]:
            out[(entry["path"], entry["role"])] = zf.read(entry["file"])
    return out


def load_checkpoint(path, net) -> None:
    """Restore a checkpoint into a network with a matching architecture."""
    expected = [(p, r, tuple(a.shape)) for p, r, a in _state_entries(net)]
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        found = [(e["path"], e["role"], tuple(e["shape"]))
                 for e in manifest["entries"]]
        if found != expected:
            raise ConfigError(
                "checkpoint manifest does not match the configured architecture "
                f"({len(found)} entries vs {len(expected)} expected)")
        arrays = [tensor_from_bytes(zf.read(e["file"]))
                  for e in manifest["entries"]]
    targets = _state_entries(net)
    for (_, _, arr), loaded in zip(targets, arrays):
        arr[...] = loaded.astype(arr.dtype)


# ---------------------------------------------------------------------------
# datasets

def write_dataset(out_dir, task: SyntheticTask, count: int) -> dict:
    """Write (image, label) CSEG pairs plus an index manifest; returns it."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count):
        image, label = generate_sample(task, i)
        image_file = f"pair_{i:05d}_image.cseg"
        label_file = f"pair_{i:05d}_label.cseg"
        save_tensor(out_dir / image_file, image)
        save_tensor(out_dir / label_file, label.astype(np.float32))
        values, counts = np.unique(label, return_counts=True)
        histogram = {str(int(v)): int(c) for v, c in zip(values, counts)}
        entries.append({"index": i, "image": image_file, "label": label_file,
                        "class_histogram": histogram})
    manifest = {
        "format": FORMAT_VERSION,
        "task": {"kind": task.kind, "image_size": list(task.image_size),
                 "num_classes": task.num_classes, "thin_width": task.thin_width,
                 "noise_std": task.noise_std, "seed": task.seed},
        "count": count,
        "entries": entries,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return manifest


def read_dataset_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise ConfigError(f"no dataset manifest at {path}")
    return json.loads(path.read_text())


def load_dataset_pair(data_dir, entry: dict) -> tuple[np.ndarray, np.ndarray]:
    image = load_tensor(Path(data_dir) / entry["image"])
    label = load_tensor(Path(data_dir) / entry["label"]).astype(np.int64)
    return image, label
