"""Binary frame files, checkpoints, JSON configs and CSV/PLY export.

Frame file layout (little-endian)::

    "FLPF" | u32 version | u32 frames | u32 fluid | u32 solid | f32 dt
    solid_pos (M, 3) f32 | solid_normal (M, 3) f32
    per frame: fluid_pos (N, 3) f32 then fluid_vel (N, 3) f32

A checkpoint is a JSON manifest plus ``<path>.bin`` holding raw little-endian
float32 tensors at the offsets listed in the manifest.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .core import FrameSequence
from .network import ModelConfig, param_shapes
from .training import AdamState

MAGIC = b"FLPF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIf")
_F32 = np.dtype("<f4")


class FormatError(ValueError):
    pass


# --------------------------------------------------------------------------- frames


def encode_frames(seq: FrameSequence) -> bytes:
    T, N, M = len(seq), seq.n_fluid, seq.n_solid
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, T, N, M, seq.dt)]
    parts.append(np.ascontiguousarray(seq.solid_pos, _F32).tobytes())
    parts.append(np.ascontiguousarray(seq.solid_normal, _F32).tobytes())
    body = np.stack([seq.fluid_pos, seq.fluid_vel], axis=1)  # (T, 2, N, 3)
    parts.append(np.ascontiguousarray(body, _F32).tobytes())
    return b"".join(parts)


def decode_frames(buf: bytes, scene_id="") -> FrameSequence:
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: expected {_HEADER.size} bytes, got {len(buf)}")
    magic, version, T, N, M, dt = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"byte 0: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"byte 4: unsupported format version {version}, expected {FORMAT_VERSION}")
    expected = _HEADER.size + 4 * (6 * M + 6 * N * T)
    if len(buf) != expected:
        what = "truncated payload" if len(buf) < expected else "trailing bytes"
        raise FormatError(f"{what} at byte {min(len(buf), expected)}: expected {expected} bytes, got {len(buf)}")
    off = _HEADER.size
    solid = np.frombuffer(buf, _F32, 6 * M, off).reshape(2, M, 3) if M else np.zeros((2, 0, 3), _F32)
    off += 24 * M
    body = np.frombuffer(buf, _F32, 6 * N * T, off).reshape(T, 2, N, 3)
    # shortest decimal that rounds to the stored f32, so 0.02 reads back as 0.02
    dt = float(str(np.float32(dt)))
    return FrameSequence(body[:, 0], body[:, 1], solid[0], solid[1], dt, scene_id)


def write_frames(path, seq: FrameSequence):
    Path(path).write_bytes(encode_frames(seq))


def read_frames(path) -> FrameSequence:
    """Scene id is taken from the file name stem."""
    path = Path(path)
    return decode_frames(path.read_bytes(), path.stem)


def read_dataset(directory):
    files = sorted(Path(directory).glob("*.flpf"))
    if not files:
        raise FormatError(f"no .flpf files in {directory}")
    return [read_frames(f) for f in files]


# --------------------------------------------------------------------------- checkpoints


def _blob_path(path):
    return Path(str(path) + ".bin")


def save_checkpoint(path, params: dict, cfg: ModelConfig, adam: AdamState | None = None, iteration=0, extra=None):
    """Write the manifest to ``path`` and tensors to ``path + '.bin'``."""
    entries = []
    chunks = []
    off = 0

    def put(name, arr):
        nonlocal off
        a = np.ascontiguousarray(arr, _F32)
        entries.append({"name": name, "shape": list(a.shape), "offset": off, "nbytes": a.nbytes})
        chunks.append(a.tobytes())
        off += a.nbytes

    for name in sorted(params):
        put(name, params[name])
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": cfg.to_dict(),
        "iteration": int(iteration),
        "tensors": entries,
    }
    if adam is not None:
        for name in sorted(params):
            put(f"adam.m/{name}", adam.m[name])
            put(f"adam.v/{name}", adam.v[name])
        manifest["adam"] = {"step": adam.step, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps}
    if extra:
        manifest["extra"] = extra
    manifest["blob_bytes"] = off
    _blob_path(path).write_bytes(b"".join(chunks))
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path, cfg: ModelConfig | None = None, dtype=np.float32):
    """Returns (params, model config, AdamState or None, manifest).

    Every tensor expected by the model configuration must be present with the
    right shape, and no unknown tensor may appear.
    """
    manifest = json.loads(Path(path).read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {manifest.get('format_version')}")
    blob = _blob_path(path).read_bytes()
    if len(blob) != manifest.get("blob_bytes", -1):
        raise FormatError(f"blob size {len(blob)} does not match manifest ({manifest.get('blob_bytes')})")
    cfg = cfg or ModelConfig.from_dict(manifest["model_config"])
    spans = sorted((e["offset"], e["offset"] + e["nbytes"], e["name"]) for e in manifest["tensors"])
    for (a0, a1, an), (b0, _, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise FormatError(f"tensors {an} and {bn} overlap in the blob")
    if spans and spans[-1][1] > len(blob):
        raise FormatError(f"tensor {spans[-1][2]} extends past the end of the blob")
    tensors = {}
    for e in manifest["tensors"]:
        shape = tuple(e["shape"])
        n = int(np.prod(shape)) if shape else 1
        if e["nbytes"] != 4 * n:
            raise FormatError(f"tensor {e['name']}: byte count {e['nbytes']} does not match shape {shape}")
        tensors[e["name"]] = np.frombuffer(blob, _F32, n, e["offset"]).reshape(shape).astype(dtype)
    expected = param_shapes(cfg)
    names = {k for k in tensors if not k.startswith("adam.")}
    for name in sorted(names - set(expected)):
        raise FormatError(f"unexpected tensor {name}")
    for name, (_, shape) in expected.items():
        if name not in tensors:
            raise FormatError(f"missing tensor {name}")
        if tuple(tensors[name].shape) != shape:
            raise FormatError(f"tensor {name} has shape {tuple(tensors[name].shape)}, config expects {shape}")
    params = {k: tensors[k] for k in expected}
    adam = None
    if "adam" in manifest:
        a = manifest["adam"]
        try:
            m = {k: tensors[f"adam.m/{k}"] for k in expected}
            v = {k: tensors[f"adam.v/{k}"] for k in expected}
        except KeyError as err:
            raise FormatError(f"missing optimizer tensor {err.args[0]}") from None
        adam = AdamState(m, v, a["step"], a["beta1"], a["beta2"], a["eps"])
    return params, cfg, adam, manifest


# --------------------------------------------------------------------------- json / export


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def export_frames(seq: FrameSequence, out_dir, fmt="csv"):
    """One file per frame: CSV with positions and velocities, or ASCII PLY with positions."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for t in range(len(seq)):
        x = seq.fluid_pos[t]
        if fmt == "csv":
            p = out / f"frame_{t:05d}.csv"
            rows = np.concatenate([x, seq.fluid_vel[t]], axis=1)
            with open(p, "w") as fh:
                fh.write("particle,x,y,z,vx,vy,vz\n")
                for i, r in enumerate(rows):
                    fh.write(f"{i}," + ",".join(repr(float(c)) for c in r) + "\n")
        elif fmt == "ply":
            p = out / f"frame_{t:05d}.ply"
            with open(p, "w") as fh:
                fh.write(f"ply\nformat ascii 1.0\nelement vertex {len(x)}\n")
                fh.write("property float x\nproperty float y\nproperty float z\nend_header\n")
                for r in x:
                    fh.write(" ".join(repr(float(c)) for c in r) + "\n")
        else:
            raise ValueError(f"unknown export format {fmt!r}")
        paths.append(p)
    return paths


def read_ply_positions(path):
    """Positions from an ASCII PLY written by :func:`export_frames`."""
    lines = Path(path).read_text().splitlines()
    n = next(int(ln.split()[2]) for ln in lines if ln.startswith("element vertex"))
    start = lines.index("end_header") + 1
    return np.array([[float(c) for c in ln.split()] for ln in lines[start:start + n]], np.float32).reshape(n, 3)


def atomic_write_text(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)
