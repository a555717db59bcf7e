"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic       8 bytes  b"MFPREPCK"
    version     uint32   FORMAT_VERSION
    epoch       uint64
    config      uint32 byte length + UTF-8 canonical ``key = value`` text
    rng         uint32 byte length + UTF-8 JSON of the numpy bit-generator state
    n_arrays    uint32
    arrays      n_arrays x (uint64 element count + float64 LE data)

Arrays appear in manifest order: w_x, w_h, b, w_out, b_out (controller),
adam_m, adam_v, adam_t (one element), loss_history, gap_history. Array
shapes follow from the config block.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .config import parse_config, canonical_text
from .controller import init_params, PARAM_NAMES
from .trainer import AdamState, Checkpoint

MAGIC = b"MFPREPCK"
FORMAT_VERSION = 1
MANIFEST = PARAM_NAMES + ("adam_m", "adam_v", "adam_t", "loss_history", "gap_history")


class CheckpointError(ValueError):
    pass


def _block(data: bytes) -> bytes:
    return struct.pack("<I", len(data)) + data


def encode_checkpoint(ck: Checkpoint) -> bytes:
    arrays = [a for a in ck.params.arrays()]
    arrays += [ck.adam.m, ck.adam.v, np.array([float(ck.adam.t)]), ck.loss_history, ck.gap_history]
    out = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, ck.epoch)]
    out.append(_block(canonical_text(ck.config).encode()))
    out.append(_block(json.dumps(ck.rng_state, sort_keys=True).encode()))
    out.append(struct.pack("<I", len(arrays)))
    for a in arrays:
        flat = np.ascontiguousarray(np.ravel(a), dtype="<f8")
        out.append(struct.pack("<Q", flat.size))
        out.append(flat.tobytes())
    return b"".join(out)


def decode_checkpoint(data: bytes) -> Checkpoint:
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = 8
    try:
        version, epoch = struct.unpack_from("<IQ", data, pos)
        pos += 12
        if version != FORMAT_VERSION:
            raise CheckpointError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
        texts = []
        for _ in range(2):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            texts.append(data[pos : pos + n].decode())
            pos += n
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        arrays = []
        for _ in range(count):
            (n,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            if pos + 8 * n > len(data):
                raise CheckpointError("truncated checkpoint")
            arrays.append(np.frombuffer(data, dtype="<f8", count=n, offset=pos).astype(float))
            pos += 8 * n
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint arrays")
    if count != len(MANIFEST):
        raise CheckpointError(f"expected {len(MANIFEST)} arrays, found {count}")
    cfg = parse_config(texts[0])
    exp = cfg.experiment
    template = init_params(exp.input_width, exp.hidden, exp.output_width, 0)
    params = template.unflatten(np.concatenate(arrays[:5]))
    adam = AdamState(arrays[5].copy(), arrays[6].copy(), int(arrays[7][0]))
    return Checkpoint(cfg, int(epoch), params, adam, json.loads(texts[1]), arrays[8].copy(), arrays[9].copy())


def save_checkpoint(ck: Checkpoint, path) -> None:
    """Atomic write: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_checkpoint(ck)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
