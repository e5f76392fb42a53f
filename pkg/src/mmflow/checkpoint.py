"""Single-file checkpoint container of length-prefixed named sections.

File layout::

    b"MMCK"  uint32 format_version  uint32 n_sections
    n_sections x [uint32 name_len, name (utf-8), uint64 payload_len, payload]

Sections: ``config`` (canonical config text), ``meta`` (JSON: step and RNG
state), and one shaped array per tensor under ``param/``, ``ema/`` and
``optim/`` name prefixes.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .arrays import decode_array, encode_array
from .config import ModelConfig, dump_config, parse_config

FORMAT_VERSION = 1
MAGIC = b"MMCK"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    rng_seed: int = 0
    rng_counter: int = 0
    # optimiser moments, keyed "m/<param>" and "v/<param>"
    optim: dict[str, np.ndarray] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def parameter_count(self) -> int:
        return int(sum(a.size for a in self.params.values()))

    def validate(self, expected_shapes: Optional[dict[str, tuple]] = None) -> None:
        if expected_shapes is not None:
            for name, shape in expected_shapes.items():
                if name not in self.params:
                    raise CheckpointError(f"missing parameter {name!r}")
                if tuple(self.params[name].shape) != tuple(shape):
                    raise CheckpointError(
                        f"shape mismatch for {name!r}: stored {self.params[name].shape}, "
                        f"declared {tuple(shape)}")
            extra = sorted(set(self.params) - set(expected_shapes))
            if extra:
                raise CheckpointError(f"unexpected parameters {extra}")
        for prefix, table in (("ema", self.ema), ("optim", None)):
            if table is None:
                table = {k.split("/", 1)[1]: v for k, v in self.optim.items()}
            for name, arr in table.items():
                if name not in self.params:
                    raise CheckpointError(f"{prefix} entry {name!r} has no matching parameter")
                if arr.shape != self.params[name].shape:
                    raise CheckpointError(
                        f"shape mismatch between {prefix} entry {name!r} {arr.shape} "
                        f"and parameter {self.params[name].shape}")


def _section(name: str, payload: bytes) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw + struct.pack("<Q", len(payload)) + payload


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    sections = [
        ("config", dump_config(ckpt.config).encode("utf-8")),
        ("meta", json.dumps({"step": ckpt.step, "rng_seed": ckpt.rng_seed,
                             "rng_counter": ckpt.rng_counter}, sort_keys=True).encode()),
    ]
    for prefix, table in (("param", ckpt.params), ("ema", ckpt.ema), ("optim", ckpt.optim)):
        for name in sorted(table):
            sections.append((f"{prefix}/{name}", encode_array(table[name])))
    names = [s[0] for s in sections]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate section names")
    out = [MAGIC, struct.pack("<II", ckpt.format_version, len(sections))]
    out += [_section(n, p) for n, p in sections]
    return b"".join(out)


def decode_checkpoint(buf: bytes, expected_shapes=None) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"format version mismatch: file has {version}, expected {FORMAT_VERSION}")
    pos, sections = 12, {}
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4:pos + 4 + nlen].decode("utf-8")
            (plen,) = struct.unpack_from("<Q", buf, pos + 4 + nlen)
        except struct.error:
            raise CheckpointError("truncated checkpoint") from None
        start = pos + 12 + nlen
        if start + plen > len(buf):
            raise CheckpointError(f"truncated section {name!r}")
        if name in sections:
            raise CheckpointError(f"duplicate section {name!r}")
        sections[name] = buf[start:start + plen]
        pos = start + plen
    for required in ("config", "meta"):
        if required not in sections:
            raise CheckpointError(f"missing section {required!r}")
    config = parse_config(sections.pop("config").decode("utf-8"))
    meta = json.loads(sections.pop("meta"))
    tables = {"param": {}, "ema": {}, "optim": {}}
    for name, payload in sections.items():
        prefix, _, key = name.partition("/")
        if prefix not in tables or not key:
            raise CheckpointError(f"unknown section {name!r}")
        tables[prefix][key] = decode_array(payload)
    ckpt = Checkpoint(config=config, params=tables["param"], ema=tables["ema"],
                      optim=tables["optim"], step=int(meta["step"]),
                      rng_seed=int(meta["rng_seed"]), rng_counter=int(meta["rng_counter"]),
                      format_version=version)
    if expected_shapes is None:
        from .model import parameter_shapes
        expected_shapes = parameter_shapes(config)
    ckpt.validate(expected_shapes)
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path, expected_shapes=None) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), expected_shapes)
