"""Bit-exact binary records for snapshots, models and checkpoints.

Layout of every record::

    magic        8 bytes (e.g. b"DPMSNAP1")
    version      uint32 little-endian
    header_len   uint32 little-endian
    header       UTF-8 JSON, sorted keys
    payload      concatenated little-endian float64 arrays, C order

The header lists each array's name and shape, the payload length and its CRC32.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import GridSpec

RECORD_VERSION = 1
SNAPSHOT_MAGIC = b"DPMSNAP1"
SNAPSHOT_KINDS = ("dns", "filtered", "coarse_target", "les")


class RecordError(ValueError):
    """Malformed, truncated or corrupted record."""


def pack_record(magic: bytes, header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    chunks, layout = [], []
    for name, a in arrays.items():
        a = np.ascontiguousarray(a, dtype="<f8")
        layout.append({"name": name, "shape": list(a.shape)})
        chunks.append(a.tobytes())
    payload = b"".join(chunks)
    header = dict(header, arrays=layout, payload_bytes=len(payload), crc32=zlib.crc32(payload))
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    return magic + struct.pack("<II", RECORD_VERSION, len(hb)) + hb + payload


def unpack_record(blob: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 16:
        raise RecordError("record is truncated")
    if blob[:8] != magic:
        raise RecordError(f"bad magic {blob[:8]!r}, expected {magic!r}")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != RECORD_VERSION:
        raise RecordError(f"unsupported record version {version}")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise RecordError(f"unreadable header: {exc}") from None
    payload = blob[16 + hlen:]
    if len(payload) != header.get("payload_bytes"):
        raise RecordError(f"payload has {len(payload)} bytes, header says {header.get('payload_bytes')}")
    if zlib.crc32(payload) != header.get("crc32"):
        raise RecordError("payload checksum mismatch")
    arrays, pos = {}, 0
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        arrays[spec["name"]] = np.frombuffer(payload[pos:pos + nbytes], dtype="<f8").reshape(shape).astype(float)
        pos += nbytes
    return header, arrays


@dataclass
class Snapshot:
    """A stored field with provenance.

    ``arrays`` holds ``u`` (and ``p``) for ``dns``/``les`` records and ``U_bar``,
    ``w`` for ``coarse_target`` records. ``meta`` carries the normalization
    constants ``urms0``, ``t_l0``, ``eps0`` and any stage-specific fields.
    """

    kind: str
    grid: GridSpec
    time: float
    viscosity: float
    density: float
    arrays: dict[str, np.ndarray]
    case_id: str = ""
    seed: int | None = None
    config_hash: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in SNAPSHOT_KINDS:
            raise ValueError(f"unknown snapshot kind {self.kind!r}")

    def to_bytes(self) -> bytes:
        header = {
            "format": "dpm-snapshot",
            "kind": self.kind,
            "n": self.grid.n,
            "domain_length": self.grid.domain_length,
            "time": self.time,
            "viscosity": self.viscosity,
            "density": self.density,
            "case_id": self.case_id,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "meta": self.meta,
        }
        return pack_record(SNAPSHOT_MAGIC, header, self.arrays)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Snapshot":
        h, arrays = unpack_record(blob, SNAPSHOT_MAGIC)
        return cls(kind=h["kind"], grid=GridSpec(h["n"], h["domain_length"]), time=h["time"],
                   viscosity=h["viscosity"], density=h["density"], arrays=arrays,
                   case_id=h["case_id"], seed=h["seed"], config_hash=h["config_hash"], meta=h["meta"])


def write_snapshot(snap: Snapshot, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".part")
    tmp.write_bytes(snap.to_bytes())
    tmp.replace(path)


def read_snapshot(path) -> Snapshot:
    return Snapshot.from_bytes(Path(path).read_bytes())
