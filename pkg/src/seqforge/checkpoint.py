"""Versioned, self-checking checkpoint files.

Layout (all integers little-endian)::

    magic      4 bytes  b"SQFG"
    version    u32
    nsections  u32
    table      nsections x (name: 16 bytes NUL-padded ASCII,
                            offset: u64, length: u64, checksum: u64)
    sections   raw bytes at the offsets named in the table

Sections: ``meta`` (``key = <json>`` lines), ``manifest`` (one
``name<TAB>shape<TAB>offset`` line per tensor, offsets in elements),
``payload`` (float32 values, concatenated in manifest order) and the
dictionaries ``dict.src`` / ``dict.tgt`` in dictionary-file format. The
checksum is the 8-byte BLAKE2b digest of the section, read as a u64.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from seqforge.numerics.rng import RNG_ALGORITHM
from seqforge.registry import Config

MAGIC = b"SQFG"
CURRENT_VERSION = 2
_HEADER = struct.Struct("<4sII")
_ENTRY = struct.Struct("<16sQQQ")


class CheckpointError(Exception):
    pass


class IntegrityError(CheckpointError):
    pass


class ForwardIncompatibleError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


@dataclass
class TrainState:
    """Everything needed to continue a run bit-for-bit."""

    config: Config
    manifest: list  # (name, shape) in canonical order
    params: np.ndarray  # FP32 master, flat
    optimizer: dict  # name, t, and optional flat moment vectors m, v
    scheduler: dict  # num_updates
    scaler: Optional[dict]
    step: int
    cursor: tuple[int, int]  # (epoch, next batch ordinal)
    rng: dict = field(default_factory=dict)  # name -> (seed, stream_id, counter)
    dictionaries: dict = field(default_factory=dict)  # "src"/"tgt" -> dictionary lines
    upgrades: list = field(default_factory=list, compare=False)

    def equals(self, other: TrainState) -> bool:
        def same_opt(a, b):
            if a.keys() != b.keys():
                return False
            return all(
                np.array_equal(a[k], b[k]) if isinstance(a[k], np.ndarray) else a[k] == b[k] for k in a
            )

        return (
            self.config == other.config
            and [(n, tuple(s)) for n, s in self.manifest] == [(n, tuple(s)) for n, s in other.manifest]
            and np.array_equal(self.params, other.params)
            and same_opt(self.optimizer, other.optimizer)
            and self.scheduler == other.scheduler
            and self.scaler == other.scaler
            and self.step == other.step
            and tuple(self.cursor) == tuple(other.cursor)
            and {k: tuple(v) for k, v in self.rng.items()} == {k: tuple(v) for k, v in other.rng.items()}
            and self.dictionaries == other.dictionaries
        )


# -- the key/value tree --------------------------------------------------------


@dataclass
class Tree:
    """Version-neutral checkpoint contents: scalars, tensors and text blobs."""

    meta: dict
    tensors: dict  # name -> ndarray (shape kept)
    texts: dict  # section name -> str


def state_to_tree(state: TrainState) -> Tree:
    meta: dict = {"format.rng_algorithm": RNG_ALGORITHM}
    for k in sorted(state.config.keys()):
        meta[f"config.{k}"] = state.config[k]
        meta[f"provenance.{k}"] = state.config.provenance[k]
    meta["train.step"] = state.step
    meta["train.epoch"], meta["train.ordinal"] = int(state.cursor[0]), int(state.cursor[1])
    meta["optimizer.name"] = state.optimizer["name"]
    meta["optimizer.t"] = int(state.optimizer["t"])
    meta["scheduler.num_updates"] = int(state.scheduler["num_updates"])
    meta["loss_scaler.enabled"] = state.scaler is not None
    for k, v in (state.scaler or {}).items():
        meta[f"loss_scaler.{k}"] = v
    for name in sorted(state.rng):
        meta[f"rng.{name}"] = [int(x) for x in state.rng[name]]
    tensors = {}
    off = 0
    for name, shape in state.manifest:
        n = int(np.prod(shape))
        tensors[f"param.{name}"] = state.params[off : off + n].reshape(shape)
        off += n
    if off != state.params.size:
        raise ValueError("manifest does not cover the parameter vector")
    for k in ("m", "v"):
        if k in state.optimizer:
            tensors[f"optimizer.{k}"] = np.asarray(state.optimizer[k])
    texts = {f"dict.{k}": "".join(line + "\n" for line in v) for k, v in state.dictionaries.items()}
    return Tree(meta, tensors, texts)


def tree_to_state(tree: Tree) -> TrainState:
    m = tree.meta
    cfg = Config()
    for key, val in m.items():
        if key.startswith("config."):
            k = key[len("config.") :]
            cfg.set(k, val, m.get(f"provenance.{k}", "user"))
    manifest, parts = [], []
    for name, arr in tree.tensors.items():
        if name.startswith("param."):
            manifest.append((name[len("param.") :], tuple(arr.shape)))
            parts.append(np.asarray(arr, dtype=np.float64).reshape(-1))
    opt = {"name": m["optimizer.name"], "t": int(m["optimizer.t"])}
    for k in ("m", "v"):
        if f"optimizer.{k}" in tree.tensors:
            opt[k] = np.asarray(tree.tensors[f"optimizer.{k}"], dtype=np.float64).reshape(-1)
    scaler = None
    if m.get("loss_scaler.enabled"):
        scaler = {k[len("loss_scaler.") :]: v for k, v in m.items() if k.startswith("loss_scaler.") and k != "loss_scaler.enabled"}
    rng = {k[len("rng.") :]: tuple(v) for k, v in m.items() if k.startswith("rng.")}
    dicts = {k[len("dict.") :]: v.splitlines() for k, v in tree.texts.items() if k.startswith("dict.")}
    return TrainState(
        cfg,
        manifest,
        np.concatenate(parts) if parts else np.zeros(0),
        opt,
        {"num_updates": int(m["scheduler.num_updates"])},
        scaler,
        int(m["train.step"]),
        (int(m["train.epoch"]), int(m["train.ordinal"])),
        rng,
        dicts,
    )


# -- upgrade chain ---------------------------------------------------------------


@dataclass(frozen=True)
class UpgradeRule:
    from_version: int
    to_version: int
    description: str
    apply: Callable[[Tree], Tree]


def _v1_to_v2(tree: Tree) -> Tree:
    # v1 had no configurable scale window; it always used 256.
    meta = dict(tree.meta)
    meta.setdefault("loss_scaler.window", 256)
    return Tree(meta, dict(tree.tensors), dict(tree.texts))


UPGRADE_RULES: dict[int, UpgradeRule] = {
    1: UpgradeRule(1, 2, "adds loss_scaler.window (default 256)", _v1_to_v2),
}


def upgrade(tree: Tree, from_version: int, rules=None, log: Optional[list] = None) -> Tree:
    """Apply rules from ``from_version`` up to the current version, in order."""
    rules = UPGRADE_RULES if rules is None else rules
    if from_version > CURRENT_VERSION:
        raise ForwardIncompatibleError(f"checkpoint version {from_version} is newer than {CURRENT_VERSION}")
    v = from_version
    while v < CURRENT_VERSION:
        rule = rules.get(v)
        if rule is None:
            raise UnsupportedVersionError(f"no upgrade rule from checkpoint version {v}")
        tree = rule.apply(tree)
        if log is not None:
            log.append((rule.from_version, rule.to_version))
        v = rule.to_version
    return tree


# -- bytes -----------------------------------------------------------------------


def _checksum(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def _encode_meta(meta: dict) -> bytes:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in meta.items()).encode("utf-8")


def _decode_meta(data: bytes) -> dict:
    meta = {}
    for line in data.decode("utf-8").splitlines():
        if line:
            k, v = line.split(" = ", 1)
            meta[k] = json.loads(v)
    return meta


def encode_tree(tree: Tree, version: int = CURRENT_VERSION) -> bytes:
    manifest_lines, payload, off = [], [], 0
    for name, arr in tree.tensors.items():
        arr = np.asarray(arr)
        shape = ",".join(str(d) for d in arr.shape)
        manifest_lines.append(f"{name}\t{shape}\t{off}\n")
        payload.append(np.asarray(arr, dtype="<f4").reshape(-1).tobytes())
        off += arr.size
    sections = [
        ("meta", _encode_meta(tree.meta)),
        ("manifest", "".join(manifest_lines).encode("utf-8")),
        ("payload", b"".join(payload)),
    ] + [(name, text.encode("utf-8")) for name, text in sorted(tree.texts.items())]
    head = _HEADER.size + _ENTRY.size * len(sections)
    table, offset = [], head
    for name, data in sections:
        table.append(_ENTRY.pack(name.encode("ascii").ljust(16, b"\0"), offset, len(data), _checksum(data)))
        offset += len(data)
    return _HEADER.pack(MAGIC, version, len(sections)) + b"".join(table) + b"".join(d for _, d in sections)


def decode_bytes(blob: bytes) -> tuple[int, Tree]:
    if len(blob) < _HEADER.size:
        raise IntegrityError("file shorter than the header")
    magic, version, n = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise IntegrityError(f"bad magic {magic!r}")
    if version > CURRENT_VERSION:
        raise ForwardIncompatibleError(f"checkpoint version {version} is newer than this engine ({CURRENT_VERSION})")
    if _HEADER.size + n * _ENTRY.size > len(blob):
        raise IntegrityError("section table truncated")
    sections = {}
    for i in range(n):
        raw, off, length, crc = _ENTRY.unpack_from(blob, _HEADER.size + i * _ENTRY.size)
        name = raw.rstrip(b"\0").decode("ascii", errors="replace")
        if off + length > len(blob):
            raise IntegrityError(f"section {name!r} runs past the end of the file")
        data = blob[off : off + length]
        if _checksum(data) != crc:
            raise IntegrityError(f"checksum mismatch in section {name!r}")
        sections[name] = data
    for required in ("meta", "manifest", "payload"):
        if required not in sections:
            raise IntegrityError(f"missing section {required!r}")
    try:
        meta = _decode_meta(sections["meta"])
    except (ValueError, UnicodeDecodeError) as e:
        raise IntegrityError(f"unreadable meta section: {e}") from e
    payload = np.frombuffer(sections["payload"], dtype="<f4")
    tensors, expected = {}, 0
    for line in sections["manifest"].decode("utf-8", errors="replace").splitlines():
        try:
            name, shape_s, off_s = line.split("\t")
            shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
            off, count = int(off_s), int(np.prod(shape))
        except ValueError as e:
            raise IntegrityError(f"malformed manifest line {line!r}") from e
        if off != expected or off + count > payload.size:
            raise IntegrityError(f"manifest entry {name!r} does not match the payload")
        tensors[name] = payload[off : off + count].astype(np.float64).reshape(shape)
        expected = off + count
    if expected != payload.size:
        raise IntegrityError("payload has trailing values not named in the manifest")
    texts = {k: v.decode("utf-8") for k, v in sections.items() if k.startswith("dict.")}
    return version, Tree(meta, tensors, texts)


def save(state: TrainState, path) -> None:
    """Write atomically: a temp file in the target directory, then rename."""
    path = Path(path)
    blob = encode_tree(state_to_tree(state))
    tmp = None
    try:
        fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
        tmp = None
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    finally:
        if tmp is not None and os.path.exists(tmp):
            os.unlink(tmp)


def load(path) -> TrainState:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    version, tree = decode_bytes(blob)
    applied: list = []
    tree = upgrade(tree, version, log=applied)
    try:
        state = tree_to_state(tree)
    except (KeyError, ValueError, TypeError) as e:
        raise IntegrityError(f"checkpoint {path} is missing required fields: {e}") from e
    state.upgrades = applied
    return state
