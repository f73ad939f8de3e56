"""Persistent, content-addressed artifact store.

Blobs live under ``<root>/objects/<aa>/<sha256>``; human-readable keys map
to digests through small files under ``<root>/refs/``.  Writes go to a
temporary file and are renamed into place, so concurrent readers never
observe partial blobs.

Any dataclass registered with :func:`register` can be stored.  Array
fields are written as raw little-endian bytes (bit-exact round trip),
other fields as JSON.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import MissingKeyError, StoreError, VersionMismatchError

STORE_ENV = "ASVMIMIC_STORE"
DEFAULT_ROOT = "asvmimic-store"
MAGIC = b"ASVM"

_REGISTRY: dict[str, type] = {}


def register(cls):
    """Class decorator making a dataclass storable.

    The class must define ``STORE_VERSION``; bump it whenever the field
    layout changes so stale blobs are rejected on load.
    """
    if not dataclasses.is_dataclass(cls):
        raise TypeError(f"{cls.__name__} is not a dataclass")
    if not hasattr(cls, "STORE_VERSION"):
        raise TypeError(f"{cls.__name__} lacks STORE_VERSION")
    _REGISTRY[cls.__name__] = cls
    return cls


def dumps(obj) -> bytes:
    cls = type(obj)
    if _REGISTRY.get(cls.__name__) is not cls:
        raise StoreError(f"type {cls.__name__} is not registered for storage")
    fields, arrays, chunks = {}, [], []
    offset = 0
    for f in dataclasses.fields(obj):
        if not f.init:
            continue
        value = getattr(obj, f.name)
        if isinstance(value, np.ndarray):
            a = np.ascontiguousarray(value)
            if a.dtype.byteorder == ">":
                a = a.astype(a.dtype.newbyteorder("<"))
            raw = a.tobytes()
            arrays.append({"name": f.name, "dtype": a.dtype.str, "shape": list(a.shape),
                           "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
        else:
            fields[f.name] = value
    header = {"type": cls.__name__, "version": cls.STORE_VERSION,
              "fields": fields, "arrays": arrays}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(chunks)


# modules whose import registers the storable types
_MODEL_MODULES = ("embedding", "backend", "system")


def _lookup(name):
    if name not in _REGISTRY:
        import importlib
        for mod in _MODEL_MODULES:
            importlib.import_module(f"{__package__}.{mod}")
    return _REGISTRY.get(name)


def loads(blob: bytes):
    if blob[:4] != MAGIC:
        raise StoreError("not an asvmimic blob")
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8:8 + hlen])
    cls = _lookup(header["type"])
    if cls is None:
        raise StoreError(f"unknown stored type {header['type']!r}")
    if header["version"] != cls.STORE_VERSION:
        raise VersionMismatchError(
            f"{header['type']} blob has version {header['version']}, "
            f"this build reads version {cls.STORE_VERSION}")
    base = 8 + hlen
    kwargs = dict(header["fields"])
    for a in header["arrays"]:
        start = base + a["offset"]
        buf = blob[start:start + a["nbytes"]]
        kwargs[a["name"]] = np.frombuffer(buf, dtype=np.dtype(a["dtype"])).reshape(a["shape"]).copy()
    return cls(**kwargs)


def digest(obj) -> str:
    return hashlib.sha256(dumps(obj)).hexdigest()


def _atomic_write(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Store:
    """Key/value store of registered model and embedding types."""

    def __init__(self, root=None):
        if root is None:
            root = os.environ.get(STORE_ENV, DEFAULT_ROOT)
        self.root = Path(root)

    def _ref(self, key):
        if not key or key.startswith("/") or ".." in key.split("/"):
            raise StoreError(f"invalid key {key!r}")
        return self.root / "refs" / (key + ".ref")

    def _obj(self, sha):
        return self.root / "objects" / sha[:2] / sha

    def put(self, key: str, obj) -> str:
        blob = dumps(obj)
        sha = hashlib.sha256(blob).hexdigest()
        target = self._obj(sha)
        if not target.exists():
            _atomic_write(target, blob)
        _atomic_write(self._ref(key), sha.encode())
        return sha

    def digest(self, key: str) -> str:
        ref = self._ref(key)
        if not ref.exists():
            raise MissingKeyError(f"no artifact stored under key {key!r}")
        return ref.read_text().strip()

    def get(self, key: str):
        sha = self.digest(key)
        path = self._obj(sha)
        try:
            blob = path.read_bytes()
        except FileNotFoundError:
            raise StoreError(f"key {key!r} points at missing object {sha}") from None
        if hashlib.sha256(blob).hexdigest() != sha:
            raise StoreError(f"object {sha} is corrupt")
        return loads(blob)

    def has(self, key: str) -> bool:
        return self._ref(key).exists()

    def keys(self, prefix=""):
        base = self.root / "refs"
        if not base.exists():
            return []
        out = []
        for p in sorted(base.rglob("*.ref")):
            k = p.relative_to(base).as_posix()[:-4]
            if k.startswith(prefix):
                out.append(k)
        return out
