"""PALCKPT1 named-tensor archives.

Layout (little-endian): magic, u32 version, u32-length-prefixed JSON metadata,
then one record per tensor: u32 name length, name bytes, u32 rank, u32 extents,
float32 data. Records run to end of file.
"""
import collections
import io
import json
import logging

import attr
import numpy as np

from .util import PalError

logger = logging.getLogger(__name__)

MAGIC = b'PALCKPT1'
VERSION = 1


class CheckpointError(PalError):
    pass


def _u32(*values):
    return np.array(values, dtype='<u4').tobytes()


class _Reader:
    def __init__(self, data, source):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.source}: truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count=1):
        return [int(v) for v in np.frombuffer(self.take(4 * count), '<u4')]

    @property
    def done(self):
        return self.pos >= len(self.data)


@attr.s
class Checkpoint:
    metadata = attr.ib(factory=dict)
    tensors = attr.ib(factory=collections.OrderedDict)
    version = attr.ib(default=VERSION)

    @classmethod
    def from_params(cls, params, metadata=None, prefix=''):
        tensors = collections.OrderedDict(
            (prefix + name, np.asarray(p.data, dtype=np.float32).copy()) for name, p in params.items())
        return cls(metadata=dict(metadata or {}), tensors=tensors)

    def __contains__(self, name):
        return name in self.tensors

    def names(self):
        return list(self.tensors)

    def subset(self, prefix):
        """Tensors under `prefix`, with the prefix stripped."""
        return collections.OrderedDict(
            (name[len(prefix):], arr) for name, arr in self.tensors.items() if name.startswith(prefix))

    def require(self, names, prefix=''):
        missing = [prefix + name for name in names if prefix + name not in self.tensors]
        if missing:
            raise CheckpointError(f"checkpoint is missing tensors: {', '.join(missing)}")

    def to_bytes(self):
        buf = io.BytesIO()
        meta = json.dumps(self.metadata, sort_keys=True).encode('utf8')
        buf.write(MAGIC)
        buf.write(_u32(self.version, len(meta)))
        buf.write(meta)
        for name, arr in self.tensors.items():
            encoded = name.encode('utf8')
            buf.write(_u32(len(encoded)))
            buf.write(encoded)
            buf.write(_u32(arr.ndim, *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype='<f4').tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data, source='<bytes>'):
        if data[:len(MAGIC)] != MAGIC:
            raise CheckpointError(f"{source} is not a PALCKPT1 checkpoint")
        reader = _Reader(data, source)
        reader.take(len(MAGIC))
        version, meta_len = reader.u32(2)
        if version != VERSION:
            raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
        try:
            metadata = json.loads(reader.take(meta_len).decode('utf8'))
        except ValueError as e:
            raise CheckpointError(f"{source}: unreadable metadata ({e})")
        tensors = collections.OrderedDict()
        while not reader.done:
            name = reader.take(reader.u32()[0]).decode('utf8')
            rank = reader.u32()[0]
            shape = tuple(reader.u32(rank)) if rank else ()
            n = int(np.prod(shape, dtype=np.int64))
            tensors[name] = np.frombuffer(reader.take(4 * n), '<f4').reshape(shape).astype(np.float32)
        return cls(metadata=metadata, tensors=tensors, version=version)

    def save(self, filename):
        with open(filename, 'wb') as f:
            f.write(self.to_bytes())
        logger.info("Saved checkpoint with %d tensors to %s", len(self.tensors), filename)

    @classmethod
    def load(cls, filename):
        try:
            with open(filename, 'rb') as f:
                data = f.read()
        except FileNotFoundError:
            raise CheckpointError(f"no checkpoint at {filename}")
        return cls.from_bytes(data, source=str(filename))

    def describe(self):
        """One line per tensor: name and shape."""
        return [f"{name}\t{'x'.join(str(n) for n in arr.shape) or 'scalar'}" for name, arr in self.tensors.items()]
