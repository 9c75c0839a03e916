"""Binary model file: a packed, inference-only form of a decoded network.

Layout (all integers little-endian)::

    b"BARS" | u32 version
    u32 n | genotype JSON (n bytes) | u32 n | search-space JSON (n bytes)
    u32 count | binary layer records
    u32 count | full-precision tensor records

A binary layer record holds the module name, its geometry (c_out, c_in,
kernel, stride, padding as u32), beta (f32), batchnorm eps (f64), the four
batchnorm vectors (f32, c_out each) and the packed sign words (u32 count,
then u64 words with the channel axis innermost and zero tail bits).
Full-precision records (stem, classifier and every batchnorm that does not
follow a binary conv) hold a name, u32 ndim, u32 dims and f32 data.
"""

import io
import json
import struct

import numpy as np

from .binarize import PackedLayer, PackedTensor
from .search_space import DerivedNet, Genotype, SearchSpaceConfig

MAGIC = b"BARS"
FORMAT_VERSION = 1


def _put_bytes(buf, b):
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def _put_str(buf, s):
    _put_bytes(buf, s.encode("utf-8"))


def _json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _fp_tensors(model):
    """Parameters and buffers that stay floating point after export."""
    binary = {name for name, _ in model.binary_layers()}

    def inside_binary(name):
        return any(name == b or name.startswith(b + ".") for b in binary)

    out = [(f"param:{k}", v.data) for k, v in model.named_parameters() if not inside_binary(k)]
    out += [(f"buffer:{k}", v) for k, v in model.named_buffers() if not inside_binary(k)]
    return out


def dumps_model(model):
    """Serialize an exported ``DerivedNet`` to bytes (deterministic)."""
    if not isinstance(model, DerivedNet) or not model.is_packed:
        raise ValueError("dumps_model: export() the decoded network first")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    _put_str(buf, _json(model.genotype.to_dict()))
    _put_str(buf, _json(model.config.to_dict()))
    layers = model.binary_layers()
    buf.write(struct.pack("<I", len(layers)))
    for name, m in layers:
        p = m.packed
        _put_str(buf, name)
        buf.write(struct.pack("<5I", p.c_out, p.c_in, p.kernel, p.stride, p.padding))
        buf.write(struct.pack("<f", float(p.beta)))
        buf.write(struct.pack("<d", float(p.bn_eps)))
        for arr in (p.bn_gamma, p.bn_beta, p.bn_mean, p.bn_var):
            buf.write(np.asarray(arr, dtype="<f4").tobytes())
        words = np.ascontiguousarray(p.weights.words, dtype="<u8")
        buf.write(struct.pack("<I", words.size))
        buf.write(words.tobytes())
    fp = _fp_tensors(model)
    buf.write(struct.pack("<I", len(fp)))
    for name, arr in fp:
        arr = np.asarray(arr)
        _put_str(buf, name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, blob):
        self.blob, self.pos = blob, 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise ValueError(f"model file truncated at byte {self.pos} (needed {n} more)")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self):
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def array(self, dtype, count):
        return np.frombuffer(self.take(np.dtype(dtype).itemsize * count), dtype=dtype, count=count)


def loads_model(blob):
    """Rebuild a packed ``DerivedNet`` from bytes written by ``dumps_model``."""
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise ValueError("not a BARS model file (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version}")
    genotype = Genotype.from_dict(json.loads(r.string()))
    config = SearchSpaceConfig.from_dict(json.loads(r.string())).validate()
    model = DerivedNet(config, genotype)
    modules = dict(model.binary_layers())
    (n_layers,) = r.unpack("<I")
    if n_layers != len(modules):
        raise ValueError(f"model file has {n_layers} binary layers, genotype decodes to {len(modules)}")
    for _ in range(n_layers):
        name = r.string()
        if name not in modules:
            raise ValueError(f"model file names unknown layer {name!r}")
        c_out, c_in, k, stride, padding = r.unpack("<5I")
        m = modules[name]
        if (m.c_out, m.c_in, m.conv.weight.shape[2]) != (c_out, c_in, k):
            raise ValueError(f"layer {name}: stored geometry {(c_out, c_in, k)} does not match the genotype")
        (beta,) = r.unpack("<f")
        (eps,) = r.unpack("<d")
        gamma, bn_beta, mean, var = (r.array("<f4", c_out).astype(np.float32) for _ in range(4))
        (n_words,) = r.unpack("<I")
        nw = -(-c_in // 64)
        if n_words != c_out * k * k * nw:
            raise ValueError(f"layer {name}: {n_words} weight words, expected {c_out * k * k * nw}")
        words = r.array("<u8", n_words).astype(np.uint64).reshape(c_out, k, k, nw)
        m.packed = PackedLayer(
            PackedTensor((c_out, c_in, k, k), 1, words), stride, padding,
            np.array(beta, dtype=np.float32), gamma, bn_beta, mean, var, eps,
        )
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    (n_fp,) = r.unpack("<I")
    for _ in range(n_fp):
        name = r.string()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        arr = r.array("<f4", int(np.prod(shape, dtype=np.int64))).reshape(shape)
        kind, key = name.split(":", 1)
        target = params[key].data if kind == "param" else buffers[key]
        target[...] = arr
    if r.pos != len(blob):
        raise ValueError(f"model file has {len(blob) - r.pos} trailing bytes")
    model.eval()
    return model


def save_model(path, model):
    blob = dumps_model(model)
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def load_model(path):
    with open(path, "rb") as fh:
        return loads_model(fh.read())
