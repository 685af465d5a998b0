"""TDNQ binary model format.

All integers little-endian::

    magic      4s   b"TDNQ"
    version    u16
    reserved   u16
    meta_len   u32, then meta_len bytes of UTF-8 JSON {name, head_kind, metadata}
    n_layers   u32  (hidden layers + head, head last)
    per layer:
        kind u8 (0 dense, 1 factorized), has_bn u8, has_act_q u8, has_out_q u8
        n_ctx u32, n_ctx x i32 context offsets
        weight tensors ("weights", or "factor_a" then "factor_b"), bias,
        [bn_scale, bn_shift], [act qparams], [out qparams]
    crc32      u32  over every preceding byte

    tensor:  dtype u8 (0 float32, 1 int8, 2 int16), ndim u8, ndim x u32 shape,
             [qparams if integer], payload
    qparams: scale f64, zero_point i32, bits u8, mode u8 (0 symmetric, 1 asymmetric)

Weight tensors that carry a ``weight_qparams`` grid are stored as their integer
codes, so an 8-bit file's weight payload is exactly a quarter of the float32 one.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .quant_core import QuantizedTensor, QuantParams, dequantize, quantize, storage_dtype
from .tdnn import FactorizedLayer, TdnnLayer, TdnnModel

MAGIC = b"TDNQ"
FORMAT_VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i1"), 2: np.dtype("<i2")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.int8): 1, np.dtype(np.int16): 2}
_MODES = ("symmetric", "asymmetric")


class ModelFormatError(ValueError):
    """A model file could not be parsed; ``section`` names where it failed."""

    def __init__(self, section: str, message: str):
        super().__init__(f"{section}: {message}")
        self.section = section


@dataclass(frozen=True)
class Section:
    name: str
    offset: int
    nbytes: int
    is_weight: bool = False


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()
        self.sections: list[Section] = []

    def pack(self, fmt, *vals):
        self.buf.write(struct.pack("<" + fmt, *vals))

    def qparams(self, p: QuantParams):
        self.pack("diBB", p.scale, p.zero_point, p.bits, _MODES.index(p.mode))

    def tensor(self, name, arr, params: QuantParams | None = None, is_weight=False):
        if params is not None:
            q = quantize(arr, params)
            if not np.array_equal(dequantize(q).astype(np.float32), arr):
                raise ValueError(f"{name} is not on its declared quantization grid")
            payload = q.data
        else:
            payload = np.asarray(arr, dtype=np.float32)
        self.pack("BB", _DTYPE_CODES[payload.dtype], payload.ndim)
        self.pack(f"{payload.ndim}I", *payload.shape)
        if params is not None:
            self.qparams(params)
        raw = payload.astype(payload.dtype.newbyteorder("<")).tobytes()
        self.sections.append(Section(name, self.buf.tell(), len(raw), is_weight))
        self.buf.write(raw)


def _encode(model: TdnnModel) -> tuple[bytes, list[Section]]:
    w = _Writer()
    w.buf.write(MAGIC)
    w.pack("HH", FORMAT_VERSION, 0)
    meta = json.dumps(
        {"name": model.name, "head_kind": model.head_kind, "metadata": model.metadata}, sort_keys=True
    ).encode()
    w.pack("I", len(meta))
    w.buf.write(meta)
    w.pack("I", len(model.all_layers))
    for i, layer in enumerate(model.all_layers):
        w.pack(
            "BBBB",
            0 if layer.factors is None else 1,
            int(layer.has_bn),
            int(layer.act_qparams is not None),
            int(layer.out_qparams is not None),
        )
        w.pack("I", len(layer.context))
        w.pack(f"{len(layer.context)}i", *layer.context)
        for key, arr in layer.weight_tensors().items():
            w.tensor(f"layer {i} {key}", arr, layer.weight_qparams.get(key), is_weight=True)
        w.tensor(f"layer {i} bias", layer.bias)
        if layer.has_bn:
            w.tensor(f"layer {i} bn_scale", layer.bn_scale)
            w.tensor(f"layer {i} bn_shift", layer.bn_shift)
        if layer.act_qparams is not None:
            w.qparams(layer.act_qparams)
        if layer.out_qparams is not None:
            w.qparams(layer.out_qparams)
    body = w.buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body)), w.sections


def to_bytes(model: TdnnModel) -> bytes:
    return _encode(model)[0]


def save_model(model: TdnnModel, path) -> int:
    """Write ``model`` to ``path``; returns the number of bytes written."""
    data = to_bytes(model)
    Path(path).write_bytes(data)
    return len(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.sections: list[Section] = []

    def take(self, n: int, section: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFormatError(section, f"truncated: need {n} bytes at offset {self.pos}, file ends at {len(self.data)}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, section: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), section))

    def qparams(self, section: str) -> QuantParams:
        scale, zp, bits, mode = self.unpack("diBB", section)
        if mode >= len(_MODES):
            raise ModelFormatError(section, f"unknown quantization mode code {mode}")
        try:
            return QuantParams(scale, zp, bits, _MODES[mode])
        except ValueError as e:
            raise ModelFormatError(section, str(e)) from None

    def tensor(self, section: str, is_weight=False) -> tuple[np.ndarray, QuantParams | None]:
        code, ndim = self.unpack("BB", section)
        if code not in _DTYPES:
            raise ModelFormatError(section, f"unknown dtype code {code}")
        shape = self.unpack(f"{ndim}I", section)
        params = self.qparams(section) if code != 0 else None
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        offset = self.pos
        raw = self.take(n, section)
        self.sections.append(Section(section, offset, n, is_weight))
        arr = np.frombuffer(raw, dtype=dt).reshape(shape)
        if params is None:
            return arr.astype(np.float32), None
        if dt != storage_dtype(params.bits).newbyteorder("<"):
            raise ModelFormatError(section, f"{dt} payload cannot hold {params.bits}-bit codes")
        if arr.size and (arr.min() < params.qmin or arr.max() > params.qmax):
            raise ModelFormatError(section, "integer codes outside the declared range")
        real = dequantize(QuantizedTensor(arr.astype(storage_dtype(params.bits)), params))
        return real.astype(np.float32), params


def _decode(data: bytes) -> tuple[TdnnModel, list[Section]]:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise ModelFormatError("magic", "not a TDNQ model file")
    version, _ = r.unpack("HH", "version")
    if version != FORMAT_VERSION:
        raise ModelFormatError("version", f"unsupported format version {version} (expected {FORMAT_VERSION})")
    (meta_len,) = r.unpack("I", "metadata")
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelFormatError("metadata", f"bad JSON header: {e}") from None
    (n_layers,) = r.unpack("I", "layer table")
    if n_layers < 1:
        raise ModelFormatError("layer table", "a model needs at least the output head")
    layers = []
    for i in range(n_layers):
        sec = f"layer {i}"
        kind, has_bn, has_act, has_out = r.unpack("BBBB", f"{sec} header")
        (n_ctx,) = r.unpack("I", f"{sec} header")
        ctx = r.unpack(f"{n_ctx}i", f"{sec} context")
        wq = {}
        if kind == 0:
            weights, p = r.tensor(f"{sec} weights", True)
            factors = None
            if p is not None:
                wq["weights"] = p
        elif kind == 1:
            a, pa = r.tensor(f"{sec} factor_a", True)
            b, pb = r.tensor(f"{sec} factor_b", True)
            weights, factors = None, None
            try:
                factors = FactorizedLayer(a, b)
            except ValueError as e:
                raise ModelFormatError(f"{sec} factors", str(e)) from None
            if pa is not None:
                wq["factor_a"] = pa
            if pb is not None:
                wq["factor_b"] = pb
        else:
            raise ModelFormatError(f"{sec} header", f"unknown layer kind {kind}")
        bias, _ = r.tensor(f"{sec} bias")
        bn_scale = bn_shift = None
        if has_bn:
            bn_scale, _ = r.tensor(f"{sec} bn_scale")
            bn_shift, _ = r.tensor(f"{sec} bn_shift")
        act = r.qparams(f"{sec} act qparams") if has_act else None
        out = r.qparams(f"{sec} out qparams") if has_out else None
        try:
            layers.append(TdnnLayer(weights, bias, ctx, bn_scale, bn_shift, factors, wq, act, out))
        except ValueError as e:
            raise ModelFormatError(sec, f"inconsistent dimensions: {e}") from None
    body_end = r.pos
    (crc,) = r.unpack("I", "checksum")
    if r.pos != len(data):
        raise ModelFormatError("checksum", f"{len(data) - r.pos} trailing bytes after checksum")
    if zlib.crc32(data[:body_end]) != crc:
        raise ModelFormatError("checksum", "CRC mismatch, file is corrupt")
    try:
        model = TdnnModel(tuple(layers[:-1]), layers[-1], meta["head_kind"], meta["name"], meta.get("metadata", {}))
    except (KeyError, ValueError) as e:
        raise ModelFormatError("layer table", f"inconsistent model: {e}") from None
    return model, r.sections


def from_bytes(data: bytes) -> TdnnModel:
    return _decode(data)[0]


def load_model(path) -> TdnnModel:
    return from_bytes(Path(path).read_bytes())


def file_sections(path_or_bytes) -> list[Section]:
    """Payload sections of a model file with their byte offsets and sizes."""
    data = path_or_bytes if isinstance(path_or_bytes, (bytes, bytearray)) else Path(path_or_bytes).read_bytes()
    return _decode(bytes(data))[1]


def weight_payload_bytes(path_or_model) -> int:
    """Total bytes of weight payloads, excluding headers, biases and batch-norm vectors."""
    if isinstance(path_or_model, TdnnModel):
        sections = _encode(path_or_model)[1]
    else:
        sections = file_sections(path_or_model)
    return sum(s.nbytes for s in sections if s.is_weight)


# -- feature and label files ----------------------------------------------------
#
# ``.npz``: either a ``features`` array of shape (U, T, D) with an optional
# ``labels`` array (U, T), or one 2-D array per utterance under keys sorted by
# name (labels then live in a separate file with matching keys).
# ``.txt``: one frame per row, whitespace separated; a blank line ends an
# utterance. Label text files hold one integer per row in the same layout.


def _txt_blocks(path) -> list[list[str]]:
    blocks, cur = [], []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            cur.append(line)
        elif cur:
            blocks.append(cur)
            cur = []
    if cur:
        blocks.append(cur)
    return blocks


def _load(path, key: str, dtype) -> list[np.ndarray]:
    path = Path(path)
    if path.suffix == ".txt":
        out = []
        for block in _txt_blocks(path):
            rows = [np.array(line.split(), dtype=dtype) for line in block]
            if len({r.size for r in rows}) != 1:
                raise ValueError(f"{path}: rows of one utterance differ in width")
            arr = np.stack(rows)
            out.append(arr[:, 0] if key == "labels" else arr)
        return out
    with np.load(path) as z:
        if key in z.files:
            return list(z[key].astype(dtype))
        if key == "labels" and "features" in z.files:
            raise ValueError(f"{path} has no labels array")
        return [z[k].astype(dtype) for k in sorted(z.files) if k not in ("features", "labels")]


def load_features(path) -> list[np.ndarray]:
    """Utterances as a list of (T, D) float32 matrices."""
    utts = _load(path, "features", np.float32)
    if not utts:
        raise ValueError(f"{path} contains no utterances")
    for u in utts:
        if u.ndim != 2:
            raise ValueError(f"{path}: every utterance must be (T, D), got {u.shape}")
    return utts


def load_labels(path) -> list[np.ndarray]:
    return [np.asarray(u, dtype=np.int64).reshape(-1) for u in _load(path, "labels", np.int64)]


def save_features(path, features, labels=None) -> None:
    """Write equal-length utterances as ``.npz`` (stacked) or ``.txt``."""
    path = Path(path)
    if path.suffix == ".txt":
        blocks = []
        for u in features:
            blocks.append("\n".join(" ".join(repr(float(v)) for v in row) for row in np.asarray(u, np.float32)))
        path.write_text("\n\n".join(blocks) + "\n")
        return
    arrays = {"features": np.asarray(features, dtype=np.float32)}
    if labels is not None:
        arrays["labels"] = np.asarray(labels, dtype=np.int64)
    with open(path, "wb") as f:
        np.savez(f, **arrays)
