"""Checkpoint persistence.

Layout (all integers little-endian):

    offset 0   magic "BQCK" (4 bytes)
    offset 4   version byte (currently 1)
    offset 5   manifest length, 8-byte unsigned
    offset 13  manifest: one UTF-8 JSON document (sorted keys)
    then       blob section; manifest offsets are relative to its start

Per weight tensor the manifest records ``{offset, length, encoding}`` with
encoding one of:

* ``fp32``  -- raw IEEE-754 little-endian floats;
* ``codes`` -- integer codes biased to [0, 2**bits - 1] and packed
  ``bits`` bits per value, LSB-first (quantization range stored alongside;
  the step is always recomputed from the range, never stored);
* ``bits``  -- packed signs: rows and cols as 8-byte unsigned integers,
  then 64-bit words row-major (+1 -> bit 1, LSB-first, zero tail padding).

Files are written atomically (temp file + rename).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from . import quant
from .bitkernels import BitTensor, pack_bits, unpack_bits
from .errors import CheckpointError
from .model import LayerSpec, Model, binary_alpha, weight_quant_params

MAGIC = b"BQCK"
VERSION = 1
_HEADER_LEN = 13  # magic + version + manifest length


def _params_to_json(p: quant.QuantParams) -> dict:
    def cvt(v: np.ndarray):
        return [float(x) for x in v] if v.ndim else float(v)

    out = {"scheme": p.scheme, "bits": p.bits, "l": cvt(p.lower), "u": cvt(p.upper)}
    if p.axis is not None:
        out["axis"] = p.axis
    return out


def _params_from_json(d: dict) -> quant.QuantParams:
    try:
        return quant.QuantParams(
            bits=d["bits"],
            lower=np.asarray(d["l"], dtype=np.float64),
            upper=np.asarray(d["u"], dtype=np.float64),
            scheme=d["scheme"],
            axis=d.get("axis"),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"invalid quantization params in manifest: {e}") from None


def pack_codes(values: np.ndarray, bits: int) -> bytes:
    """Pack non-negative ints < 2**bits, ``bits`` bits per value, LSB-first."""
    vals = values.reshape(-1).astype(np.uint32)
    shifts = np.arange(bits, dtype=np.uint32)
    bitmat = ((vals[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bitmat.reshape(-1), bitorder="little").tobytes()


def unpack_codes(buf: bytes, bits: int, count: int) -> np.ndarray:
    need = (count * bits + 7) // 8
    if len(buf) < need:
        raise CheckpointError(
            f"code blob too short: need {need} bytes for {count} x {bits}-bit codes"
        )
    flat = np.unpackbits(
        np.frombuffer(buf, dtype=np.uint8), bitorder="little", count=count * bits
    ).reshape(count, bits)
    weights = (np.int64(1) << np.arange(bits, dtype=np.int64))
    return (flat.astype(np.int64) * weights).sum(axis=1)


def _spread_int(p: quant.QuantParams, v: np.ndarray, ndim: int) -> np.ndarray:
    return np.asarray(p._spread(v, ndim), dtype=np.int64)


def _encode_weights(model: Model, i: int) -> tuple[str, bytes, dict | None]:
    spec = model.specs[i]
    w = model.weights[i]
    if spec.weight_bits == 32:
        return "fp32", np.ascontiguousarray(w, dtype="<f4").tobytes(), None
    if spec.weight_bits == 1:
        rows = w.shape[0]
        flat = quant.binarize(w).reshape(rows, -1)
        bt = pack_bits(flat)
        blob = struct.pack("<QQ", bt.rows, bt.cols) + bt.words.astype("<u8").tobytes()
        return "bits", blob, None
    params = weight_quant_params(model, i)
    q = quant.quantize(w, params)
    qmin, _ = params.code_bounds()
    offsets = q.codes.astype(np.int64) - _spread_int(params, qmin, q.codes.ndim)
    return "codes", pack_codes(offsets, spec.weight_bits), _params_to_json(params)


def _decode_weights(entry: dict, spec: LayerSpec, blob: bytes) -> tuple[np.ndarray, quant.QuantParams | None]:
    shape = spec.weight_shape()
    numel = int(np.prod(shape))
    encoding = entry.get("encoding")
    if encoding == "fp32":
        if len(blob) != 4 * numel:
            raise CheckpointError(
                f"fp32 blob length {len(blob)} does not match {numel} weights"
            )
        return np.frombuffer(blob, dtype="<f4").astype(np.float32).reshape(shape), None
    if encoding == "bits":
        if len(blob) < 16:
            raise CheckpointError("bit blob shorter than its 16-byte header")
        rows, cols = struct.unpack("<QQ", blob[:16])
        wpr = (cols + 63) // 64
        if rows * cols != numel or rows != shape[0]:
            raise CheckpointError(
                f"bit blob is {rows}x{cols} but layer expects shape {shape}"
            )
        if len(blob) != 16 + rows * wpr * 8:
            raise CheckpointError(
                f"bit blob length {len(blob)} does not match {rows}x{cols} packed words"
            )
        words = np.frombuffer(blob, dtype="<u8", offset=16).astype(np.uint64).reshape(
            rows, wpr
        )
        signs = unpack_bits(BitTensor(rows=int(rows), cols=int(cols), words=words))
        return signs.reshape(shape), None
    if encoding == "codes":
        if entry.get("quant") is None:
            raise CheckpointError("codes encoding requires quantization params")
        params = _params_from_json(entry["quant"])
        if params.bits != spec.weight_bits:
            raise CheckpointError(
                f"manifest quantization bits {params.bits} disagree with the "
                f"layer's weight_bits {spec.weight_bits}"
            )
        offsets = unpack_codes(blob, params.bits, numel).reshape(shape)
        qmin, _ = params.code_bounds()
        codes = (offsets + _spread_int(params, qmin, len(shape))).astype(np.int32)
        try:
            q = quant.QTensor(codes, params)
        except ValueError as e:
            raise CheckpointError(f"stored codes are invalid: {e}") from None
        return quant.dequantize(q), params
    raise CheckpointError(f"unknown weight encoding {encoding!r}")


def _spec_to_json(spec: LayerSpec) -> dict:
    out = {"kind": spec.kind}
    if spec.kind == "relu":
        return out
    if spec.kind == "linear":
        out["in_features"] = spec.in_features
        out["out_features"] = spec.out_features
    else:
        out.update(
            in_channels=spec.in_channels,
            out_channels=spec.out_channels,
            kh=spec.kh,
            kw=spec.kw,
            stride=spec.stride,
            padding=spec.padding,
        )
    out.update(
        weight_bits=spec.weight_bits,
        act_bits=spec.act_bits,
        scheme=spec.scheme,
        granularity=spec.granularity,
        binary_scale=spec.binary_scale,
    )
    return out


def _spec_from_json(entry: dict) -> LayerSpec:
    fields = {k: v for k, v in entry.items() if k not in ("weights", "act", "alpha")}
    try:
        return LayerSpec(**fields)
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"invalid layer entry in manifest: {e}") from None


def save_checkpoint(model: Model, path: str) -> None:
    """Serialize a model; quantized layers are written on-grid (codes or
    packed signs), FP32 layers as raw floats.  Atomic: temp file + rename."""
    blobs = bytearray()
    layers = []
    for i, spec in enumerate(model.specs):
        entry = _spec_to_json(spec)
        if spec.has_weights:
            encoding, blob, params_json = _encode_weights(model, i)
            entry["weights"] = {
                "offset": len(blobs),
                "length": len(blob),
                "encoding": encoding,
                "quant": params_json,
            }
            blobs.extend(blob)
            act = model.act_params[i]
            entry["act"] = None if act is None else _params_to_json(act)
            if spec.binary_scale and spec.weight_bits == 1:
                entry["alpha"] = binary_alpha(model, i)
            else:
                entry["alpha"] = None
        layers.append(entry)
    manifest = {"seed": model.seed, "layers": layers}
    manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()

    payload = (
        MAGIC
        + bytes([VERSION])
        + struct.pack("<Q", len(manifest_bytes))
        + manifest_bytes
        + bytes(blobs)
    )
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".bqck-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_manifest(path: str) -> tuple[dict, int, int]:
    """Parse and validate the header; returns (manifest, blob_start, file_size)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise CheckpointError(
            f"bad checkpoint magic at byte offset 0: expected {MAGIC!r}, "
            f"got {raw[:4]!r}"
        )
    if len(raw) < 5:
        raise CheckpointError("checkpoint truncated at byte offset 4 (missing version)")
    if raw[4] != VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {raw[4]} at byte offset 4 "
            f"(expected {VERSION})"
        )
    if len(raw) < _HEADER_LEN:
        raise CheckpointError(
            "checkpoint truncated at byte offset 5 (missing manifest length)"
        )
    (manifest_len,) = struct.unpack("<Q", raw[5:_HEADER_LEN])
    blob_start = _HEADER_LEN + manifest_len
    if len(raw) < blob_start:
        raise CheckpointError(
            f"checkpoint truncated at byte offset {len(raw)}: manifest of "
            f"{manifest_len} bytes extends to {blob_start}"
        )
    try:
        manifest = json.loads(raw[_HEADER_LEN:blob_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(
            f"manifest at byte offset {_HEADER_LEN} is not valid JSON: {e}"
        ) from None
    if not isinstance(manifest, dict) or "layers" not in manifest:
        raise CheckpointError("manifest must be an object with a 'layers' array")
    return manifest, blob_start, len(raw)


def load_checkpoint(path: str) -> Model:
    manifest, blob_start, file_size = read_manifest(path)
    with open(path, "rb") as f:
        raw = f.read()

    specs: list[LayerSpec] = []
    weights: list[np.ndarray | None] = []
    act_params: list[quant.QuantParams | None] = []
    weight_params: list[quant.QuantParams | None] = []
    binary_scales: list[float | None] = []
    for entry in manifest["layers"]:
        spec = _spec_from_json(entry)
        specs.append(spec)
        if not spec.has_weights:
            weights.append(None)
            act_params.append(None)
            weight_params.append(None)
            binary_scales.append(None)
            continue
        winfo = entry.get("weights")
        if not isinstance(winfo, dict):
            raise CheckpointError(f"layer {len(specs) - 1} is missing its weights entry")
        offset, length = winfo.get("offset"), winfo.get("length")
        if not isinstance(offset, int) or not isinstance(length, int) or offset < 0 or length < 0:
            raise CheckpointError(f"layer {len(specs) - 1} has invalid blob bounds")
        lo = blob_start + offset
        hi = lo + length
        if hi > file_size:
            raise CheckpointError(
                f"checkpoint truncated at byte offset {file_size}: blob for "
                f"layer {len(specs) - 1} ends at {hi}"
            )
        w, wp = _decode_weights(winfo, spec, raw[lo:hi])
        weights.append(w)
        weight_params.append(wp)
        act_entry = entry.get("act")
        act_params.append(None if act_entry is None else _params_from_json(act_entry))
        alpha = entry.get("alpha")
        binary_scales.append(float(alpha) if alpha is not None else None)

    seed = manifest.get("seed", 0)
    if not isinstance(seed, int):
        raise CheckpointError("manifest seed must be an integer")
    return Model(
        specs=specs,
        weights=weights,
        act_params=act_params,
        weight_params=weight_params,
        binary_scales=binary_scales,
        seed=seed,
    )
