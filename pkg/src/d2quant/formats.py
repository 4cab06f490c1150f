"""On-disk formats: model artifacts, calibration text, JSON reports.

Model artifact layout (all integers little-endian)::

    bytes 0..8     magic  b"D2QMODEL"
    bytes 8..16    u64    manifest length N
    bytes 16..16+N UTF-8 JSON manifest, space-padded so the payload starts
                   on a 64-byte boundary
    payload        tensor sections, each starting on a 64-byte boundary

Manifest offsets are relative to the payload start. See ``docs/formats.md``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .model import WEIGHT_SLOTS, BlockWeights, ModelBundle, ModelConfig
from .quant import IdentityQuantized, QuantizedTensor

MAGIC = b"D2QMODEL"
FORMAT_NAME = "d2quant-model"
FORMAT_VERSION = "1"
ALIGN = 64
_HEADER = struct.Struct("<8sQ")
_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8"), "uint8": np.dtype("u1")}


class ArtifactError(Exception):
    """Base class for unreadable or inconsistent model artifacts."""


class VersionError(ArtifactError):
    pass


class TruncatedPayloadError(ArtifactError):
    pass


class BoundsError(ArtifactError):
    """A manifest entry points outside the payload or disagrees with its shape."""


class NonFiniteValueError(ArtifactError):
    pass


class CalibrationError(Exception):
    pass


class ReportError(Exception):
    pass


def _pad(n: int) -> int:
    return (-n) % ALIGN


class _PayloadWriter:
    def __init__(self):
        self.parts: list[bytes] = []
        self.size = 0

    def add(self, arr: np.ndarray, dtype: str) -> dict:
        data = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entry = {"dtype": dtype, "shape": list(arr.shape), "offset": self.size, "length": len(data)}
        self.parts.append(data)
        self.parts.append(b"\0" * _pad(len(data)))
        self.size += len(data) + _pad(len(data))
        return entry

    def bytes(self) -> bytes:
        return b"".join(self.parts)


def _slot_entry(w: _PayloadWriter, slot) -> dict:
    if isinstance(slot, QuantizedTensor):
        return {
            "dtype": "quantized",
            "shape": list(slot.shape),
            "bits": slot.bits,
            "group_size": slot.group_size,
            "codes": w.add(slot.codes, "uint8"),
            "scales": w.add(slot.scales, "float32"),
            "zero_points": w.add(slot.zero_points, "uint8"),
        }
    if isinstance(slot, IdentityQuantized):
        entry = w.add(slot.weight, "float32")
        entry["passthrough"] = True
        return entry
    return w.add(slot, "float32")


def serialize_model(m: ModelBundle) -> bytes:
    w = _PayloadWriter()
    tensors: dict[str, dict] = {"embedding": w.add(m.embedding, "float32")}
    for i, block in enumerate(m.blocks):
        p = f"blocks.{i}."
        for name in WEIGHT_SLOTS:
            tensors[p + name] = _slot_entry(w, getattr(block, name))
        for name in ("pre_ln_gamma", "post_attn_ln_gamma", "post_attn_ln_bias"):
            tensors[p + name] = w.add(getattr(block, name), "float32")
        if block.col_scale is not None:
            tensors[p + "col_scale"] = w.add(block.col_scale, "float64")
    tensors["final_norm_gamma"] = w.add(m.final_norm_gamma, "float32")
    tensors["head"] = w.add(m.head, "float32")
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "byte_order": "little",
        "alignment": ALIGN,
        "config": m.config.to_dict(),
        "payload_length": w.size,
        "tensors": tensors,
    }
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    text += b" " * _pad(_HEADER.size + len(text))
    return _HEADER.pack(MAGIC, len(text)) + text + w.bytes()


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(m: ModelBundle, path) -> None:
    _atomic_write(Path(path), serialize_model(m))


def read_manifest(data: bytes) -> tuple[dict, memoryview]:
    if len(data) < _HEADER.size:
        raise TruncatedPayloadError("file shorter than the header")
    magic, n = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ArtifactError("not a model artifact (bad magic)")
    if _HEADER.size + n > len(data):
        raise TruncatedPayloadError("manifest extends past end of file")
    try:
        manifest = json.loads(bytes(data[_HEADER.size:_HEADER.size + n]))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"manifest is not valid JSON: {exc}") from exc
    if manifest.get("format") != FORMAT_NAME or manifest.get("version") != FORMAT_VERSION:
        raise VersionError(f"unsupported artifact {manifest.get('format')!r} "
                           f"version {manifest.get('version')!r}")
    if manifest.get("byte_order") != "little":
        raise ArtifactError("only little-endian artifacts are supported")
    payload = memoryview(data)[_HEADER.size + n:]
    if len(payload) < manifest.get("payload_length", 0):
        raise TruncatedPayloadError(
            f"payload has {len(payload)} bytes, manifest declares {manifest['payload_length']}")
    return manifest, payload


def _read_array(payload: memoryview, entry: dict, name: str) -> np.ndarray:
    try:
        dtype = _DTYPES[entry["dtype"]]
        shape = tuple(int(s) for s in entry["shape"])
        offset, length = int(entry["offset"]), int(entry["length"])
    except (KeyError, TypeError, ValueError) as exc:
        raise BoundsError(f"{name}: malformed manifest entry") from exc
    if offset < 0 or length < 0 or offset + length > len(payload):
        raise BoundsError(f"{name}: section [{offset}, {offset + length}) outside payload "
                          f"of {len(payload)} bytes")
    if any(s <= 0 for s in shape) or int(np.prod(shape)) * dtype.itemsize != length:
        raise BoundsError(f"{name}: shape {list(shape)} does not match length {length}")
    arr = np.frombuffer(payload[offset:offset + length], dtype=dtype).reshape(shape)
    arr = arr.astype(dtype.newbyteorder("="), copy=True)
    if arr.dtype.kind == "f" and not np.isfinite(arr).all():
        raise NonFiniteValueError(f"{name}: non-finite values")
    return arr


def _read_slot(payload, entry: dict, name: str):
    if entry.get("dtype") != "quantized":
        arr = _read_array(payload, entry, name)
        return IdentityQuantized(arr) if entry.get("passthrough") else arr
    try:
        q = QuantizedTensor(
            codes=_read_array(payload, entry["codes"], name + ".codes"),
            scales=_read_array(payload, entry["scales"], name + ".scales"),
            zero_points=_read_array(payload, entry["zero_points"], name + ".zero_points"),
            bits=int(entry["bits"]),
            group_size=int(entry["group_size"]),
        )
    except KeyError as exc:
        raise BoundsError(f"{name}: missing quantized section {exc}") from exc
    except (ValueError, TypeError) as exc:
        raise BoundsError(f"{name}: inconsistent quantized tensor: {exc}") from exc
    if list(q.shape) != list(entry["shape"]):
        raise BoundsError(f"{name}: codes shape {q.shape} != declared {entry['shape']}")
    return q


def deserialize_model(data: bytes) -> ModelBundle:
    manifest, payload = read_manifest(data)
    try:
        cfg = ModelConfig(**manifest["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ArtifactError(f"bad model config: {exc}") from exc
    t = manifest["tensors"]

    def get(name):
        if name not in t:
            raise BoundsError(f"missing tensor {name}")
        return _read_array(payload, t[name], name)

    def expect(arr, shape, name):
        if getattr(arr, "shape", None) != shape:
            raise BoundsError(f"{name}: shape {arr.shape} != expected {shape}")
        return arr

    d, f, v = cfg.d_model, cfg.d_ffn, cfg.vocab
    shapes = {"w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "w_o": (d, d),
              "w_up": (f, d), "w_gate": (f, d), "w_down": (d, f)}
    blocks = []
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        slots = {}
        for name in WEIGHT_SLOTS:
            if p + name not in t:
                raise BoundsError(f"missing tensor {p + name}")
            slots[name] = expect(_read_slot(payload, t[p + name], p + name), shapes[name], p + name)
        col_scale = None
        if p + "col_scale" in t:
            col_scale = expect(get(p + "col_scale"), (f,), p + "col_scale")
        blocks.append(BlockWeights(
            **slots,
            pre_ln_gamma=expect(get(p + "pre_ln_gamma"), (d,), p + "pre_ln_gamma"),
            post_attn_ln_gamma=expect(get(p + "post_attn_ln_gamma"), (d,), p + "post_attn_ln_gamma"),
            post_attn_ln_bias=expect(get(p + "post_attn_ln_bias"), (d,), p + "post_attn_ln_bias"),
            col_scale=col_scale,
        ))
    return ModelBundle(
        config=cfg,
        embedding=expect(get("embedding"), (v, d), "embedding"),
        blocks=blocks,
        final_norm_gamma=expect(get("final_norm_gamma"), (d,), "final_norm_gamma"),
        head=expect(get("head"), (v, d), "head"),
    )


def load_model(path) -> ModelBundle:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ArtifactError(f"cannot read {path}: {exc}") from exc
    return deserialize_model(data)


def load_manifest(path) -> dict:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ArtifactError(f"cannot read {path}: {exc}") from exc
    manifest, _ = read_manifest(data)
    return manifest


# -- calibration text ------------------------------------------------------------

def read_bytes(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CalibrationError(f"cannot read {path}: {exc}") from exc
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def chunk_ids(ids: np.ndarray, seq_len: int) -> list[np.ndarray]:
    n = len(ids) // seq_len
    return [ids[i * seq_len:(i + 1) * seq_len] for i in range(n)]


def load_calibration(path, n_samples: int = 128, seq_len: int = 128, seed: int | None = None):
    """Split a file's bytes into ``seq_len`` windows and keep ``n_samples`` of them.

    Without a seed the first windows are used; with a seed a seeded random
    subset is taken (kept in file order). The tail is truncated.
    """
    from .pipeline import CalibrationSet

    if seq_len < 2 or n_samples < 1:
        raise CalibrationError("need seq_len >= 2 and n_samples >= 1")
    chunks = chunk_ids(read_bytes(path), seq_len)
    if not chunks:
        raise CalibrationError(f"{path} is shorter than one sequence of {seq_len} bytes")
    if seed is None or n_samples >= len(chunks):
        picked = chunks[:n_samples]
    else:
        idx = np.sort(np.random.default_rng(seed).choice(len(chunks), n_samples, replace=False))
        picked = [chunks[i] for i in idx]
    return CalibrationSet(picked)


# -- reports -------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def dumps_report(report: dict) -> str:
    try:
        return json.dumps(_jsonable(report), sort_keys=True, indent=2, allow_nan=False) + "\n"
    except ValueError as exc:
        raise ReportError(f"report contains non-finite values: {exc}") from exc


def write_report(report: dict, path) -> None:
    text = dumps_report(report)
    try:
        _atomic_write(Path(path), text.encode())
    except OSError as exc:
        raise ReportError(f"cannot write report to {path}: {exc}") from exc


def read_report(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ReportError(f"cannot read report {path}: {exc}") from exc


def _stats_dict(stats, realized=None) -> dict:
    out = {
        "mu": stats.mu,
        "sigma2": stats.sigma2,
        "snr_diag": stats.snr_diag,
        "predicted_reduction": stats.reduction,
        "token_count": stats.token_count,
    }
    if realized is not None:
        out["realized_reduction"] = realized
    return out


def quantize_report(report, model_config: ModelConfig, seed: int) -> dict:
    """JSON document for a pipeline run (schema: ``schemas/quantize_report.json``)."""
    blocks = []
    for b in report.blocks:
        entry = {"index": b.index, "dac_applied": b.bias is not None,
                 "relative_errors": b.errors, "dsq_objective_trace": b.dsq_trace}
        entry.update(_stats_dict(b.deviation, b.realized_reduction))
        blocks.append(entry)
    return {
        "kind": "quantize",
        "schema_version": 1,
        "seed": seed,
        "pipeline": report.config.to_dict(),
        "model": model_config.to_dict(),
        "blocks": blocks,
        "summary": {
            "mean_predicted_reduction": float(np.mean([b.deviation.reduction.mean() for b in report.blocks])),
            "mean_realized_reduction": report.mean_realized_reduction(),
            "mean_relative_error": report.mean_reconstruction_error(),
            "mean_down_error": report.mean_down_error(),
        },
    }


def snr_report(sites, model_config: ModelConfig, pipeline: dict, seed: int) -> dict:
    """JSON document for a diagnosis run (schema: ``schemas/snr_report.json``)."""
    post = [float(s.post_attn.snr_diag.mean()) for s in sites]
    pre = [float(s.pre_norm.snr_diag.mean()) for s in sites]
    return {
        "kind": "snr",
        "schema_version": 1,
        "seed": seed,
        "pipeline": pipeline,
        "model": model_config.to_dict(),
        "blocks": [{"index": s.index,
                    "post_attn": _stats_dict(s.post_attn),
                    "pre_norm": _stats_dict(s.pre_norm)} for s in sites],
        "summary": {
            "mean_snr_post_attn": float(np.mean(post)),
            "mean_snr_pre_norm": float(np.mean(pre)),
            "per_block_snr_post_attn": post,
            "per_block_snr_pre_norm": pre,
        },
    }


def ablation_report(result: dict, seed: int) -> dict:
    """JSON document for an ablation run (schema: ``schemas/ablation_report.json``)."""
    return {"kind": "ablation", "schema_version": 1, "seed": seed, **result}


def schema(name: str) -> dict:
    from importlib.resources import files

    return json.loads(files("d2quant").joinpath("schemas", f"{name}.json").read_text())
