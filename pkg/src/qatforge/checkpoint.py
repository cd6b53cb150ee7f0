"""Binary checkpoints with packed int4/int8 payloads and a byte-size ledger.

Layout (little-endian)::

    b"QATFORGE"  u16 version  u32 len + model-config JSON  u32 n_records
    record * n_records:
        u16 len + name   u8 bits   u8 kind (0 float32, 1 int8, 2 packed int4)
        u8 ndim  u32 * ndim shape
        u8 activation_bits (0 = float)  u8 path  u8 rounding  u8 granularity
        u8 scale_axis (255 = none)  u32 n_scales  f32 * n_scales
        u64 payload_len  payload
    footer:
        u32 n  (u16 len + name, u64 bytes) * n   u64 total   b"FORGEEND"

A layer's ledger entry is its payload plus 4 bytes per scale.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np

from . import autodiff as ad
from .model import Encoder, EncoderConfig, LayerInfo, LayerQuantPlan, layer_layout
from .quant import (
    PATHS,
    GRANULARITIES,
    ROUNDING_MODES,
    QuantizedTensor,
    QuantSpec,
    pack_int4,
    quantize_dynamic,
    unpack_int4,
)

MAGIC = b"QATFORGE"
END_TAG = b"FORGEEND"
VERSION = 1
MB = 10**6

KIND_FLOAT, KIND_INT8, KIND_INT4 = 0, 1, 2
NO_AXIS = 255


class CheckpointError(ValueError):
    pass


# ------------------------------------------------------------------ size accounting


@dataclass(frozen=True)
class LayerSize:
    params: int
    bits: int
    payload_bytes: int
    scale_bytes: int
    encoder: bool = True

    @property
    def bytes(self) -> int:
        return self.payload_bytes + self.scale_bytes

    @property
    def naive_bytes(self) -> float:
        return self.params * self.bits / 8


@dataclass
class SizeReport:
    layers: dict[str, LayerSize] = field(default_factory=dict)
    header_bytes: int = 0

    @property
    def params(self) -> int:
        return sum(l.params for l in self.layers.values())

    @property
    def payload_bytes(self) -> int:
        return sum(l.bytes for l in self.layers.values())

    @property
    def total_bytes(self) -> int:
        return self.payload_bytes + self.header_bytes

    @property
    def naive_bytes(self) -> float:
        """Bits/8 per parameter, no scales, no header."""
        return sum(l.naive_bytes for l in self.layers.values())

    @property
    def encoder_bytes(self) -> int:
        return sum(l.bytes for l in self.layers.values() if l.encoder)

    @property
    def float_bytes(self) -> int:
        return 4 * self.params + self.header_bytes

    @property
    def total_mb(self) -> float:
        return self.total_bytes / MB

    @property
    def naive_mb(self) -> float:
        return self.naive_bytes / MB

    @property
    def float_mb(self) -> float:
        return self.float_bytes / MB

    @property
    def ratio(self) -> float:
        """All-float32 size over this size."""
        return self.float_bytes / self.total_bytes

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("layer,params,bits,payload_bytes,scale_bytes,bytes\n")
        for name, l in self.layers.items():
            out.write(f"{name},{l.params},{l.bits},{l.payload_bytes},{l.scale_bytes},{l.bytes}\n")
        out.write(f"TOTAL,{self.params},,{self.payload_bytes - sum(l.scale_bytes for l in self.layers.values())},"
                  f"{sum(l.scale_bytes for l in self.layers.values())},{self.payload_bytes}\n")
        return out.getvalue()


def layer_size(params: int, bits: int, scales: int, encoder: bool = True) -> LayerSize:
    if bits == 32:
        payload = 4 * params
    elif bits == 8:
        payload = params
    elif bits == 4:
        payload = (params + 1) // 2
    else:
        raise ValueError(f"unsupported storage width {bits}")
    return LayerSize(params, bits, payload, 4 * scales if bits != 32 else 0, encoder)


CensusEntry = Union[int, LayerInfo]


def size_report(census: Mapping[str, CensusEntry], plan: LayerQuantPlan, header_bytes: int = 0) -> SizeReport:
    """Bytes per layer under ``plan``.

    Integer census entries are treated as quantizable with no per-channel
    scales; :class:`~qatforge.model.LayerInfo` entries carry their shape, so
    weights get one scale per output column and non-quantizable tensors stay
    float32.
    """
    report = SizeReport(header_bytes=header_bytes)
    for name, entry in census.items():
        if isinstance(entry, LayerInfo):
            params, quantizable, encoder = entry.params, entry.quantizable, entry.pass_index > 0
            scales = entry.shape[-1]
        else:
            params, quantizable, encoder, scales = int(entry), True, True, 0
        spec = plan.spec_for(name) if quantizable else None
        if spec is None or spec.weight_bits is None:
            report.layers[name] = layer_size(params, 32, 0, encoder)
        else:
            report.layers[name] = layer_size(params, spec.weight_bits, scales, encoder)
    return report


def model_size_report(model: Encoder, plan: Optional[LayerQuantPlan] = None) -> SizeReport:
    return size_report(model.census(), plan or model.plan())


# ------------------------------------------------------------------ save / load


def _pack_spec(spec: QuantSpec) -> bytes:
    return struct.pack(
        "<BBBB",
        spec.activation_bits or 0,
        PATHS.index(spec.path),
        ROUNDING_MODES.index(spec.rounding),
        GRANULARITIES.index(spec.activation_granularity),
    )


def _str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def _stored_weight(model: Encoder, info: LayerInfo, spec: Optional[QuantSpec]):
    w = model.weights[info.name]
    if isinstance(w, QuantizedTensor):
        if spec is None or spec.weight_bits != w.bits:
            raise CheckpointError(f"layer {info.name!r} is stored as int{w.bits} but the plan says {spec}")
        return w
    value = w.value if isinstance(w, ad.Var) else np.asarray(w)
    value = np.asarray(value, dtype=np.float32)
    if value.shape != info.shape:
        raise CheckpointError(f"layer {info.name!r} has shape {value.shape}, expected {info.shape}")
    if spec is None or spec.weight_bits is None:
        return value
    # static per-output-channel scales, identical to the dynamic forward computation
    return quantize_dynamic(value, 1, spec.weight_bits, spec.rounding)


def save(model: Encoder, plan: Optional[LayerQuantPlan], path: Union[str, Path]) -> SizeReport:
    """Write ``model`` under ``plan`` to ``path``; returns the byte ledger."""
    plan = plan or model.plan()
    try:
        plan.validate(model)
    except ValueError as e:
        raise CheckpointError(f"plan/model mismatch: {e}") from e
    cfg = json.dumps(model.cfg.to_dict(), sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    buf.write(struct.pack("<I", len(cfg)) + cfg)
    layers = list(model.layers.values())
    buf.write(struct.pack("<I", len(layers)))
    ledger = SizeReport()
    for info in layers:
        spec = plan.spec_for(info.name) if info.quantizable else None
        stored = _stored_weight(model, info, spec)
        if isinstance(stored, QuantizedTensor):
            bits = stored.bits
            kind = KIND_INT4 if bits == 4 else KIND_INT8
            payload = pack_int4(stored.codes) if bits == 4 else stored.codes.astype("<i1").tobytes()
            scales = stored.scales.astype("<f4")
            axis = NO_AXIS if stored.axis is None else stored.axis
        else:
            bits, kind = 32, KIND_FLOAT
            payload = stored.astype("<f4").tobytes()
            scales = np.zeros(0, dtype="<f4")
            axis = NO_AXIS
        buf.write(_str(info.name))
        buf.write(struct.pack("<BBB", bits, kind, len(info.shape)))
        buf.write(struct.pack(f"<{len(info.shape)}I", *info.shape))
        buf.write(_pack_spec(spec or QuantSpec()))
        buf.write(struct.pack("<BI", axis, scales.size) + scales.tobytes())
        buf.write(struct.pack("<Q", len(payload)) + payload)
        ledger.layers[info.name] = LayerSize(info.params, bits, len(payload), 4 * scales.size, info.pass_index > 0)
    buf.write(struct.pack("<I", len(ledger.layers)))
    for name, entry in ledger.layers.items():
        buf.write(_str(name) + struct.pack("<Q", entry.bytes))
    buf.write(struct.pack("<Q", ledger.payload_bytes))
    buf.write(END_TAG)
    data = buf.getvalue()
    Path(path).write_bytes(data)
    ledger.header_bytes = len(data) - ledger.payload_bytes
    return ledger


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: needed {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


@dataclass
class CheckpointContents:
    config: EncoderConfig
    weights: dict
    specs: dict[str, QuantSpec]
    ledger: SizeReport


def read(path: Union[str, Path]) -> CheckpointContents:
    """Parse a checkpoint without building a model."""
    data = Path(path).read_bytes()
    r = _Reader(data)
    magic = r.take(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}; not a qatforge checkpoint")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported; this reader handles version {VERSION}")
    (cfg_len,) = r.unpack("<I")
    try:
        config = EncoderConfig.from_dict(json.loads(r.take(cfg_len).decode("utf-8")))
    except (ValueError, TypeError) as e:
        raise CheckpointError(f"invalid model config in checkpoint: {e}") from e
    (n_records,) = r.unpack("<I")
    weights, specs = {}, {}
    ledger = SizeReport()
    for _ in range(n_records):
        name = r.string()
        bits, kind, ndim = r.unpack("<BBB")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        act_bits, path_i, round_i, gran_i = r.unpack("<BBBB")
        axis, n_scales = r.unpack("<BI")
        scales = np.frombuffer(r.take(4 * n_scales), dtype="<f4").astype(np.float32)
        (n_payload,) = r.unpack("<Q")
        payload = r.take(n_payload)
        count = math.prod(shape)
        try:
            if kind == KIND_FLOAT:
                if n_payload != 4 * count:
                    raise CheckpointError(f"layer {name!r}: float payload of {n_payload} bytes for {count} values")
                weights[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
            elif kind in (KIND_INT8, KIND_INT4):
                if kind == KIND_INT8:
                    if n_payload != count:
                        raise CheckpointError(f"layer {name!r}: int8 payload of {n_payload} bytes for {count} codes")
                    codes = np.frombuffer(payload, dtype="<i1").astype(np.int8)
                else:
                    codes = unpack_int4(payload, count)
                weights[name] = QuantizedTensor(codes.reshape(shape), scales, None if axis == NO_AXIS else axis, bits)
                specs[name] = QuantSpec(
                    weight_bits=bits,
                    activation_bits=act_bits or None,
                    path=PATHS[path_i],
                    rounding=ROUNDING_MODES[round_i],
                    activation_granularity=GRANULARITIES[gran_i],
                )
            else:
                raise CheckpointError(f"layer {name!r}: unknown payload kind {kind}")
        except (ValueError, IndexError) as e:
            if isinstance(e, CheckpointError):
                raise
            raise CheckpointError(f"layer {name!r}: corrupt record ({e})") from e
        ledger.layers[name] = LayerSize(count, bits, n_payload, 4 * n_scales)
    (n_footer,) = r.unpack("<I")
    footer = {}
    for _ in range(n_footer):
        name = r.string()
        (footer[name],) = r.unpack("<Q")
    (total,) = r.unpack("<Q")
    if r.take(len(END_TAG)) != END_TAG:
        raise CheckpointError("missing end tag; checkpoint truncated or corrupt")
    if footer != {k: v.bytes for k, v in ledger.layers.items()} or total != ledger.payload_bytes:
        raise CheckpointError("footer ledger does not match the stored records")
    ledger.header_bytes = len(data) - ledger.payload_bytes
    return CheckpointContents(config, weights, specs, ledger)


def load(path: Union[str, Path]) -> Encoder:
    """Rebuild an inference model; quantized layers run from the stored codes."""
    contents = read(path)
    layers = layer_layout(contents.config)
    expected = {i.name: i.shape for i in layers}
    got = {n: tuple(w.shape) for n, w in contents.weights.items()}
    if expected != got:
        raise CheckpointError("checkpoint layers do not match its model config")
    model = Encoder(contents.config, contents.weights, layers)
    for name, spec in contents.specs.items():
        if not model.layers[name].quantizable:
            raise CheckpointError(f"non-quantizable layer {name!r} stored quantized")
        model.specs[name] = spec
    for info in model.quantizable_layers():
        if info.name not in contents.specs:
            model.specs[info.name] = QuantSpec()
    return model
