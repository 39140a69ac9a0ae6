"""Blockwise symmetric integer quantization codec.

Tensors are split into fixed-size blocks; each block gets one scale
``max(|x|) / qmax`` where ``qmax = 2**(bit_width-1) - 1``, and codes are
``round(x / scale)`` with round-half-to-even.  The symmetric range means the
most negative integer (e.g. -128 for INT8) is never emitted, which keeps
``|dequantized - original| <= scale / 2`` for every element.

INT4 codes are packed two per byte, low nibble first.  Scales travel as
2-byte half-precision values on the wire; in memory they stay full precision
so round-trip identities hold exactly for lattice-aligned inputs.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, IntegrityError, ValidationError

SCALE_WIRE_BYTES = 2  # half-precision scale encoding
_HEADER = struct.Struct("<QBI")  # original_len u64, bit_width u8, block_size u32


@dataclass(frozen=True)
class QuantConfig:
    """Codec parameters.

    bit_width: 4 or 8.
    block_size: elements per scale, a positive multiple of 8 (min 8).
    mode: "blocked" or "full_tensor" (one scale for the whole tensor;
        equivalent to blocked with block_size = length padded to 8).
    rounding: only "ties-to-even" is supported; the field exists so configs
        are explicit about it on the wire and in reports.
    """

    bit_width: int
    block_size: int = 2048
    mode: str = "blocked"
    rounding: str = "ties-to-even"

    def __post_init__(self):
        if self.bit_width not in (4, 8):
            raise ConfigError(f"bit_width must be 4 or 8, got {self.bit_width}")
        if self.block_size < 8 or self.block_size % 8 != 0:
            raise ConfigError(
                f"block_size must be a positive multiple of 8, got {self.block_size}"
            )
        if self.mode not in ("blocked", "full_tensor"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.rounding != "ties-to-even":
            raise ConfigError(f"unsupported rounding {self.rounding!r}")

    @property
    def qmax(self) -> int:
        return (1 << (self.bit_width - 1)) - 1


@dataclass
class FlatTensor:
    """A 1-D array of real values plus the width one element occupies on the wire."""

    values: np.ndarray
    wire_element_bytes: int = 2

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValidationError("FlatTensor expects a 1-D array")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("FlatTensor values must be finite")
        if self.wire_element_bytes not in (2, 4):
            raise ValidationError("wire_element_bytes must be 2 or 4")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def wire_bytes(self) -> int:
        return len(self.values) * self.wire_element_bytes


@dataclass
class QuantizedTensor:
    """Packed codes plus per-block scales for one quantized tensor."""

    codes: np.ndarray  # packed uint8
    scales: np.ndarray  # float64, one per block
    original_len: int
    config: QuantConfig

    @property
    def n_blocks(self) -> int:
        return len(self.scales)

    @property
    def padded_len(self) -> int:
        return self.n_blocks * self.config.block_size

    @property
    def payload_bytes(self) -> int:
        # wire size of the real elements; padding accounted separately
        return math.ceil(self.original_len * self.config.bit_width / 8)

    @property
    def metadata_bytes(self) -> int:
        return self.n_blocks * SCALE_WIRE_BYTES

    @property
    def padding_bytes(self) -> int:
        total = self.padded_len * self.config.bit_width // 8
        return total - self.payload_bytes

    @property
    def wire_bytes(self) -> int:
        return self.payload_bytes + self.metadata_bytes

    def to_bytes(self) -> bytes:
        """Serialize to the canonical wire layout.

        Header (original_len u64, bit_width u8, block_size u32, little-endian),
        then scales as half-precision, then the packed code bytes including
        block padding.  Scales are rounded to half precision here; in-memory
        tensors keep full-precision scales.
        """
        header = _HEADER.pack(self.original_len, self.config.bit_width, self.config.block_size)
        scales16 = self.scales.astype(np.float16).tobytes()
        return header + scales16 + self.codes.tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "QuantizedTensor":
        if len(raw) < _HEADER.size:
            raise IntegrityError("payload shorter than header")
        original_len, bit_width, block_size = _HEADER.unpack_from(raw)
        try:
            cfg = QuantConfig(bit_width=bit_width, block_size=block_size)
        except ConfigError as e:
            raise IntegrityError(f"header describes invalid config: {e}") from e
        n_blocks = math.ceil(original_len / block_size) if original_len else 0
        scale_end = _HEADER.size + n_blocks * SCALE_WIRE_BYTES
        code_bytes = n_blocks * block_size * bit_width // 8
        if len(raw) != scale_end + code_bytes:
            raise IntegrityError("payload length does not match header")
        scales = np.frombuffer(raw, dtype=np.float16, count=n_blocks, offset=_HEADER.size)
        codes = np.frombuffer(raw, dtype=np.uint8, offset=scale_end).copy()
        return cls(codes=codes, scales=scales.astype(np.float64), original_len=original_len, config=cfg)

    def slice_blocks(self, start: int, length: int) -> "QuantizedTensor":
        """Take elements [start, start+length) as a standalone tensor.

        Both bounds must fall on block boundaries and the source must have no
        trailing partial block, so the packed codes can be split byte-exactly.
        """
        bs = self.config.block_size
        if start % bs or length % bs or start + length > self.original_len:
            raise ValidationError("slice_blocks requires block-aligned bounds")
        if self.original_len != self.padded_len:
            raise ValidationError("slice_blocks requires a block-aligned tensor")
        bpb = bs * self.config.bit_width // 8  # bytes per block
        b0, nb = start // bs, length // bs
        return QuantizedTensor(
            codes=self.codes[b0 * bpb:(b0 + nb) * bpb],
            scales=self.scales[b0:b0 + nb],
            original_len=length,
            config=self.config,
        )


@dataclass
class QuantErrorStats:
    rmse: float
    max_abs_error: float
    per_block_bound_violations: int


def _effective_block(cfg: QuantConfig, n: int) -> int:
    if cfg.mode == "full_tensor":
        return max(8, -(-n // 8) * 8)
    return cfg.block_size


def _pack(codes: np.ndarray, bit_width: int) -> np.ndarray:
    if bit_width == 8:
        return codes.astype(np.int8).view(np.uint8)
    u = codes.astype(np.int8).view(np.uint8) & 0xF
    return u[0::2] | (u[1::2] << 4)  # low nibble first


def _unpack(packed: np.ndarray, bit_width: int, n: int) -> np.ndarray:
    if bit_width == 8:
        out = packed.view(np.int8).astype(np.int64)
    else:
        lo = (packed & 0xF).astype(np.int64)
        hi = (packed >> 4).astype(np.int64)
        out = np.empty(len(packed) * 2, dtype=np.int64)
        out[0::2], out[1::2] = lo, hi
        out[out >= 8] -= 16
    return out[:n]


def quantize(t: FlatTensor, cfg: QuantConfig) -> QuantizedTensor:
    """Quantize a tensor blockwise; returns packed codes and per-block scales.

    All-zero blocks get scale 0 and all-zero codes.  Padding elements added to
    fill the last block are zeros and never affect the block scale.
    """
    values = t.values
    n = len(values)
    block = _effective_block(cfg, n)
    out_cfg = replace(cfg, block_size=block) if block != cfg.block_size else cfg
    n_blocks = math.ceil(n / block) if n else 0
    padded = np.zeros(n_blocks * block, dtype=np.float64)
    padded[:n] = values
    grid = padded.reshape(n_blocks, block)
    maxabs = np.max(np.abs(grid), axis=1)
    scales = maxabs / out_cfg.qmax
    # multiply by qmax/maxabs rather than dividing by the stored scale: one
    # fewer rounding step, so e.g. 0.5/(1/127) hits 63.5 exactly
    inv = np.zeros_like(maxabs)
    nz = maxabs > 0
    inv[nz] = out_cfg.qmax / maxabs[nz]
    codes = np.rint(grid * inv[:, None])
    np.clip(codes, -out_cfg.qmax, out_cfg.qmax, out=codes)
    packed = _pack(codes.reshape(-1), out_cfg.bit_width)
    return QuantizedTensor(codes=packed, scales=scales, original_len=n, config=out_cfg)


def dequantize(q: QuantizedTensor) -> FlatTensor:
    """Reconstruct values as code * block_scale, dropping block padding."""
    codes = _unpack(q.codes, q.config.bit_width, q.padded_len)
    if np.any(np.abs(codes) > q.config.qmax):
        raise IntegrityError("code outside symmetric range")
    grid = codes.reshape(q.n_blocks, q.config.block_size).astype(np.float64)
    values = (grid * q.scales[:, None]).reshape(-1)[:q.original_len]
    return FlatTensor(values=values, wire_element_bytes=2)


def fused_dequant_reduce_quant(inputs, out_cfg: QuantConfig) -> QuantizedTensor:
    """Dequantize each input, sum left to right in full precision, requantize.

    Bit-identical to composing dequantize / sum / quantize by hand; exists as
    one operation so hierarchical collectives cost a single requantization
    pass per element instead of one per contributor.
    """
    inputs = list(inputs)
    if not inputs:
        raise ValidationError("fused reduce needs at least one input")
    first = inputs[0]
    for q in inputs[1:]:
        if q.original_len != first.original_len or q.config != first.config:
            raise ValidationError("fused reduce inputs must share length and config")
    acc = np.zeros(first.original_len, dtype=np.float64)
    for q in inputs:
        acc += dequantize(q).values
    return quantize(FlatTensor(acc), out_cfg)


def quant_error_stats(t: FlatTensor, cfg: QuantConfig) -> QuantErrorStats:
    """Round-trip error summary for one tensor under one config."""
    q = quantize(t, cfg)
    err = np.abs(dequantize(q).values - t.values)
    block = q.config.block_size
    idx = np.arange(len(t.values)) // block
    bound = q.scales[idx] / 2.0
    return QuantErrorStats(
        rmse=float(np.sqrt(np.mean(err**2))) if len(t.values) else 0.0,
        max_abs_error=float(err.max()) if len(t.values) else 0.0,
        per_block_bound_violations=int(np.count_nonzero(err > bound)),
    )
