"""Lossless text compression: model-driven integer arithmetic coding.

A pluggable probability model supplies, at every step, an integer
frequency vector over 257 symbols (256 byte values plus EOF).  The coder
consumes those frequencies with 32-bit integer arithmetic only, so blobs
are bitwise identical across platforms.  The bundled ContextModel blends
order-0..k byte contexts with add-one smoothing (weight halving per
order drop) and adapts its counts during a coding session, mirroring how
a language model would condition on the decoded prefix.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass

import numpy as np

ALPHABET = 257
EOF_SYMBOL = 256
MAX_ORDER = 4

BLOB_MAGIC = b"SSRZ"
BLOB_VERSION = 1
MODEL_MAGIC = b"SSRC"
MODEL_VERSION = 1

# Coder geometry: 32-bit registers, renormalization on top-bit agreement,
# pending-bit carry.  Totals must stay below the quarter range so every
# symbol keeps a nonempty interval.
_STATE_BITS = 32
_FULL = 1 << _STATE_BITS
_MASK = _FULL - 1
_HALF = _FULL >> 1
_QUARTER = _FULL >> 2
_MAX_TOTAL = _QUARTER + 2

# Per-order scale for the integer blend; keeps every frequency >= 1 while
# bounding the grand total well under _MAX_TOTAL.
_BLEND_SCALE = 1 << 16

# Observed counts are weighted 32x against the add-one floor, so the
# uniform prior washes out after tens of observations instead of hundreds.
_COUNT_GAIN = 32

__all__ = [
    "ALPHABET",
    "EOF_SYMBOL",
    "CodecError",
    "CodedBlob",
    "ProbabilityModel",
    "UniformModel",
    "ContextModel",
    "fit_context_model",
    "load_context_model",
    "encode",
    "encode_with_cost",
    "decode",
    "compressed_size_bytes",
]


class CodecError(ValueError):
    """Raised on malformed blobs, model mismatches, or corrupt payloads."""


# ---------------------------------------------------------------------------
# Bit I/O


class _BitWriter:
    def __init__(self) -> None:
        self._bytes = bytearray()
        self._acc = 0
        self._nacc = 0
        self.bit_count = 0

    def write(self, bit: int) -> None:
        self._acc = (self._acc << 1) | bit
        self._nacc += 1
        self.bit_count += 1
        if self._nacc == 8:
            self._bytes.append(self._acc)
            self._acc = 0
            self._nacc = 0

    def getvalue(self) -> bytes:
        out = bytearray(self._bytes)
        if self._nacc:
            out.append(self._acc << (8 - self._nacc))
        return bytes(out)


class _BitReader:
    """Reads MSB-first bits; positions past the declared length read as 0."""

    def __init__(self, payload: bytes, bit_count: int) -> None:
        self._payload = payload
        self._bit_count = bit_count
        self._pos = 0

    def read(self) -> int:
        if self._pos >= self._bit_count:
            self._pos += 1
            return 0
        byte = self._payload[self._pos >> 3]
        bit = (byte >> (7 - (self._pos & 7))) & 1
        self._pos += 1
        return bit


# ---------------------------------------------------------------------------
# Arithmetic coder


class _Encoder:
    def __init__(self) -> None:
        self.low = 0
        self.high = _MASK
        self.pending = 0
        self.out = _BitWriter()

    def write_symbol(self, cum_low: int, cum_high: int, total: int) -> None:
        if not (0 <= cum_low < cum_high <= total <= _MAX_TOTAL):
            raise CodecError(
                f"bad coding interval [{cum_low},{cum_high})/{total}"
            )
        span = self.high - self.low + 1
        new_low = self.low + cum_low * span // total
        new_high = self.low + cum_high * span // total - 1
        self.low, self.high = new_low, new_high
        while ((self.low ^ self.high) & _HALF) == 0:
            bit = self.low >> (_STATE_BITS - 1)
            self.out.write(bit)
            for _ in range(self.pending):
                self.out.write(bit ^ 1)
            self.pending = 0
            self.low = (self.low << 1) & _MASK
            self.high = ((self.high << 1) & _MASK) | 1
        while (self.low & ~self.high & _QUARTER) != 0:
            self.pending += 1
            self.low = (self.low << 1) ^ _HALF
            self.high = ((self.high ^ _HALF) << 1) | _HALF | 1

    def finish(self) -> tuple[int, bytes]:
        # One disambiguating bit; the decoder zero-fills past the payload,
        # and the interval invariants guarantee 10000... lands inside it.
        self.out.write(1)
        return self.out.bit_count, self.out.getvalue()


class _Decoder:
    def __init__(self, payload: bytes, bit_count: int) -> None:
        self.low = 0
        self.high = _MASK
        self.inp = _BitReader(payload, bit_count)
        self.code = 0
        for _ in range(_STATE_BITS):
            self.code = (self.code << 1) | self.inp.read()

    def target(self, total: int) -> int:
        span = self.high - self.low + 1
        return ((self.code - self.low + 1) * total - 1) // span

    def consume(self, cum_low: int, cum_high: int, total: int) -> None:
        span = self.high - self.low + 1
        new_low = self.low + cum_low * span // total
        new_high = self.low + cum_high * span // total - 1
        self.low, self.high = new_low, new_high
        while ((self.low ^ self.high) & _HALF) == 0:
            self.code = ((self.code << 1) & _MASK) | self.inp.read()
            self.low = (self.low << 1) & _MASK
            self.high = ((self.high << 1) & _MASK) | 1
        while (self.low & ~self.high & _QUARTER) != 0:
            self.code = (self.code & _HALF) | ((self.code << 1) & (_MASK >> 1)) | self.inp.read()
            self.low = (self.low << 1) ^ _HALF
            self.high = ((self.high ^ _HALF) << 1) | _HALF | 1


# ---------------------------------------------------------------------------
# Probability models


class ProbabilityModel:
    """Interface: deterministic next-symbol frequencies over 257 symbols."""

    model_id: bytes  # 8 bytes identifying the model construction

    def session(self) -> "ModelSession":
        raise NotImplementedError


class ModelSession:
    def distribution(self) -> np.ndarray:
        """Current integer frequencies, shape (257,), all entries >= 1."""
        raise NotImplementedError

    def advance(self, symbol: int) -> None:
        """Account for one emitted byte (EOF is never advanced)."""
        raise NotImplementedError


class UniformModel(ProbabilityModel):
    """Static uniform distribution; useful as a modeling-free baseline."""

    model_id = b"uniform\x00"

    def session(self) -> "_UniformSession":
        return _UniformSession()


class _UniformSession(ModelSession):
    _FREQS = np.ones(ALPHABET, dtype=np.int64)

    def distribution(self) -> np.ndarray:
        return self._FREQS

    def advance(self, symbol: int) -> None:
        pass


class ContextModel(ProbabilityModel):
    """Byte-context frequency model, orders 0..k blended.

    Each order estimates p(symbol | last j bytes) from counts with an
    add-one floor (counts carry a 32x gain against the floor); orders are
    blended with weights halving per order drop.  Orders 0 and 1 are
    dense arrays; higher orders are sparse dicts keyed by the context
    bytes.  The fitted tables are immutable; each coding session layers
    its own adaptive deltas on top.
    """

    def __init__(self, order: int) -> None:
        if not 0 <= order <= MAX_ORDER:
            raise ValueError(f"order must be in [0, {MAX_ORDER}], got {order}")
        self.order = order
        self.counts0 = np.zeros(ALPHABET, dtype=np.int64)
        self.total0 = 0
        self.counts1 = np.zeros((256, ALPHABET), dtype=np.int64)
        self.totals1 = np.zeros(256, dtype=np.int64)
        # sparse[j] maps a j-byte context to {symbol: count}, j >= 2
        self.sparse: dict[int, dict[bytes, dict[int, int]]] = {
            j: {} for j in range(2, order + 1)
        }
        self.sparse_totals: dict[int, dict[bytes, int]] = {
            j: {} for j in range(2, order + 1)
        }
        self._frozen = False
        self.model_id = b"\x00" * 8

    def _observe(self, context: bytes, symbol: int) -> None:
        if self._frozen:
            raise ValueError("model is frozen after fit")
        self.counts0[symbol] += 1
        self.total0 += 1
        if self.order >= 1 and len(context) >= 1:
            prev = context[-1]
            self.counts1[prev, symbol] += 1
            self.totals1[prev] += 1
        for j in range(2, self.order + 1):
            if len(context) >= j:
                ctx = context[-j:]
                tab = self.sparse[j].setdefault(ctx, {})
                tab[symbol] = tab.get(symbol, 0) + 1
                self.sparse_totals[j][ctx] = self.sparse_totals[j].get(ctx, 0) + 1

    def _freeze(self) -> None:
        blob = self.serialize()
        self.model_id = hashlib.sha256(blob).digest()[:8]
        self._frozen = True

    def serialize(self) -> bytes:
        """Deterministic little-endian byte form (sorted contexts/symbols)."""
        parts = [MODEL_MAGIC, struct.pack("<HB", MODEL_VERSION, self.order)]
        for j in range(self.order + 1):
            items = self._context_items(j)
            parts.append(struct.pack("<I", len(items)))
            for ctx, table in items:
                parts.append(struct.pack("<B", len(ctx)))
                parts.append(ctx)
                syms = sorted(table.items())
                parts.append(struct.pack("<H", len(syms)))
                for sym, count in syms:
                    parts.append(struct.pack("<HQ", sym, count))
        return b"".join(parts)

    def _context_items(self, j: int) -> list[tuple[bytes, dict[int, int]]]:
        if j == 0:
            nz = np.nonzero(self.counts0)[0]
            table = {int(s): int(self.counts0[s]) for s in nz}
            return [(b"", table)] if table else []
        if j == 1:
            items = []
            for prev in range(256):
                if self.totals1[prev] == 0:
                    continue
                nz = np.nonzero(self.counts1[prev])[0]
                items.append((bytes([prev]), {int(s): int(self.counts1[prev, s]) for s in nz}))
            return items
        return sorted(self.sparse[j].items())

    def session(self) -> "_ContextSession":
        return _ContextSession(self)


def fit_context_model(corpus: list[bytes], order: int = 3) -> ContextModel:
    """Count (context, next-symbol) pairs over a corpus; EOF closes each text.

    Contexts never cross text boundaries.  Identical corpora produce
    bitwise-identical serialized models (and therefore model ids).
    """
    model = ContextModel(order)
    for text in corpus:
        if isinstance(text, str):
            raise TypeError("corpus entries must be bytes")
        for pos, byte in enumerate(text):
            model._observe(text[max(0, pos - order) : pos], byte)
        model._observe(text[max(0, len(text) - order) :], EOF_SYMBOL)
    model._freeze()
    return model


def load_context_model(blob: bytes) -> ContextModel:
    """Inverse of ContextModel.serialize."""
    if blob[:4] != MODEL_MAGIC:
        raise CodecError(f"not a context model: bad magic {blob[:4]!r}")
    version, order = struct.unpack_from("<HB", blob, 4)
    if version != MODEL_VERSION:
        raise CodecError(f"unsupported context model version {version}")
    model = ContextModel(order)
    offset = 7
    for j in range(order + 1):
        (n_ctx,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        for _ in range(n_ctx):
            clen = blob[offset]
            offset += 1
            ctx = blob[offset : offset + clen]
            offset += clen
            (n_syms,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            for _ in range(n_syms):
                sym, count = struct.unpack_from("<HQ", blob, offset)
                offset += 10
                if j == 0:
                    model.counts0[sym] = count
                    model.total0 += count
                elif j == 1:
                    model.counts1[ctx[0], sym] = count
                    model.totals1[ctx[0]] += count
                else:
                    model.sparse[j].setdefault(ctx, {})[sym] = count
                    model.sparse_totals[j][ctx] = (
                        model.sparse_totals[j].get(ctx, 0) + count
                    )
    if offset != len(blob):
        raise CodecError(f"trailing bytes in context model at offset {offset}")
    model._freeze()
    return model


class _ContextSession(ModelSession):
    """Adaptive view over a fitted ContextModel; deltas stay session-local.

    Dense orders are kept as pre-gained arrays (count * gain + 1) so each
    distribution() is a handful of whole-vector integer ops into reused
    scratch buffers.  The returned array is only valid until the next
    distribution() call.
    """

    def __init__(self, model: ContextModel) -> None:
        self.order = model.order
        self.gained0 = model.counts0 * np.int64(_COUNT_GAIN) + 1
        self.denom0 = _COUNT_GAIN * model.total0 + ALPHABET
        self.gained1 = model.counts1 * np.int64(_COUNT_GAIN) + 1
        self.denoms1 = _COUNT_GAIN * model.totals1 + ALPHABET
        self.base_sparse = model.sparse
        self.base_sparse_totals = model.sparse_totals
        self.delta: dict[int, dict[bytes, dict[int, int]]] = {
            j: {} for j in range(2, self.order + 1)
        }
        self.delta_totals: dict[int, dict[bytes, int]] = {
            j: {} for j in range(2, self.order + 1)
        }
        self.history = bytearray()
        self._scratch_a = np.empty(ALPHABET, dtype=np.int64)
        self._scratch_b = np.empty(ALPHABET, dtype=np.int64)

    def distribution(self) -> np.ndarray:
        a = self._scratch_a
        np.multiply(self.gained0, _BLEND_SCALE, out=a)
        np.floor_divide(a, self.denom0, out=a)
        # +1 floors for the dense orders are folded into the flat term.
        flat = 1
        use_order1 = self.order >= 1 and len(self.history) >= 1
        if use_order1:
            prev = self.history[-1]
            b = self._scratch_b
            np.multiply(self.gained1[prev], _BLEND_SCALE, out=b)
            np.floor_divide(b, int(self.denoms1[prev]), out=b)
            np.left_shift(b, 1, out=b)
            np.add(a, b, out=a)
            flat += 2
        for j in range(2, self.order + 1):
            if len(self.history) < j:
                continue
            ctx = bytes(self.history[-j:])
            base = self.base_sparse[j].get(ctx)
            extra = self.delta[j].get(ctx)
            if base is None and extra is None:
                flat += (_BLEND_SCALE // ALPHABET + 1) << j
                continue
            total = _COUNT_GAIN * (
                self.base_sparse_totals[j].get(ctx, 0)
                + self.delta_totals[j].get(ctx, 0)
            ) + ALPHABET
            unseen = _BLEND_SCALE // total + 1
            flat += unseen << j
            weight = 1 << j
            merged: dict[int, int] = dict(base) if base else {}
            if extra:
                for sym, cnt in extra.items():
                    merged[sym] = merged.get(sym, 0) + cnt
            for sym, cnt in merged.items():
                a[sym] += weight * (
                    ((cnt * _COUNT_GAIN + 1) * _BLEND_SCALE) // total + 1 - unseen
                )
        np.add(a, flat, out=a)
        return a

    def advance(self, symbol: int) -> None:
        self.gained0[symbol] += _COUNT_GAIN
        self.denom0 += _COUNT_GAIN
        history = self.history
        if self.order >= 1 and len(history) >= 1:
            prev = history[-1]
            self.gained1[prev, symbol] += _COUNT_GAIN
            self.denoms1[prev] += _COUNT_GAIN
        for j in range(2, self.order + 1):
            if len(history) >= j:
                ctx = bytes(history[-j:])
                tab = self.delta[j].setdefault(ctx, {})
                tab[symbol] = tab.get(symbol, 0) + 1
                self.delta_totals[j][ctx] = self.delta_totals[j].get(ctx, 0) + 1
        history.append(symbol)
        if len(history) > self.order:
            del history[: len(history) - self.order]


# ---------------------------------------------------------------------------
# Blob format and top-level codec entry points


@dataclass(frozen=True)
class CodedBlob:
    """One compressed text: header identifying the model, plus payload bits."""

    model_id: bytes
    version: int
    original_len: int
    payload_bits: int
    payload: bytes

    _HEADER = struct.Struct("<4sH8sII")

    def to_bytes(self) -> bytes:
        return (
            self._HEADER.pack(
                BLOB_MAGIC, self.version, self.model_id, self.original_len, self.payload_bits
            )
            + self.payload
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "CodedBlob":
        if len(data) < cls._HEADER.size:
            raise CodecError(f"blob truncated at byte {len(data)} (header incomplete)")
        magic, version, model_id, original_len, payload_bits = cls._HEADER.unpack_from(data)
        if magic != BLOB_MAGIC:
            raise CodecError(f"not a coded blob: bad magic {magic!r}")
        if version != BLOB_VERSION:
            raise CodecError(f"unsupported blob version {version}")
        expected = cls._HEADER.size + (payload_bits + 7) // 8
        if len(data) < expected:
            raise CodecError(f"payload truncated at byte {len(data)}, expected {expected}")
        if len(data) > expected:
            raise CodecError(f"trailing data after payload at byte {expected}")
        return cls(
            model_id=model_id,
            version=version,
            original_len=original_len,
            payload_bits=payload_bits,
            payload=data[cls._HEADER.size :],
        )


def encode_with_cost(model: ProbabilityModel, text: bytes) -> tuple[CodedBlob, float]:
    """Encode and also return the model's ideal code length in bits.

    The ideal length is Sigma -log2 p(symbol) along the true path; the
    payload is guaranteed to stay within 64 bits of its ceiling.
    """
    session = model.session()
    enc = _Encoder()
    ideal_bits = 0.0
    distribution = session.distribution
    advance = session.advance
    write_symbol = enc.write_symbol
    for symbol in list(text) + [EOF_SYMBOL]:
        cum = distribution().cumsum()
        cum_low = int(cum[symbol - 1]) if symbol else 0
        cum_high = int(cum[symbol])
        total = int(cum[-1])
        write_symbol(cum_low, cum_high, total)
        ideal_bits += -math.log2((cum_high - cum_low) / total)
        if symbol != EOF_SYMBOL:
            advance(symbol)
    payload_bits, payload = enc.finish()
    blob = CodedBlob(
        model_id=model.model_id,
        version=BLOB_VERSION,
        original_len=len(text),
        payload_bits=payload_bits,
        payload=payload,
    )
    return blob, ideal_bits


def encode(model: ProbabilityModel, text: bytes) -> CodedBlob:
    """Losslessly encode a byte string under the model."""
    return encode_with_cost(model, text)[0]


def decode(model: ProbabilityModel, blob: CodedBlob) -> bytes:
    """Invert encode; the model must be constructed identically."""
    if blob.model_id != model.model_id:
        raise CodecError(
            f"model identifier mismatch: blob {blob.model_id.hex()} vs model {model.model_id.hex()}"
        )
    session = model.session()
    dec = _Decoder(blob.payload, blob.payload_bits)
    out = bytearray()
    distribution = session.distribution
    advance = session.advance
    while True:
        cum = distribution().cumsum()
        total = int(cum[-1])
        target = dec.target(total)
        symbol = int(cum.searchsorted(target, side="right"))
        dec.consume(int(cum[symbol - 1]) if symbol else 0, int(cum[symbol]), total)
        if symbol == EOF_SYMBOL:
            if len(out) != blob.original_len:
                raise CodecError(
                    f"EOF after {len(out)} bytes, header declared {blob.original_len}"
                )
            return bytes(out)
        out.append(symbol)
        if len(out) > blob.original_len:
            raise CodecError(
                f"no EOF at declared length {blob.original_len}; payload corrupt"
            )
        advance(symbol)


def compressed_size_bytes(
    blob: CodedBlob,
    amortize_model: bool = False,
    model_bytes: int = 0,
    map_size: int = 1,
) -> float:
    """Per-element storage cost in bytes: payload, optionally plus the
    amortized share of a pre-shared model.  Blob headers are bookkeeping,
    not transmitted content, and are excluded here."""
    if amortize_model and map_size < 1:
        raise ValueError("map_size must be >= 1 when amortizing")
    size = float((blob.payload_bits + 7) // 8)
    if amortize_model:
        if model_bytes < 0:
            raise ValueError("model_bytes must be non-negative")
        size += model_bytes / map_size
    return size
