"""Dataset I/O, synthetic data generation, and the compressed-map format.

The synthetic generator builds a place-recognition-shaped dataset.
Places come in look-alike pairs that share a coarse appearance region
and separate only in a tail band of dimensions, imitating perceptual
aliasing: telling the twins of a pair apart from the leading dimensions
alone is impossible, but their captions always differ.  A handful of
leading channels carry extra place-discriminative variance, the way a
trained feature extractor concentrates signal unevenly across channels.
Every embedding shares a global mean offset (extractor bias), and items
within a place add isotropic fine detail plus a little sensor noise.
"""

from __future__ import annotations

import importlib.resources
import math
import os
import struct
import tempfile
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .baselines import (
    Quantizer,
    dequantize,
    pack_codes,
    quantize,
    quantizer_fit,
    unpack_codes,
)
from .ssr import SsrModel, fuse_batch, project
from .textcodec import (
    CodedBlob,
    ContextModel,
    ProbabilityModel,
    decode,
    encode,
    fit_context_model,
    load_context_model,
)
from .textembed import HashedBowEmbedder

MAP_MAGIC = b"SSRM"
MAP_VERSION = 1
SPLITS = ("reference", "query")
ENCODINGS = ("fp32", "fp16") + tuple(f"q{b}" for b in range(1, 17))

# Caption slot pools.  Sizes are tuned so that distinct places collide on
# some slots: caption-only retrieval must be useful but imperfect.
DEFAULT_VOCAB: tuple[tuple[str, ...], ...] = (
    ("quiet", "crowded", "shaded", "sunlit", "narrow", "wide"),
    ("plaza", "alley", "courtyard", "market", "terrace", "crossing"),
    ("fountain", "clocktower", "archway", "mural", "kiosk", "footbridge"),
)

DEFAULT_ATTRIBUTES: tuple[str, ...] = (
    "bicycle", "awning", "lamppost", "bench", "van", "scooter",
    "planter", "railing", "staircase", "doorway", "banner", "cart",
)

__all__ = [
    "DatasetRecord",
    "SyntheticSpec",
    "CompressedMap",
    "SPLITS",
    "ENCODINGS",
    "DEFAULT_VOCAB",
    "DEFAULT_ATTRIBUTES",
    "load_dataset",
    "save_dataset",
    "split_records",
    "stack_embeddings",
    "stack_text_embeddings",
    "place_ids",
    "generate_synthetic",
    "fit_caption_codec",
    "bundled_captions",
    "write_map",
    "read_map",
    "map_fused_vectors",
    "bytes_per_element",
]


@dataclass
class DatasetRecord:
    id: str
    place_id: int
    split: str
    caption: str
    embedding: np.ndarray
    text_embedding: np.ndarray | None = None


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for the synthetic place-recognition dataset.

    Geometry: consecutive places (0,1), (2,3), ... are look-alike pairs.
    Both members of a pair share a coarse region center drawn with
    per-dimension scale coarse_sigma, boosted by sqrt(1 + head_gain) on
    the first head_dims channels; each member then adds its own offset of
    scale alias_sigma, but only on dimensions >= alias_start, so the pair
    coincides everywhere else.  All embeddings share one global mean
    offset of scale mean_sigma, and every item adds isotropic fine
    variation (fine_sigma) plus sensor noise (noise_sigma).

    Captions: one template word per vocabulary slot at place level (the
    members of a pair always get different templates when the vocabulary
    allows), plus attribute_words filler attributes per item.
    """

    num_places: int = 50
    items_per_place: int = 40
    dim: int = 256
    coarse_sigma: float = 1.0
    head_dims: int = 16
    head_gain: float = 1.0
    alias_start: int = 128
    alias_sigma: float = 0.3
    fine_sigma: float = 0.5
    noise_sigma: float = 0.02
    mean_sigma: float = 1.0
    attribute_words: int = 2
    vocabulary: tuple[tuple[str, ...], ...] = DEFAULT_VOCAB
    attribute_pool: tuple[str, ...] = DEFAULT_ATTRIBUTES
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_places < 2 or self.items_per_place < 2:
            raise ValueError("need at least 2 places and 2 items per place")
        if self.dim < 1 or not 0 <= self.head_dims <= self.dim:
            raise ValueError(f"bad dims: dim={self.dim}, head_dims={self.head_dims}")
        if not 0 <= self.alias_start <= self.dim:
            raise ValueError(f"alias_start {self.alias_start} outside [0, {self.dim}]")
        if self.coarse_sigma <= 0.0:
            raise ValueError("coarse_sigma must be positive")
        if self.head_gain < 0.0:
            raise ValueError("head_gain must be non-negative")
        if min(self.alias_sigma, self.fine_sigma, self.noise_sigma, self.mean_sigma) < 0.0:
            raise ValueError("sigmas must be non-negative")
        if self.attribute_words < 0 or self.attribute_words > len(self.attribute_pool):
            raise ValueError("attribute_words outside the attribute pool size")
        if not self.vocabulary or any(len(pool) == 0 for pool in self.vocabulary):
            raise ValueError("vocabulary slots must be nonempty")


# ---------------------------------------------------------------------------
# Line-delimited dataset format: id, place_id, split, caption, embedding.


def _escape(text: str) -> str:
    return (
        text.replace("\\", "\\\\")
        .replace("\t", "\\t")
        .replace("\n", "\\n")
        .replace("\r", "\\r")
    )


_UNESCAPE = {"\\": "\\", "t": "\t", "n": "\n", "r": "\r"}


def _unescape(text: str) -> str:
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\":
            if i + 1 >= len(text) or text[i + 1] not in _UNESCAPE:
                raise ValueError(f"bad escape at position {i}")
            out.append(_UNESCAPE[text[i + 1]])
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def save_dataset(records: Sequence[DatasetRecord], path: str) -> None:
    lines = []
    for rec in records:
        values = " ".join(repr(float(x)) for x in rec.embedding)
        lines.append(
            f"{rec.id}\t{rec.place_id}\t{rec.split}\t{_escape(rec.caption)}\t{values}"
        )
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def load_dataset(path: str, embedder: HashedBowEmbedder | None = None) -> list[DatasetRecord]:
    """Parse the line-delimited record format and attach text embeddings.

    Every record's caption is embedded with the given (or default)
    hashing embedder, since the file format does not carry text vectors.
    """
    if embedder is None:
        embedder = HashedBowEmbedder()
    with open(path, "r", encoding="utf-8") as fh:
        raw_lines = fh.read().split("\n")
    records: list[DatasetRecord] = []
    dim: int | None = None
    for lineno, line in enumerate(raw_lines, start=1):
        if line == "":
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ValueError(f"line {lineno}: expected 5 tab-separated fields, got {len(parts)}")
        rec_id, place_text, split, caption_raw, values = parts
        if not rec_id:
            raise ValueError(f"line {lineno}: empty id")
        try:
            place_id = int(place_text)
        except ValueError:
            raise ValueError(f"line {lineno}: place_id {place_text!r} is not an integer") from None
        if place_id < 0:
            raise ValueError(f"line {lineno}: negative place_id {place_id}")
        if split not in SPLITS:
            raise ValueError(f"line {lineno}: split {split!r} not in {SPLITS}")
        try:
            caption = _unescape(caption_raw)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        try:
            embedding = np.array([float(v) for v in values.split()], dtype=np.float64)
        except ValueError:
            raise ValueError(f"line {lineno}: embedding is not a list of decimal floats") from None
        if embedding.size == 0:
            raise ValueError(f"line {lineno}: empty embedding")
        if dim is None:
            dim = embedding.size
        elif embedding.size != dim:
            raise ValueError(f"line {lineno}: embedding dim {embedding.size} != {dim}")
        records.append(
            DatasetRecord(
                id=rec_id,
                place_id=place_id,
                split=split,
                caption=caption,
                embedding=embedding,
                text_embedding=embedder.embed_text(caption),
            )
        )
    if not records:
        raise ValueError("no records")
    return records


def split_records(records: Sequence[DatasetRecord]) -> tuple[list[DatasetRecord], list[DatasetRecord]]:
    refs = [r for r in records if r.split == "reference"]
    queries = [r for r in records if r.split == "query"]
    return refs, queries


def stack_embeddings(records: Sequence[DatasetRecord]) -> np.ndarray:
    return np.asarray([r.embedding for r in records], dtype=np.float64)


def stack_text_embeddings(records: Sequence[DatasetRecord]) -> np.ndarray:
    if any(r.text_embedding is None for r in records):
        raise ValueError("records are missing text embeddings")
    return np.asarray([r.text_embedding for r in records], dtype=np.float64)


def place_ids(records: Sequence[DatasetRecord]) -> np.ndarray:
    return np.asarray([r.place_id for r in records], dtype=np.int64)


# ---------------------------------------------------------------------------
# Synthetic data


def generate_synthetic(
    spec: SyntheticSpec, embedder: HashedBowEmbedder | None = None
) -> list[DatasetRecord]:
    """Deterministic synthetic dataset; the last item of each place is the
    held-out query."""
    if embedder is None:
        embedder = HashedBowEmbedder()
    rng = np.random.default_rng([spec.seed, 0x5F17])
    profile = np.full(spec.dim, spec.coarse_sigma)
    profile[: spec.head_dims] = spec.coarse_sigma * math.sqrt(1.0 + spec.head_gain)
    mean_offset = rng.normal(size=spec.dim) * spec.mean_sigma
    template_space = math.prod(len(pool) for pool in spec.vocabulary)
    records: list[DatasetRecord] = []
    region_center = np.zeros(spec.dim)
    prev_template: list[str] | None = None
    for p in range(spec.num_places):
        if p % 2 == 0:
            region_center = rng.normal(size=spec.dim) * profile
        center = region_center.copy()
        center[spec.alias_start :] += (
            rng.normal(size=spec.dim - spec.alias_start) * spec.alias_sigma
        )
        while True:
            template = [pool[int(rng.integers(len(pool)))] for pool in spec.vocabulary]
            if p % 2 == 0 or template_space == 1 or template != prev_template:
                break
        prev_template = template
        for j in range(spec.items_per_place):
            fine = rng.normal(size=spec.dim) * spec.fine_sigma
            noise = rng.normal(size=spec.dim) * spec.noise_sigma
            picked = [
                spec.attribute_pool[int(k)]
                for k in rng.choice(len(spec.attribute_pool), size=spec.attribute_words, replace=False)
            ]
            caption = _render_caption(template, picked)
            records.append(
                DatasetRecord(
                    id=f"p{p:03d}-i{j:03d}",
                    place_id=p,
                    split="query" if j == spec.items_per_place - 1 else "reference",
                    caption=caption,
                    embedding=mean_offset + center + fine + noise,
                    text_embedding=embedder.embed_text(caption),
                )
            )
    return records


def _render_caption(template: list[str], attributes: list[str]) -> str:
    head = " ".join(template[:2])
    rest = " ".join(template[2:])
    caption = f"a {head} near the {rest}".rstrip()
    if attributes:
        caption += " with a " + " and a ".join(attributes)
    return caption


def fit_caption_codec(records: Sequence[DatasetRecord], order: int = 3) -> ContextModel:
    """Context model fitted on the reference captions (the pre-shared
    dictionary both ends of the pipeline hold)."""
    refs, _ = split_records(records)
    corpus = [r.caption.encode("utf-8") for r in refs]
    return fit_context_model(corpus, order=order)


def bundled_captions() -> list[bytes]:
    """The caption corpus shipped with the package, one caption per line."""
    text = (
        importlib.resources.files("ssrmap")
        .joinpath("data/captions.txt")
        .read_text(encoding="utf-8")
    )
    return [line.encode("utf-8") for line in text.splitlines() if line]


# ---------------------------------------------------------------------------
# Compressed map binary


@dataclass
class CompressedMap:
    c: int
    encoding: str
    ids: list[str]
    prefixes: np.ndarray
    blobs: list[CodedBlob]
    codec_blob: bytes
    config_summary: str
    quantizer: Quantizer | None = None
    file_bytes: int = 0

    @property
    def size(self) -> int:
        return len(self.ids)

    def codec_model(self) -> ProbabilityModel:
        return load_context_model(self.codec_blob)


_MAP_HEADER = struct.Struct("<4sHIHBB")


def _encoding_parts(encoding: str) -> tuple[int, int]:
    if encoding == "fp32":
        return 0, 0
    if encoding == "fp16":
        return 1, 0
    if encoding.startswith("q") and encoding[1:].isdigit():
        bits = int(encoding[1:])
        if 1 <= bits <= 16:
            return 2, bits
    raise ValueError(f"unknown encoding {encoding!r}; pick from fp32, fp16, q1..q16")


def _prefix_bytes(encoding: str, c: int) -> int:
    kind, bits = _encoding_parts(encoding)
    if kind == 0:
        return 4 * c
    if kind == 1:
        return 2 * c
    return math.ceil(c * bits / 8)


def _atomic_write(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_map(
    path: str,
    records: Sequence[DatasetRecord],
    model: SsrModel,
    c: int,
    codec_model: ProbabilityModel,
    encoding: str = "fp32",
) -> CompressedMap:
    """Project each record to its c-prefix, encode its caption, and write
    the map file.  Returns the in-memory map with file_bytes filled."""
    kind, bits = _encoding_parts(encoding)
    if records:
        prefixes = project(model, stack_embeddings(records), c)
    else:
        prefixes = np.zeros((0, c))
    blobs = [encode(codec_model, r.caption.encode("utf-8")) for r in records]
    codec_blob = codec_model.serialize()
    cfg = model.config
    config_summary = (
        f"nested_dims={','.join(str(x) for x in cfg.nested_dims)}"
        f" temperature={cfg.temperature!r} alpha={cfg.alpha!r} seed={cfg.seed}"
    )

    quantizer: Quantizer | None = None
    out = bytearray()
    out += _MAP_HEADER.pack(MAP_MAGIC, MAP_VERSION, len(records), c, kind, bits)
    out += struct.pack("<I", len(codec_blob))
    out += codec_blob
    summary_bytes = config_summary.encode("utf-8")
    out += struct.pack("<I", len(summary_bytes))
    out += summary_bytes
    if kind == 2:
        if not records:
            raise ValueError("cannot fit a quantizer on an empty map")
        quantizer = quantizer_fit(prefixes, bits)
        out += quantizer.mins.astype("<f8").tobytes()
        out += quantizer.maxs.astype("<f8").tobytes()

    stored = np.zeros_like(prefixes)
    for i, rec in enumerate(records):
        id_bytes = rec.id.encode("utf-8")
        out += struct.pack("<H", len(id_bytes))
        out += id_bytes
        if kind == 0:
            raw = prefixes[i].astype("<f4")
            stored[i] = raw.astype(np.float64)
            out += raw.tobytes()
        elif kind == 1:
            raw = prefixes[i].astype("<f2")
            stored[i] = raw.astype(np.float64)
            out += raw.tobytes()
        else:
            codes = quantize(quantizer, prefixes[i])
            stored[i] = dequantize(quantizer, codes)
            out += pack_codes(quantizer, codes)
        blob_bytes = blobs[i].to_bytes()
        out += struct.pack("<I", len(blob_bytes))
        out += blob_bytes

    _atomic_write(path, bytes(out))
    return CompressedMap(
        c=c,
        encoding=encoding,
        ids=[r.id for r in records],
        prefixes=stored,
        blobs=blobs,
        codec_blob=codec_blob,
        config_summary=config_summary,
        quantizer=quantizer,
        file_bytes=len(out),
    )


def read_map(path: str) -> CompressedMap:
    with open(path, "rb") as fh:
        raw = fh.read()

    def need(offset: int, count: int) -> None:
        if offset + count > len(raw):
            raise ValueError(f"map truncated at byte {len(raw)}")

    need(0, _MAP_HEADER.size)
    magic, version, n, c, kind, bits = _MAP_HEADER.unpack_from(raw)
    if magic != MAP_MAGIC:
        raise ValueError(f"bad magic {magic!r}: not a map file")
    if version != MAP_VERSION:
        raise ValueError(f"unsupported map version {version}")
    if kind == 0:
        encoding = "fp32"
    elif kind == 1:
        encoding = "fp16"
    elif kind == 2 and 1 <= bits <= 16:
        encoding = f"q{bits}"
    else:
        raise ValueError(f"bad encoding byte {kind}/{bits}")
    off = _MAP_HEADER.size
    need(off, 4)
    (codec_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    need(off, codec_len)
    codec_blob = raw[off : off + codec_len]
    off += codec_len
    need(off, 4)
    (summary_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    need(off, summary_len)
    config_summary = raw[off : off + summary_len].decode("utf-8")
    off += summary_len

    quantizer: Quantizer | None = None
    if kind == 2:
        need(off, 16 * c)
        mins = np.frombuffer(raw, dtype="<f8", count=c, offset=off).copy()
        off += 8 * c
        maxs = np.frombuffer(raw, dtype="<f8", count=c, offset=off).copy()
        off += 8 * c
        quantizer = Quantizer(bits=bits, mins=mins, maxs=maxs)

    ids: list[str] = []
    prefixes = np.zeros((n, c))
    blobs: list[CodedBlob] = []
    pbytes = _prefix_bytes(encoding, c)
    for i in range(n):
        need(off, 2)
        (id_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        need(off, id_len)
        ids.append(raw[off : off + id_len].decode("utf-8"))
        off += id_len
        need(off, pbytes)
        chunk = raw[off : off + pbytes]
        off += pbytes
        if kind == 0:
            prefixes[i] = np.frombuffer(chunk, dtype="<f4").astype(np.float64)
        elif kind == 1:
            prefixes[i] = np.frombuffer(chunk, dtype="<f2").astype(np.float64)
        else:
            prefixes[i] = dequantize(quantizer, unpack_codes(quantizer, chunk))
        need(off, 4)
        (blob_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        need(off, blob_len)
        blobs.append(CodedBlob.from_bytes(raw[off : off + blob_len]))
        off += blob_len
    if off != len(raw):
        raise ValueError(f"trailing data after element {n} at byte {off}")
    return CompressedMap(
        c=c,
        encoding=encoding,
        ids=ids,
        prefixes=prefixes,
        blobs=blobs,
        codec_blob=codec_blob,
        config_summary=config_summary,
        quantizer=quantizer,
        file_bytes=len(raw),
    )


def map_fused_vectors(
    cmap: CompressedMap,
    embedder: HashedBowEmbedder | None = None,
    alpha: float = 0.5,
) -> np.ndarray:
    """Decode every caption, embed it, and fuse with the stored prefix:
    the reference-side retrieval representation."""
    if embedder is None:
        embedder = HashedBowEmbedder()
    codec = cmap.codec_model()
    texts = np.asarray(
        [
            embedder.embed_text(decode(codec, blob).decode("utf-8"))
            for blob in cmap.blobs
        ]
    )
    return fuse_batch(cmap.prefixes, texts, alpha)


def bytes_per_element(cmap: CompressedMap, amortize_header: bool = False) -> float:
    """Mean per-element cost: prefix bytes plus caption payload bytes.

    With amortize_header the whole file size is spread over N instead,
    so format overhead (header, ids, blob framing) is included.
    """
    if cmap.size == 0:
        raise ValueError("empty map has no per-element cost")
    if amortize_header:
        return cmap.file_bytes / cmap.size
    pbytes = _prefix_bytes(cmap.encoding, cmap.c)
    payload = float(np.mean([math.ceil(b.payload_bits / 8) for b in cmap.blobs]))
    return pbytes + payload
