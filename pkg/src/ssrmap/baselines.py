"""Comparison methods: PCA, a small autoencoder, scalar quantization, and
the PCA-plus-compressed-text hybrid.

PCA is solved exactly through the symmetric eigendecomposition of the
(biased, 1/N) covariance so that the mean reconstruction error equals
the sum of the trailing eigenvalues.  The autoencoder reuses nnkit and
trains with the same Adam defaults as the main method.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .nnkit import AdamState, DenseNet, adam_step, dump_params, parse_params
from .ssr import _batch_slices, fuse, seeded_subset
from .textcodec import CodedBlob, ProbabilityModel, decode, encode

PCA_MAGIC = b"SSRP"
PCA_VERSION = 1
AE_MAGIC = b"SSRA"
AE_VERSION = 1

__all__ = [
    "PcaModel",
    "pca_fit",
    "pca_project",
    "pca_reconstruct",
    "save_pca",
    "load_pca",
    "AutoencoderModel",
    "ae_create",
    "ae_train",
    "ae_encode",
    "ae_reconstruct",
    "ae_mse",
    "ae_mse_and_grad",
    "ae_get_params",
    "ae_set_params",
    "save_ae",
    "load_ae",
    "Quantizer",
    "quantizer_fit",
    "quantize",
    "dequantize",
    "quantization_error_bound",
    "packed_size",
    "pack_codes",
    "unpack_codes",
    "HybridElement",
    "hybrid_compress",
    "hybrid_fused_vectors",
    "hybrid_bytes_per_element",
]


# ---------------------------------------------------------------------------
# PCA


@dataclass(frozen=True)
class PcaModel:
    """Top-c principal directions plus the full eigenvalue spectrum.

    ``components`` rows are orthonormal, in descending eigenvalue order,
    with a deterministic sign (largest-magnitude entry positive).
    ``eigenvalues`` keeps all d values so trailing-error identities stay
    computable after fitting.
    """

    mean: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.mean.shape[0]

    @property
    def output_dim(self) -> int:
        return self.components.shape[0]


def pca_fit(data: np.ndarray, c: int) -> PcaModel:
    """Fit the top-c principal components of (N, d) data.

    Requires at least c+1 samples.  Uses the 1/N covariance so the mean
    squared reconstruction error of the training data equals the sum of
    the trailing d-c eigenvalues.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError("pca_fit expects an (N, d) array")
    n, d = data.shape
    if not 1 <= c <= d:
        raise ValueError(f"target dim {c} outside [1, {d}]")
    if n < c + 1:
        raise ValueError(f"need at least {c + 1} samples for {c} components, got {n}")
    mean = data.mean(axis=0)
    centered = data - mean
    cov = (centered.T @ centered) / n
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues = eigenvalues[order]
    components = eigenvectors[:, order].T[:c]
    # Deterministic sign: flip each row so its largest-magnitude entry is
    # positive; eigenvectors are otherwise defined only up to sign.
    for row in components:
        peak = row[np.argmax(np.abs(row))]
        if peak < 0.0:
            row *= -1.0
    return PcaModel(mean=mean, components=components, eigenvalues=eigenvalues)


def pca_project(model: PcaModel, vectors: np.ndarray) -> np.ndarray:
    """Coordinates of vectors in the principal basis: components @ (v - mean)."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.shape[-1] != model.input_dim:
        raise ValueError(
            f"dimension mismatch: {vectors.shape[-1]} vs model {model.input_dim}"
        )
    return (vectors - model.mean) @ model.components.T


def pca_reconstruct(model: PcaModel, coords: np.ndarray) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape[-1] != model.output_dim:
        raise ValueError(
            f"dimension mismatch: {coords.shape[-1]} vs model {model.output_dim}"
        )
    return coords @ model.components + model.mean


_PCA_HEADER = struct.Struct("<4sHII")


def save_pca(model: PcaModel, path: str) -> None:
    d = model.input_dim
    c = model.output_dim
    with open(path, "wb") as fh:
        fh.write(_PCA_HEADER.pack(PCA_MAGIC, PCA_VERSION, d, c))
        fh.write(model.mean.astype("<f8").tobytes())
        fh.write(model.eigenvalues.astype("<f8").tobytes())
        fh.write(model.components.astype("<f8").tobytes())


def load_pca(path: str) -> PcaModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _PCA_HEADER.size:
        raise ValueError("truncated PCA file")
    magic, version, d, c = _PCA_HEADER.unpack_from(blob)
    if magic != PCA_MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != PCA_VERSION:
        raise ValueError(f"unsupported PCA version {version}")
    expected = _PCA_HEADER.size + 8 * (d + d + c * d)
    if len(blob) != expected:
        raise ValueError(f"PCA payload length {len(blob)} != expected {expected}")
    off = _PCA_HEADER.size
    mean = np.frombuffer(blob, dtype="<f8", count=d, offset=off).copy()
    off += 8 * d
    eigenvalues = np.frombuffer(blob, dtype="<f8", count=d, offset=off).copy()
    off += 8 * d
    components = (
        np.frombuffer(blob, dtype="<f8", count=c * d, offset=off).reshape(c, d).copy()
    )
    return PcaModel(mean=mean, components=components, eigenvalues=eigenvalues)


# ---------------------------------------------------------------------------
# Autoencoder


@dataclass
class AutoencoderModel:
    """Encoder/decoder pair with the hyperparameters it was trained with."""

    encoder: DenseNet
    decoder: DenseNet
    epochs: int = 5
    learning_rate: float = 1e-4
    epoch_losses: list[float] = field(default_factory=list)

    @property
    def input_dim(self) -> int:
        return self.encoder.layer_sizes[0]

    @property
    def code_dim(self) -> int:
        return self.encoder.layer_sizes[-1]


def ae_create(
    dim: int,
    c: int,
    *,
    hidden: int | None = None,
    init: str = "gaussian",
    init_scale: float = 0.01,
    seed: int = 0,
) -> AutoencoderModel:
    if not 1 <= c <= dim:
        raise ValueError(f"code dim {c} outside [1, {dim}]")
    if hidden is None:
        enc_sizes: tuple[int, ...] = (dim, c)
        dec_sizes: tuple[int, ...] = (c, dim)
        activation = "identity"
    else:
        enc_sizes = (dim, hidden, c)
        dec_sizes = (c, hidden, dim)
        activation = "tanh"
    encoder = DenseNet(enc_sizes, activation=activation, init=init, init_scale=init_scale, seed=seed)
    decoder = DenseNet(dec_sizes, activation=activation, init=init, init_scale=init_scale, seed=seed + 1)
    return AutoencoderModel(encoder=encoder, decoder=decoder)


def ae_encode(model: AutoencoderModel, vectors: np.ndarray) -> np.ndarray:
    return model.encoder.forward(vectors)


def ae_reconstruct(model: AutoencoderModel, vectors: np.ndarray) -> np.ndarray:
    return model.decoder.forward(model.encoder.forward(vectors))


def ae_mse(model: AutoencoderModel, data: np.ndarray) -> float:
    """Mean over samples of the squared L2 reconstruction error."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    err = ae_reconstruct(model, data) - data
    return float((err * err).sum() / data.shape[0])


def ae_get_params(model: AutoencoderModel) -> np.ndarray:
    return np.concatenate([model.encoder.get_params(), model.decoder.get_params()])


def ae_set_params(model: AutoencoderModel, params: np.ndarray) -> None:
    n_enc = model.encoder.num_params
    model.encoder.set_params(params[:n_enc])
    model.decoder.set_params(params[n_enc:])


def ae_mse_and_grad(model: AutoencoderModel, data: np.ndarray) -> tuple[float, np.ndarray]:
    """MSE plus its exact gradient in ae_get_params layout."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    n = data.shape[0]
    codes, enc_cache = model.encoder.forward_cached(data)
    recon, dec_cache = model.decoder.forward_cached(codes)
    err = recon - data
    loss = float((err * err).sum() / n)
    dec_grads, grad_codes = model.decoder.backward(dec_cache, 2.0 * err / n)
    enc_grads, _ = model.encoder.backward(enc_cache, grad_codes)
    return loss, np.concatenate([enc_grads, dec_grads])


def ae_train(
    data: np.ndarray,
    c: int,
    *,
    epochs: int = 5,
    learning_rate: float = 1e-4,
    batch_size: int = 256,
    seed: int = 0,
    hidden: int | None = None,
    init: str = "gaussian",
    init_scale: float = 0.01,
    fraction: float = 1.0,
) -> AutoencoderModel:
    """Train an autoencoder to reconstruct the data through a c-dim code.

    Defaults mirror the main method's training recipe (5 epochs, Adam at
    1e-4).  fraction selects the same seed-keyed subset as ssr.train so
    data-efficiency comparisons see identical training sets.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("ae_train expects a nonempty (N, d) array")
    if epochs < 0 or batch_size < 2:
        raise ValueError("epochs must be >= 0 and batch_size >= 2")
    model = ae_create(
        data.shape[1], c, hidden=hidden, init=init, init_scale=init_scale, seed=seed
    )
    model.epochs = epochs
    model.learning_rate = learning_rate
    subset = seeded_subset(data.shape[0], fraction, seed)
    enc_state = AdamState.zeros(model.encoder.num_params)
    dec_state = AdamState.zeros(model.decoder.num_params)
    for epoch in range(epochs):
        rng = np.random.default_rng([seed, 0xAE01, epoch])
        order = rng.permutation(subset.size)
        batch_losses = []
        for chunk in _batch_slices(order, batch_size):
            batch = data[subset[chunk]]
            loss, grad = ae_mse_and_grad(model, batch)
            n_enc = model.encoder.num_params
            model.encoder.set_params(
                adam_step(model.encoder.get_params(), grad[:n_enc], enc_state, learning_rate)
            )
            model.decoder.set_params(
                adam_step(model.decoder.get_params(), grad[n_enc:], dec_state, learning_rate)
            )
            batch_losses.append(loss)
        model.epoch_losses.append(float(np.mean(batch_losses)))
    return model


_AE_HEADER = struct.Struct("<4sHId")


def save_ae(model: AutoencoderModel, path: str) -> None:
    enc = dump_params(model.encoder)
    dec = dump_params(model.decoder)
    with open(path, "wb") as fh:
        fh.write(_AE_HEADER.pack(AE_MAGIC, AE_VERSION, model.epochs, model.learning_rate))
        fh.write(struct.pack("<I", len(enc)))
        fh.write(enc)
        fh.write(struct.pack("<I", len(dec)))
        fh.write(dec)


def load_ae(path: str) -> AutoencoderModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _AE_HEADER.size or blob[:4] != AE_MAGIC:
        raise ValueError("not an autoencoder file")
    _, version, epochs, learning_rate = _AE_HEADER.unpack_from(blob)
    if version != AE_VERSION:
        raise ValueError(f"unsupported autoencoder version {version}")
    off = _AE_HEADER.size
    parts = []
    for _ in range(2):
        (length,) = struct.unpack_from("<I", blob, off)
        off += 4
        parts.append(parse_params(blob[off : off + length]))
        off += length
    if off != len(blob):
        raise ValueError("trailing data in autoencoder file")
    return AutoencoderModel(
        encoder=parts[0], decoder=parts[1], epochs=epochs, learning_rate=learning_rate
    )


# ---------------------------------------------------------------------------
# Scalar quantization


@dataclass(frozen=True)
class Quantizer:
    """Per-dimension uniform quantizer over [min, max] with 2^bits levels."""

    bits: int
    mins: np.ndarray
    maxs: np.ndarray

    @property
    def dim(self) -> int:
        return self.mins.shape[0]

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1


def quantizer_fit(data: np.ndarray, bits: int) -> Quantizer:
    if not 1 <= bits <= 16:
        raise ValueError(f"bits must be in 1..16, got {bits}")
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("quantizer_fit expects a nonempty (N, d) array")
    return Quantizer(bits=bits, mins=data.min(axis=0), maxs=data.max(axis=0))


def _check_dim(q: Quantizer, arr: np.ndarray) -> None:
    if arr.shape[-1] != q.dim:
        raise ValueError(f"dimension mismatch: {arr.shape[-1]} vs quantizer {q.dim}")


def quantize(q: Quantizer, vectors: np.ndarray) -> np.ndarray:
    """Integer codes in [0, 2^bits - 1]; out-of-range values clamp.

    Rounding is half-up (floor(x + 0.5)) per the format contract.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    _check_dim(q, vectors)
    span = q.maxs - q.mins
    # A constant dimension (span 0) clamps to min, scales to 0, codes to 0.
    safe = np.where(span == 0.0, 1.0, span)
    clamped = np.clip(vectors, q.mins, q.maxs)
    scaled = (clamped - q.mins) / safe * q.levels
    return np.clip(np.floor(scaled + 0.5), 0, q.levels).astype(np.uint16)


def dequantize(q: Quantizer, codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes)
    _check_dim(q, codes)
    span = q.maxs - q.mins
    return q.mins + codes.astype(np.float64) * (span / q.levels)


def quantization_error_bound(q: Quantizer) -> np.ndarray:
    """Per-dimension worst-case |dequantize(quantize(v)) - clamp(v)|."""
    return (q.maxs - q.mins) / (2.0 * q.levels)


def packed_size(q: Quantizer) -> int:
    return math.ceil(q.dim * q.bits / 8)


def pack_codes(q: Quantizer, codes: np.ndarray) -> bytes:
    """Tight big-endian bit packing of one code vector, zero-padded."""
    codes = np.asarray(codes, dtype=np.uint16)
    _check_dim(q, codes)
    shifts = np.arange(q.bits - 1, -1, -1, dtype=np.uint16)
    bits = ((codes[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bits.ravel()).tobytes()


def unpack_codes(q: Quantizer, blob: bytes) -> np.ndarray:
    if len(blob) != packed_size(q):
        raise ValueError(f"packed length {len(blob)} != expected {packed_size(q)}")
    raw = np.frombuffer(blob, dtype=np.uint8)
    bits = np.unpackbits(raw)[: q.dim * q.bits].reshape(q.dim, q.bits)
    weights = (1 << np.arange(q.bits - 1, -1, -1)).astype(np.uint32)
    return (bits.astype(np.uint32) @ weights).astype(np.uint16)


# ---------------------------------------------------------------------------
# PCA coordinates + compressed caption hybrid


@dataclass(frozen=True)
class HybridElement:
    coords: np.ndarray
    blob: CodedBlob


def hybrid_compress(
    pca: PcaModel,
    codec_model: ProbabilityModel,
    embeddings: np.ndarray,
    captions: list[str],
) -> list[HybridElement]:
    """Per element: PCA coordinates of the image embedding plus the
    losslessly coded caption."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.shape[0] != len(captions):
        raise ValueError("embedding/caption counts differ")
    coords = pca_project(pca, embeddings)
    return [
        HybridElement(coords=coords[i], blob=encode(codec_model, captions[i].encode("utf-8")))
        for i in range(len(captions))
    ]


def hybrid_fused_vectors(
    elements: list[HybridElement],
    codec_model: ProbabilityModel,
    embedder,
    alpha: float = 0.5,
) -> np.ndarray:
    """Decode each caption, embed it, and fuse with the PCA coordinates
    using the same rule as the main method."""
    rows = []
    for element in elements:
        text = decode(codec_model, element.blob).decode("utf-8")
        rows.append(fuse(element.coords, embedder.embed_text(text), alpha))
    return np.asarray(rows)


def hybrid_bytes_per_element(elements: list[HybridElement]) -> float:
    """Mean of fp32 coordinate bytes plus coded caption payload bytes."""
    if not elements:
        raise ValueError("no elements")
    sizes = [
        4 * element.coords.shape[0] + math.ceil(element.blob.payload_bits / 8)
        for element in elements
    ]
    return float(np.mean(sizes))
