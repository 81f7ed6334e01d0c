"""Similarity-space replication: nested embeddings that fold text back in.

A single network G maps full image embeddings to a representation whose
every prefix length c is usable on its own.  Training minimizes, for
each configured prefix length, the KL divergence between the similarity
space of fused (prefix + text) vectors and the similarity space of the
full image embeddings, so short prefixes learn to carry exactly the
structure that captions cannot.

All gradients here are exact reverse-mode derivations, checked against
central finite differences in the test suite.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .nnkit import AdamState, DenseNet, adam_step, dump_params, parse_params
from .similarity import (
    PROB_FLOOR,
    SimilaritySpace,
    build_similarity_space,
    kl_divergence_space,
    normalize_rows,
)

MODEL_MAGIC = b"SSRG"
MODEL_VERSION = 1

DEFAULT_INIT_NOISE = 0.01

__all__ = [
    "SsrConfig",
    "SsrModel",
    "TrainReport",
    "default_nested_dims",
    "create_model",
    "fuse",
    "fuse_batch",
    "project",
    "seeded_subset",
    "ssr_loss",
    "ssr_loss_and_grad",
    "train",
    "save_model",
    "load_model",
]


def default_nested_dims(output_dim: int) -> tuple[int, ...]:
    """Prefix lengths trained by default: {16, 32, 64, 128, d_max} clipped."""
    dims = sorted({c for c in (16, 32, 64, 128, output_dim) if 1 <= c <= output_dim})
    return tuple(dims)


@dataclass(frozen=True)
class SsrConfig:
    """Hyperparameters for similarity-space replication training.

    alpha is the fusion weight: the normalized prefix half is scaled by
    alpha and the normalized text half by (1 - alpha).
    """

    nested_dims: tuple[int, ...] = ()
    temperature: float = 0.1
    alpha: float = 0.5
    epochs: int = 5
    learning_rate: float = 1e-4
    batch_size: int = 256
    seed: int = 0
    exclude_diagonal: bool = True
    swap_kl: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")
        if self.epochs < 0 or self.batch_size < 2:
            raise ValueError("epochs must be >= 0 and batch_size >= 2")
        if any(c < 1 for c in self.nested_dims):
            raise ValueError("nested dims must be positive")
        if any(a >= b for a, b in zip(self.nested_dims, self.nested_dims[1:])):
            raise ValueError(f"nested dims must be strictly increasing: {self.nested_dims}")


@dataclass
class SsrModel:
    """Projection network plus the config it was built with."""

    net: DenseNet
    config: SsrConfig

    @property
    def input_dim(self) -> int:
        return self.net.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.net.layer_sizes[-1]


@dataclass
class TrainReport:
    """Per-epoch mean losses (nats), final-epoch per-prefix terms, timing."""

    epoch_losses: list[float] = field(default_factory=list)
    dim_losses: dict[int, float] = field(default_factory=dict)
    steps: int = 0
    wall_time_s: float = 0.0


def create_model(
    input_dim: int,
    config: SsrConfig | None = None,
    *,
    output_dim: int | None = None,
    hidden: int | None = None,
    init_noise: float = DEFAULT_INIT_NOISE,
) -> SsrModel:
    """Build G: a linear map (optionally with one tanh hidden layer),
    identity-initialized plus seed-controlled Gaussian noise."""
    if output_dim is None:
        output_dim = input_dim
    config = config or SsrConfig()
    if not config.nested_dims:
        config = replace(config, nested_dims=default_nested_dims(output_dim))
    if max(config.nested_dims) > output_dim:
        raise ValueError(
            f"nested dims {config.nested_dims} exceed output dim {output_dim}"
        )
    if hidden is None:
        sizes: tuple[int, ...] = (input_dim, output_dim)
        activation = "identity"
    else:
        sizes = (input_dim, hidden, output_dim)
        activation = "tanh"
    net = DenseNet(
        sizes,
        activation=activation,
        init="identity",
        init_scale=init_noise,
        seed=config.seed,
    )
    return SsrModel(net=net, config=config)


def fuse(prefix: np.ndarray, text: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Weighted concatenation of the normalized prefix and text vectors.

    Returns [alpha * prefix/|prefix| ; (1-alpha) * text/|text|].  A
    zero-norm prefix is an error; a zero-norm text (degenerate caption)
    contributes a zero half.
    """
    prefix = np.asarray(prefix, dtype=np.float64)
    text = np.asarray(text, dtype=np.float64)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    pn = float(np.linalg.norm(prefix))
    if pn == 0.0:
        raise ValueError("zero-norm prefix cannot be fused")
    tn = float(np.linalg.norm(text))
    text_half = (1.0 - alpha) * (text / tn) if tn > 0.0 else np.zeros_like(text)
    return np.concatenate([alpha * (prefix / pn), text_half])


def fuse_batch(prefixes: np.ndarray, texts: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Row-wise fuse of (N, c) prefixes with (N, t) text embeddings."""
    prefixes = np.asarray(prefixes, dtype=np.float64)
    texts = np.asarray(texts, dtype=np.float64)
    if prefixes.shape[0] != texts.shape[0]:
        raise ValueError("prefix/text batch sizes differ")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if np.any(np.linalg.norm(prefixes, axis=1) == 0.0):
        raise ValueError("zero-norm prefix cannot be fused")
    left = alpha * normalize_rows(prefixes)
    right = (1.0 - alpha) * normalize_rows(texts, allow_zero=True)
    return np.hstack([left, right])


def project(model: SsrModel, images: np.ndarray, c: int) -> np.ndarray:
    """First c components of G(z); works on single vectors and batches."""
    if not 1 <= c <= model.output_dim:
        raise ValueError(f"prefix length {c} outside [1, {model.output_dim}]")
    out = model.net.forward(images)
    return out[..., :c]


def _student_space_with_cache(
    outputs: np.ndarray,
    texts_unit: np.ndarray,
    c: int,
    config: SsrConfig,
) -> tuple[SimilaritySpace, dict]:
    prefix = outputs[:, :c]
    pnorms = np.linalg.norm(prefix, axis=1, keepdims=True)
    if np.any(pnorms == 0.0):
        raise ValueError(f"zero-norm prefix at length {c}; cannot build student space")
    unit_prefix = prefix / pnorms
    fused = np.hstack(
        [config.alpha * unit_prefix, (1.0 - config.alpha) * texts_unit]
    )
    fnorms = np.linalg.norm(fused, axis=1, keepdims=True)
    if np.any(fnorms == 0.0):
        raise ValueError("zero-norm fused vector; alpha=0 requires nonzero texts")
    unit_fused = fused / fnorms
    sims = unit_fused @ unit_fused.T
    sims = (sims + sims.T) / 2.0
    np.fill_diagonal(sims, 1.0)
    scaled = sims / config.temperature
    if config.exclude_diagonal:
        np.fill_diagonal(scaled, -np.inf)
    scaled -= scaled.max(axis=1, keepdims=True)
    expd = np.exp(scaled)
    rows = expd / expd.sum(axis=1, keepdims=True)
    space = SimilaritySpace(
        sims=sims,
        rows=rows,
        temperature=config.temperature,
        exclude_diagonal=config.exclude_diagonal,
    )
    cache = {
        "pnorms": pnorms,
        "unit_prefix": unit_prefix,
        "fnorms": fnorms,
        "unit_fused": unit_fused,
    }
    return space, cache


def ssr_loss(
    model: SsrModel,
    images: np.ndarray,
    texts: np.ndarray,
    teacher: SimilaritySpace | None = None,
) -> tuple[float, dict[int, float]]:
    """Total replication loss and its per-prefix-length terms (nats).

    The teacher space is built from the full image embeddings when not
    supplied.  The student space for each prefix length c fuses the
    normalized c-prefix of G(z) with the normalized text embedding.
    """
    images = np.asarray(images, dtype=np.float64)
    texts = np.asarray(texts, dtype=np.float64)
    cfg = model.config
    if teacher is None:
        teacher = build_similarity_space(images, cfg.temperature, cfg.exclude_diagonal)
    outputs = model.net.forward(images)
    texts_unit = normalize_rows(texts, allow_zero=True)
    terms: dict[int, float] = {}
    for c in cfg.nested_dims:
        student, _ = _student_space_with_cache(outputs, texts_unit, c, cfg)
        terms[c] = kl_divergence_space(student, teacher, swap=cfg.swap_kl)
    return sum(terms.values()), terms


def ssr_loss_and_grad(
    model: SsrModel,
    images: np.ndarray,
    texts: np.ndarray,
    teacher: SimilaritySpace | None = None,
) -> tuple[float, dict[int, float], np.ndarray]:
    """Loss, per-prefix terms, and the exact gradient w.r.t. G's params."""
    images = np.asarray(images, dtype=np.float64)
    texts = np.asarray(texts, dtype=np.float64)
    cfg = model.config
    if teacher is None:
        teacher = build_similarity_space(images, cfg.temperature, cfg.exclude_diagonal)
    outputs, net_cache = model.net.forward_cached(images)
    texts_unit = normalize_rows(texts, allow_zero=True)
    grad_outputs = np.zeros_like(outputs)
    terms: dict[int, float] = {}
    for c in cfg.nested_dims:
        student, cache = _student_space_with_cache(outputs, texts_unit, c, cfg)
        terms[c] = kl_divergence_space(student, teacher, swap=cfg.swap_kl)

        p = student.rows
        q = teacher.rows
        if cfg.swap_kl:
            # loss = sum q * ln(q / max(p, floor)); flat below the floor.
            p_clamped = np.maximum(p, PROB_FLOOR)
            grad_rows = np.where(p > PROB_FLOOR, -q / p_clamped, 0.0)
        else:
            # loss = sum p * ln(p / max(q, floor)); p is 0 only where excluded.
            q_clamped = np.maximum(q, PROB_FLOOR)
            grad_rows = np.zeros_like(p)
            positive = p > 0.0
            grad_rows[positive] = np.log(p[positive] / q_clamped[positive]) + 1.0

        # Softmax backward per row (excluded entries have p == 0).
        dot = (p * grad_rows).sum(axis=1, keepdims=True)
        grad_sims = p * (grad_rows - dot) / cfg.temperature

        unit_fused = cache["unit_fused"]
        grad_unit_fused = (grad_sims + grad_sims.T) @ unit_fused
        # Row-normalization backward: remove the radial component.
        radial = (grad_unit_fused * unit_fused).sum(axis=1, keepdims=True)
        grad_fused = (grad_unit_fused - radial * unit_fused) / cache["fnorms"]

        grad_unit_prefix = cfg.alpha * grad_fused[:, :c]
        unit_prefix = cache["unit_prefix"]
        radial_p = (grad_unit_prefix * unit_prefix).sum(axis=1, keepdims=True)
        grad_prefix = (grad_unit_prefix - radial_p * unit_prefix) / cache["pnorms"]
        grad_outputs[:, :c] += grad_prefix

    flat_grad, _ = model.net.backward(net_cache, grad_outputs)
    return sum(terms.values()), terms, flat_grad


def seeded_subset(n: int, fraction: float, seed: int) -> np.ndarray:
    """Indices of floor(fraction * n) elements, chosen by seed, ascending.

    The same (n, fraction, seed) triple always selects the same subset, so
    data-efficiency comparisons across methods train on identical data.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    m = int(np.floor(fraction * n))
    if m < 2:
        raise ValueError(f"fraction {fraction} of {n} elements leaves {m} < 2 samples")
    if m == n:
        return np.arange(n)
    return np.sort(np.random.default_rng([seed, 0x5B5E7]).permutation(n)[:m])


def _batch_slices(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Split a permutation into batches, folding a trailing singleton in."""
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def train(
    model: SsrModel,
    images: np.ndarray,
    texts: np.ndarray,
    fraction: float = 1.0,
    *,
    epochs: int | None = None,
    base_seed: int | None = None,
    epoch_offset: int = 0,
) -> TrainReport:
    """Minibatch-train G in place; returns per-epoch mean losses.

    Each epoch reshuffles with a generator seeded by (base_seed, epoch
    index), so runs with identical seed/config/data are bitwise
    reproducible, and distributed callers can reproduce the schedule by
    offsetting the epoch index.  fraction < 1 trains on a seed-chosen
    subset (data-efficiency protocol).
    """
    images = np.asarray(images, dtype=np.float64)
    texts = np.asarray(texts, dtype=np.float64)
    if images.ndim != 2 or texts.ndim != 2 or images.shape[0] != texts.shape[0]:
        raise ValueError("images and texts must be (N, d) and (N, t) with equal N")
    cfg = model.config
    n = images.shape[0]
    if base_seed is None:
        base_seed = cfg.seed
    subset = seeded_subset(n, fraction, base_seed)
    m = subset.size
    n_epochs = cfg.epochs if epochs is None else epochs
    adam = AdamState.zeros(model.net.num_params)
    report = TrainReport()
    started = time.perf_counter()
    for epoch in range(n_epochs):
        rng = np.random.default_rng([base_seed, 0xE70C, epoch_offset + epoch])
        order = rng.permutation(m)
        step_losses: list[float] = []
        term_sums: dict[int, float] = {c: 0.0 for c in cfg.nested_dims}
        n_steps = 0
        for chunk in _batch_slices(order, cfg.batch_size):
            idx = subset[chunk]
            loss, terms, grad = ssr_loss_and_grad(model, images[idx], texts[idx])
            params = adam_step(model.net.get_params(), grad, adam, cfg.learning_rate)
            model.net.set_params(params)
            step_losses.append(loss)
            for c, value in terms.items():
                term_sums[c] += value
            n_steps += 1
        report.steps += n_steps
        report.epoch_losses.append(float(np.mean(step_losses)))
        if epoch == n_epochs - 1:
            report.dim_losses = {c: term_sums[c] / n_steps for c in cfg.nested_dims}
    report.wall_time_s = time.perf_counter() - started
    return report


# ---------------------------------------------------------------------------
# Checkpoint container: text config header, then the nnkit parameter blob.

_HEADER_SEP = b"\n%%\n"


def save_model(model: SsrModel, path: str) -> None:
    cfg = model.config
    lines = [
        "SSRMODEL 1",
        f"nested_dims={','.join(str(c) for c in cfg.nested_dims)}",
        f"temperature={cfg.temperature!r}",
        f"alpha={cfg.alpha!r}",
        f"epochs={cfg.epochs}",
        f"learning_rate={cfg.learning_rate!r}",
        f"batch_size={cfg.batch_size}",
        f"seed={cfg.seed}",
        f"exclude_diagonal={int(cfg.exclude_diagonal)}",
        f"swap_kl={int(cfg.swap_kl)}",
    ]
    with open(path, "wb") as fh:
        fh.write("\n".join(lines).encode())
        fh.write(_HEADER_SEP)
        fh.write(dump_params(model.net))


def load_model(path: str) -> SsrModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    head, sep, params = blob.partition(_HEADER_SEP)
    if not sep:
        raise ValueError("not a model file: missing header separator")
    lines = head.decode().splitlines()
    if not lines or lines[0] != "SSRMODEL 1":
        raise ValueError(f"not a model file: bad first line {lines[:1]!r}")
    fields: dict[str, str] = {}
    for line in lines[1:]:
        key, _, value = line.partition("=")
        fields[key] = value
    config = SsrConfig(
        nested_dims=tuple(int(c) for c in fields["nested_dims"].split(",")),
        temperature=float(fields["temperature"]),
        alpha=float(fields["alpha"]),
        epochs=int(fields["epochs"]),
        learning_rate=float(fields["learning_rate"]),
        batch_size=int(fields["batch_size"]),
        seed=int(fields["seed"]),
        exclude_diagonal=bool(int(fields["exclude_diagonal"])),
        swap_kl=bool(int(fields["swap_kl"])),
    )
    return SsrModel(net=parse_params(params), config=config)
