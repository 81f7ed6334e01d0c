"""Federated training: partition data across nodes, train locally,
average parameters.

Nodes run sequentially in-process.  Determinism comes from deriving each
node's shuffle schedule from (global seed + node id, round); partitions
decide membership randomly but keep each node's indices ascending, so a
single-node setup reduces bitwise to centralized training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ssr

PARTITION_MODES = ("iid", "contiguous")

__all__ = [
    "FedConfig",
    "FedReport",
    "PARTITION_MODES",
    "partition_indices",
    "fed_average",
    "local_round",
    "fed_train",
]


@dataclass(frozen=True)
class FedConfig:
    nodes: int = 4
    rounds: int = 5
    local_epochs: int = 1
    partition: str = "iid"
    seed: int = 0
    weighted: bool = False

    def __post_init__(self) -> None:
        if self.nodes < 1:
            raise ValueError(f"node count must be >= 1, got {self.nodes}")
        if self.rounds < 0 or self.local_epochs < 0:
            raise ValueError("rounds and local_epochs must be >= 0")
        if self.partition not in PARTITION_MODES:
            raise ValueError(
                f"unknown partition mode {self.partition!r}; pick from {PARTITION_MODES}"
            )


@dataclass
class FedReport:
    """Mean last-epoch loss per round, plus the node partition sizes."""

    round_losses: list[float] = field(default_factory=list)
    node_sizes: list[int] = field(default_factory=list)


def partition_indices(n: int, config: FedConfig) -> list[np.ndarray]:
    """Split range(n) into one ascending index set per node.

    Sizes differ by at most one.  The IID mode shuffles membership with
    the config seed; contiguous mode takes consecutive blocks.
    """
    if n < config.nodes:
        raise ValueError(f"cannot split {n} elements across {config.nodes} nodes")
    if config.partition == "iid":
        perm = np.random.default_rng([config.seed, 0xFEDA]).permutation(n)
        return [np.sort(part) for part in np.array_split(perm, config.nodes)]
    return list(np.array_split(np.arange(n), config.nodes))


def fed_average(params: list[np.ndarray], weights: list[int] | None = None) -> np.ndarray:
    """Elementwise mean of parameter vectors; optionally size-weighted."""
    if not params:
        raise ValueError("nothing to average")
    if len({np.asarray(p).shape for p in params}) != 1:
        raise ValueError("parameter vectors have mismatched lengths")
    stack = np.asarray(params, dtype=np.float64)
    if weights is None:
        return stack.mean(axis=0)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape[0] != stack.shape[0]:
        raise ValueError("one weight per parameter vector required")
    return (stack * w[:, None]).sum(axis=0) / w.sum()


def local_round(
    shared_params: np.ndarray,
    images: np.ndarray,
    texts: np.ndarray,
    indices: np.ndarray,
    config: ssr.SsrConfig,
    *,
    node_id: int,
    round_index: int,
    local_epochs: int,
) -> tuple[np.ndarray, ssr.TrainReport]:
    """Load the shared parameters, train on this node's slice, return the
    updated parameters.  Adam state is node-local and fresh each round."""
    if indices.size == 0:
        raise ValueError(f"node {node_id} has no data")
    model = ssr.create_model(images.shape[1], config)
    model.net.set_params(np.asarray(shared_params, dtype=np.float64))
    report = ssr.train(
        model,
        images[indices],
        texts[indices],
        epochs=local_epochs,
        base_seed=config.seed + node_id,
        epoch_offset=round_index * local_epochs,
    )
    return model.net.get_params(), report


def fed_train(
    images: np.ndarray,
    texts: np.ndarray,
    fed_config: FedConfig,
    ssr_config: ssr.SsrConfig,
) -> tuple[ssr.SsrModel, FedReport]:
    """Rounds of broadcast, local training, and parameter averaging.

    rounds=0 returns the freshly initialized model unchanged.
    """
    images = np.asarray(images, dtype=np.float64)
    texts = np.asarray(texts, dtype=np.float64)
    model = ssr.create_model(images.shape[1], ssr_config)
    parts = partition_indices(images.shape[0], fed_config)
    report = FedReport(node_sizes=[int(p.size) for p in parts])
    for round_index in range(fed_config.rounds):
        shared = model.net.get_params()
        locals_: list[np.ndarray] = []
        losses: list[float] = []
        for node_id, indices in enumerate(parts):
            params, node_report = local_round(
                shared,
                images,
                texts,
                indices,
                model.config,
                node_id=node_id,
                round_index=round_index,
                local_epochs=fed_config.local_epochs,
            )
            locals_.append(params)
            if node_report.epoch_losses:
                losses.append(node_report.epoch_losses[-1])
        weights = report.node_sizes if fed_config.weighted else None
        model.net.set_params(fed_average(locals_, weights))
        report.round_losses.append(float(np.mean(losses)) if losses else float("nan"))
    return model, report
