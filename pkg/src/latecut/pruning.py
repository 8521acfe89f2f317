"""Block ranking and removal.

The proposed score for block j combines three per-block quantities:

* epsilon_ini — mean squared change of the final feature map when the block
  is skipped, measured on a fixed prune batch;
* capacity gap G — fraction of the model's parameters the block carries;
* delta_T — normalized latency saving of removing it.

importance I = epsilon_ini * G / delta_T; the lowest-importance blocks are
pruned.  Ranking n blocks costs exactly n + 1 forward passes: one baseline
pass for the full network's features, then one pass per skipped block.

Ablation baselines: random, the l2 in/out-similarity ratio, a prediction-
probability (KL) rule, and an expensive fine-tune oracle that actually
distills each candidate before scoring it.

Per-block scorers read the shared network immutably and are independent of
evaluation order, so results cannot depend on any parallel execution of the
scoring loop; the final sort is a deterministic reduction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distill import DistillConfig, DistillRun, PseudoLabelCache
from .errors import ConfigError, DegenerateBlockError, InvalidBlockError, NumericError
from .network import (
    block_param_count,
    clone_network,
    feature_mse,
    forward,
    forward_trace,
    parameter_count,
)
from .profiling import LatencyProfile, latency_saving, profile


@dataclass
class BlockProfile:
    """Per-block scoring record.

    Baselines that do not compute a field leave it None; ``importance`` is
    always the quantity the method ranks by (ascending), except for the
    random baseline where it stays None.
    """

    block_id: int
    epsilon_ini: float | None = None
    capacity_gap: float | None = None
    delta_t: float | None = None
    importance: float | None = None
    param_count: int = 0
    tuned_loss: float | None = None  # fine-tune oracle only


@dataclass
class PruneDecision:
    method: str
    n_p: int
    ranked: list[BlockProfile]   # ascending by the method's score
    pruned: frozenset[int]       # the first n_p of ranked
    seed: int | None = None


def _check_n_p(network, n_p: int) -> None:
    if n_p < 0 or n_p > network.n_blocks:
        raise ConfigError(f"n_p={n_p} outside 0..{network.n_blocks} removable blocks")


def _decision(method, n_p, rows, seed=None) -> PruneDecision:
    pruned = frozenset(row.block_id for row in rows[:n_p])
    return PruneDecision(method, n_p, rows, pruned, seed)


def initial_noise(network, prune_batch, block_id, baseline_features=None) -> float:
    """Final-feature MSE between the full network and the network with
    ``block_id`` skipped, on the same batch.  Pass ``baseline_features`` to
    reuse one shared full-network pass across blocks."""
    if block_id < 1 or block_id > network.n_blocks:
        raise InvalidBlockError(f"block id {block_id} outside 1..{network.n_blocks}")
    if baseline_features is None:
        _, baseline_features = forward(network, prune_batch)
    _, skipped = forward(network, prune_batch, {block_id})
    return feature_mse(baseline_features, skipped)


def capacity_gap(network, block_id) -> float:
    """Fraction of total parameters removed by pruning the block."""
    if block_id < 1 or block_id > network.n_blocks:
        raise InvalidBlockError(f"block id {block_id} outside 1..{network.n_blocks}")
    return block_param_count(network.blocks[block_id - 1]) / parameter_count(network)


def importance(row: BlockProfile) -> float:
    """I = epsilon_ini * G / delta_T from a profile row's stored fields."""
    if row.delta_t is None or row.epsilon_ini is None or row.capacity_gap is None:
        raise ConfigError(f"block {row.block_id}: importance needs epsilon, G and delta_T")
    if row.delta_t == 0.0:
        raise DegenerateBlockError(
            f"block {row.block_id} has zero latency saving; importance undefined"
        )
    return row.epsilon_ini * row.capacity_gap / row.delta_t


def rank_and_prune(network, prune_batch, latency_profile: LatencyProfile, n_p: int) -> PruneDecision:
    """Score every block against the unpruned network in a single pass and
    prune the ``n_p`` lowest-importance blocks (ties broken by lower id)."""
    _check_n_p(network, n_p)
    _, baseline = forward(network, prune_batch)
    total_params = parameter_count(network)
    rows = []
    for block in network.blocks:
        eps = initial_noise(network, prune_batch, block.block_id, baseline_features=baseline)
        params = block_param_count(block)
        row = BlockProfile(
            block_id=block.block_id,
            epsilon_ini=eps,
            capacity_gap=params / total_params,
            delta_t=latency_saving(latency_profile, {block.block_id}),
            param_count=params,
        )
        row.importance = importance(row)
        rows.append(row)
    rows.sort(key=lambda r: (r.importance, r.block_id))
    return _decision("proposed", n_p, rows)


def baseline_random(network, n_p, seed) -> PruneDecision:
    """Uniform block sample without replacement."""
    _check_n_p(network, n_p)
    rng = np.random.default_rng(seed)
    order = rng.permutation(network.n_blocks) + 1
    chosen = sorted(int(j) for j in order[:n_p])
    rest = sorted(int(j) for j in order[n_p:])
    rows = [
        BlockProfile(block_id=j, param_count=block_param_count(network.blocks[j - 1]))
        for j in chosen + rest
    ]
    return _decision("random", n_p, rows, seed=seed)


def baseline_l2_ratio(network, prune_batch, n_p) -> PruneDecision:
    """Prune blocks whose output stays closest to their input: score by
    ||out - in||_2 / ||in||_2 over the prune batch, one forward pass."""
    _check_n_p(network, n_p)
    trace = forward_trace(network, prune_batch)
    rows = []
    for block in network.blocks:
        x_in = trace.block_inputs[block.block_id]
        branch = trace.block_hidden[block.block_id] @ block.weight2 + block.bias2
        denom = float(np.linalg.norm(x_in))
        if denom == 0.0:
            raise NumericError(f"block {block.block_id}: zero-norm input features")
        rows.append(
            BlockProfile(
                block_id=block.block_id,
                importance=float(np.linalg.norm(branch)) / denom,
                param_count=block_param_count(block),
            )
        )
    rows.sort(key=lambda r: (r.importance, r.block_id))
    return _decision("l2ratio", n_p, rows)


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(_log_softmax(logits))


def kl_divergence(p_logits, q_logits) -> float:
    """Mean over the batch of KL(softmax(p) || softmax(q))."""
    log_p = _log_softmax(p_logits)
    log_q = _log_softmax(q_logits)
    per_sample = (np.exp(log_p) * (log_p - log_q)).sum(axis=1)
    return float(per_sample.mean())


def baseline_curl(network, prune_batch, n_p) -> PruneDecision:
    """Prune blocks with the least influence on the prediction probability:
    KL divergence between full and block-skipped class distributions."""
    _check_n_p(network, n_p)
    full_logits, _ = forward(network, prune_batch)
    rows = []
    for block in network.blocks:
        skipped_logits, _ = forward(network, prune_batch, {block.block_id})
        rows.append(
            BlockProfile(
                block_id=block.block_id,
                importance=kl_divergence(full_logits, skipped_logits),
                param_count=block_param_count(block),
            )
        )
    rows.sort(key=lambda r: (r.importance, r.block_id))
    return _decision("curl", n_p, rows)


def baseline_finetune_oracle(network, prune_batch, cache: PseudoLabelCache, n_p,
                             k_steps, latency_profile=None, lr0=0.02, seed=0) -> PruneDecision:
    """Expensive reference the proxy approximates: actually skip each block,
    distill it for ``k_steps`` against the cache, and score by the residual
    post-fine-tuning feature noise on the prune batch divided by the block's
    latency saving (small loss and large saving rank first)."""
    _check_n_p(network, n_p)
    if k_steps < 1:
        raise ConfigError(f"k_steps must be >= 1, got {k_steps}")
    batch = np.asarray(prune_batch, dtype=np.float64)
    if latency_profile is None:
        latency_profile = profile(network, batch.shape[0], mode="modeled")
    _, teacher_features = forward(network, batch)
    rows = []
    for block in network.blocks:
        student = clone_network(network)
        config = DistillConfig(steps=k_steps, lr0=lr0, seed=seed,
                               batch_size=min(64, cache.size))
        run = DistillRun(student, {block.block_id}, cache, config)
        while not run.done:
            run.step()
        _, student_features = forward(student, batch, {block.block_id})
        tuned_loss = feature_mse(teacher_features, student_features)
        delta_t = latency_saving(latency_profile, {block.block_id})
        if delta_t == 0.0:
            raise DegenerateBlockError(
                f"block {block.block_id} has zero latency saving; oracle score undefined"
            )
        rows.append(
            BlockProfile(
                block_id=block.block_id,
                delta_t=delta_t,
                importance=tuned_loss / delta_t,
                param_count=block_param_count(block),
                tuned_loss=tuned_loss,
            )
        )
    rows.sort(key=lambda r: (r.importance, r.block_id))
    return _decision("oracle", n_p, rows, seed=seed)
