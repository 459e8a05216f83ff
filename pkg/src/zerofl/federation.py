"""Round-based federated training: client sampling, local sparse training,
uplink building, the three aggregation rules, FedAvg/FedAdam server optimizers
and the exponential learning-rate schedule.

Clients are stateless: each round a client is a pure function of the seed,
the round index, its id and its data shard. All randomness is derived from
named streams of the experiment seed, so runs are bitwise reproducible and
independent of how many workers train clients in parallel.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .codec import (
    DIFF_STRATEGIES,
    ModelUpdate,
    Strategy,
    StructureMismatchError,
    build_update,
    serialize_update,
)
from .data import Dataset, PartitionPlan, client_validation_split
from .model import ModelParams, backward_swat, evaluate, forward_swat, sgd_step
from .sparsify import SparsityConfig

# Named sub-streams of the experiment seed.
STREAM_MODEL_INIT = 1
STREAM_CLIENT_SAMPLING = 2
STREAM_LOCAL_TRAINING = 3
STREAM_VALIDATION_SPLIT = 4


@dataclass
class FedAdamConfig:
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-3
    server_lr: float = 1e-2


@dataclass
class FederationConfig:
    total_clients: int
    clients_per_round: int
    total_rounds: int
    local_epochs: int = 1
    batch_size: int = 32
    strategy: Strategy = Strategy.TOPK_WEIGHTS
    sp: float = 0.9
    r_mask: float = 0.1
    aggregator: str = "fedavg"  # fedavg | fedadam
    lr_start: float = 0.1
    lr_end: float = 0.01
    seed: int = 0
    val_fraction: float = 0.1
    per_sample_activations: bool = False
    fedadam: FedAdamConfig = field(default_factory=FedAdamConfig)

    def __post_init__(self):
        if not 1 <= self.clients_per_round <= self.total_clients:
            raise ValueError(
                f"need 1 <= clients_per_round <= total_clients, "
                f"got {self.clients_per_round}/{self.total_clients}"
            )
        if self.local_epochs < 1:
            raise ValueError(f"local_epochs must be >= 1, got {self.local_epochs}")
        if self.total_rounds < 0:
            raise ValueError(f"total_rounds must be >= 0, got {self.total_rounds}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("sp", "r_mask", "val_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {v}")
        if self.aggregator not in ("fedavg", "fedadam"):
            raise ValueError(f"aggregator must be fedavg or fedadam, got {self.aggregator!r}")
        if self.lr_start <= 0 or self.lr_end <= 0:
            raise ValueError("learning rates must be positive")
        self.strategy = Strategy(self.strategy)

    def sparsity(self) -> SparsityConfig:
        return SparsityConfig(sp=self.sp, per_sample_activations=self.per_sample_activations)


@dataclass
class ServerState:
    params: ModelParams
    round: int = 0
    m: dict[str, np.ndarray] | None = None  # FedAdam first moments
    v: dict[str, np.ndarray] | None = None  # FedAdam second moments


@dataclass
class RoundRecord:
    round: int
    lr: float
    selected: list[int]
    train_loss: float
    test_accuracy: float
    bytes_up: int
    bytes_dense: int
    savings: float
    nonzero_ratios: dict[str, float]

    def __post_init__(self):
        if self.bytes_up <= 0 or self.bytes_dense <= 0:
            raise ValueError("byte counts must be positive")
        for name, r in self.nonzero_ratios.items():
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"non-zero ratio for {name} out of [0,1]: {r}")


@dataclass
class ExperimentResult:
    records: list[RoundRecord]
    params: ModelParams
    snapshot_rounds: list[int]
    snapshots: "object"  # analysis.MaskTrace when snapshots were taken


def lr_at(cfg: FederationConfig, t: int) -> float:
    """Exponentially decayed learning rate: geometric interpolation with
    lr_at(0) == lr_start and lr_at(T) == lr_end exactly."""
    if not 0 <= t <= cfg.total_rounds:
        raise ValueError(f"round {t} outside [0, {cfg.total_rounds}]")
    if t == 0:
        return cfg.lr_start
    if t == cfg.total_rounds:
        return cfg.lr_end
    return cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** (t / cfg.total_rounds)


def sample_clients(total: int, k: int, round_index: int, seed: int) -> list[int]:
    """K distinct client ids, uniform without replacement, deterministic from
    (seed, round). Returned in ascending order (the canonical aggregation
    order)."""
    rng = np.random.default_rng([seed, STREAM_CLIENT_SAMPLING, round_index])
    ids = rng.choice(total, size=k, replace=False)
    return sorted(int(i) for i in ids)


def derive_seed(parts: list[int]) -> int:
    """Stable integer sub-seed from a list of stream components."""
    return int(np.random.SeedSequence(parts).generate_state(1)[0])


def train_locally(
    client_id: int,
    w_t: ModelParams,
    cfg: FederationConfig,
    lr: float,
    data: Dataset,
    round_index: int = 0,
) -> tuple[ModelUpdate, float]:
    """E epochs of mini-batch sparse SGD from a copy of the global model.

    Returns the uplink update plus the mean training loss. No state survives
    the call: a client exists only for the duration of its round.
    """
    if len(data) == 0:
        raise ValueError(f"client {client_id} has an empty dataset")
    rng = np.random.default_rng([cfg.seed, STREAM_LOCAL_TRAINING, round_index, client_id])
    scfg = cfg.sparsity()
    params = w_t.clone()
    losses = []
    x, y = data.samples, data.labels
    for _ in range(cfg.local_epochs):
        perm = rng.permutation(len(data))
        for start in range(0, len(data), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            trace = forward_swat(params, x[idx], y[idx], scfg, mode="train")
            grads = backward_swat(params, trace, scfg)
            params = sgd_step(params, grads, lr)
            losses.append(trace.loss)
    update = build_update(w_t, params, cfg.strategy, cfg.sp, cfg.r_mask, num_samples=len(data))
    return update, float(np.mean(losses))


def _check_updates(w_t: ModelParams, updates: list[ModelUpdate]) -> Strategy:
    if not updates:
        raise ValueError("cannot aggregate zero updates")
    strategies = {u.strategy for u in updates}
    if len(strategies) > 1:
        raise ValueError(f"mixed strategies in one round: {sorted(s.name for s in strategies)}")
    if len({(u.sp, u.r_mask) for u in updates}) > 1:
        raise ValueError("updates disagree on sp/r_mask")
    layout = [(k, v.shape) for k, v in w_t.tensor_items()]
    for u in updates:
        got = [(p.name, tuple(p.dims)) for p in u.payloads]
        if got != layout:
            raise StructureMismatchError(f"update layout {got} does not match model {layout}")
    return updates[0].strategy


def aggregate(w_t: ModelParams, updates: list[ModelUpdate]) -> ModelParams:
    """Sample-count-weighted aggregation of one round's updates.

    Weight strategies average the zero-filled client tensors directly, so a
    position no client sent is exactly 0.0 afterwards. Diff strategies add the
    weighted average of the deltas to w_t, leaving unsent positions bitwise
    untouched. n is the sum of this round's participating sample counts.
    """
    strategy = _check_updates(w_t, updates)
    n = sum(u.num_samples for u in updates)
    acc = {k: np.zeros(v.shape, dtype=np.float64) for k, v in w_t.tensor_items()}
    for u in updates:
        coef = u.num_samples / n
        for key, tensor in u.decoded_tensors().items():
            acc[key] += coef * tensor.astype(np.float64)
    base = w_t.tensors()
    if strategy in DIFF_STRATEGIES:
        new = {k: (base[k].astype(np.float64) + acc[k]).astype(np.float32) for k in acc}
    else:
        new = {k: acc[k].astype(np.float32) for k in acc}
    return w_t.with_tensors(new)


def pseudo_gradient(w_t: ModelParams, updates: list[ModelUpdate]) -> dict[str, np.ndarray]:
    """Server-side pseudo-gradient sum(n_k/n * (client target - w_t)).

    For diff strategies the decoded payloads already are the per-client
    deltas; for weight strategies the delta is the decoded model minus w_t.
    """
    strategy = _check_updates(w_t, updates)
    n = sum(u.num_samples for u in updates)
    base = {k: v.astype(np.float64) for k, v in w_t.tensor_items()}
    delta = {k: np.zeros_like(v) for k, v in base.items()}
    for u in updates:
        coef = u.num_samples / n
        for key, tensor in u.decoded_tensors().items():
            t64 = tensor.astype(np.float64)
            if strategy in DIFF_STRATEGIES:
                delta[key] += coef * t64
            else:
                delta[key] += coef * (t64 - base[key])
    return delta


def fedadam_aggregate(
    state: ServerState, delta: dict[str, np.ndarray], hyper: FedAdamConfig
) -> ModelParams:
    """One server-side Adam step on the pseudo-gradient.

    m <- b1*m + (1-b1)*delta ; v <- b2*v + (1-b2)*delta^2 ;
    w <- w + server_lr * m / (sqrt(v) + tau). Moments are zero-initialised on
    first use and kept in `state`.
    """
    if state.m is None:
        state.m = {k: np.zeros_like(d) for k, d in delta.items()}
        state.v = {k: np.zeros_like(d) for k, d in delta.items()}
    new = {}
    for key, t in state.params.tensor_items():
        d = delta[key]
        state.m[key] = hyper.beta1 * state.m[key] + (1.0 - hyper.beta1) * d
        state.v[key] = hyper.beta2 * state.v[key] + (1.0 - hyper.beta2) * np.square(d)
        step = hyper.server_lr * state.m[key] / (np.sqrt(state.v[key]) + hyper.tau)
        new[key] = (t.astype(np.float64) + step).astype(np.float32)
    return state.params.with_tensors(new)


def client_shards(
    dataset: Dataset, plan: PartitionPlan, cfg: FederationConfig
) -> list[Dataset]:
    """Per-client training shards, with the client-level validation fraction
    held out deterministically."""
    shards = []
    for cid, idx in enumerate(plan.assignments):
        if cfg.val_fraction > 0:
            split_seed = derive_seed([cfg.seed, STREAM_VALIDATION_SPLIT, cid])
            train_idx, _ = client_validation_split(idx, cfg.val_fraction, split_seed)
        else:
            train_idx = idx
        shards.append(dataset.subset(train_idx))
    return shards


def run_experiment(
    cfg: FederationConfig,
    params0: ModelParams,
    train: Dataset,
    test: Dataset,
    plan: PartitionPlan,
    workers: int = 1,
    snapshot_every: int = 20,
) -> ExperimentResult:
    """Run the full round loop and collect per-round metrics.

    Clients may train on parallel workers; updates are aggregated in ascending
    client-id order, so the result does not depend on the worker count.
    """
    from .analysis import MaskTrace, nonzero_ratio

    if plan.num_clients != cfg.total_clients:
        raise ValueError(
            f"partition has {plan.num_clients} clients, config expects {cfg.total_clients}"
        )
    shards = client_shards(train, plan, cfg)
    scfg = cfg.sparsity()
    sparsif_keys = params0.sparsifiable_weight_keys()
    dense_bytes_one = len(
        serialize_update(build_update(params0, params0, Strategy.FULL_DENSE, cfg.sp, cfg.r_mask))
    )
    state = ServerState(params=params0)
    trace = MaskTrace(sparsif_keys)
    snapshot_rounds: list[int] = []
    records: list[RoundRecord] = []

    def _train_one(cid: int, t: int, lr: float):
        try:
            update, loss = train_locally(cid, state.params, cfg, lr, shards[cid], round_index=t)
        except Exception as exc:
            raise RuntimeError(f"round {t}, client {cid}: {exc}") from exc
        return cid, update, loss

    for t in range(cfg.total_rounds):
        lr = lr_at(cfg, t)
        selected = sample_clients(cfg.total_clients, cfg.clients_per_round, t, cfg.seed)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(lambda cid: _train_one(cid, t, lr), selected))
        else:
            results = [_train_one(cid, t, lr) for cid in selected]
        results.sort(key=lambda r: r[0])
        updates = [u for _, u, _ in results]
        losses = [loss for _, _, loss in results]
        if cfg.aggregator == "fedadam":
            delta = pseudo_gradient(state.params, updates)
            state.params = fedadam_aggregate(state, delta, cfg.fedadam)
        else:
            state.params = aggregate(state.params, updates)
        state.round = t + 1
        acc, _ = evaluate(state.params, test, scfg)
        bytes_up = sum(len(serialize_update(u)) for u in updates)
        bytes_dense = dense_bytes_one * len(updates)
        records.append(
            RoundRecord(
                round=t,
                lr=lr,
                selected=selected,
                train_loss=float(np.mean(losses)),
                test_accuracy=acc,
                bytes_up=bytes_up,
                bytes_dense=bytes_dense,
                savings=bytes_dense / bytes_up,
                nonzero_ratios={k: nonzero_ratio(state.params, k) for k in sparsif_keys},
            )
        )
        if snapshot_every and (t + 1) % snapshot_every == 0:
            trace.add(state.params, t)
            snapshot_rounds.append(t)
    last = cfg.total_rounds - 1
    if snapshot_every and cfg.total_rounds and (not snapshot_rounds or snapshot_rounds[-1] != last):
        trace.add(state.params, last)
        snapshot_rounds.append(last)
    return ExperimentResult(
        records=records, params=state.params, snapshot_rounds=snapshot_rounds, snapshots=trace
    )
