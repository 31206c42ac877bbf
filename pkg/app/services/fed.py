"""
Federated engine: server loop, party-local training for MOON / FedAvg /
FedProx / SCAFFOLD, FedAvgM server momentum, and the SOLO baseline.

Within a round every sampled party trains against an immutable snapshot of
the global model, so local training may run on a thread pool. Aggregation
starts only after all sampled parties have returned and always sums in
ascending party id, which keeps parallel and serial runs bit-identical.
"""

import logging
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import islice
from pathlib import Path
from typing import Callable, Deque, Dict, List, Optional, Sequence, Union

import numpy as np

from app.core import monitoring
from app.core.errors import CheckpointError, ContractError, DimensionError
from app.core.seeding import Stream, derive_seed, make_rng
from app.core.tensor import backward
from app.models.checkpoint import FederationSnapshot, PartySnapshot, load_federation, save_federation
from app.models.network import Network, ParamVector, from_vector, init, to_vector
from app.models.optim import SgdState, sgd_step
from app.schemas.config import AlgorithmConfig, NetworkArch
from app.schemas.records import RoundRecord
from app.services.data import Dataset, Partition, batches
from app.services.losses import LossBreakdown, cross_entropy, local_objective, proximal_term
from app.services.metrics import party_stats, top1_accuracy

logger = logging.getLogger(__name__)

LossFn = Callable[[Network, object, np.ndarray], LossBreakdown]


@dataclass(eq=False)
class PartyState:
    party_id: int
    dataset: Dataset
    prev_models: Deque[ParamVector]
    control_variate: Optional[ParamVector] = None

    @classmethod
    def create(cls, party_id: int, dataset: Dataset, max_negative_pairs: int = 1) -> "PartyState":
        return cls(party_id, dataset, deque(maxlen=max_negative_pairs))

    @property
    def sample_count(self) -> int:
        return self.dataset.n


@dataclass(eq=False)
class GlobalState:
    round: int
    model: ParamVector
    momentum_buffer: Optional[ParamVector] = None
    control_variate: Optional[ParamVector] = None


@dataclass(eq=False)
class LocalResult:
    party_id: int
    model: ParamVector
    sup_loss: float
    con_loss: Optional[float]
    steps: int
    control_variate: Optional[ParamVector] = None
    delta_c: Optional[ParamVector] = None


@dataclass(eq=False)
class RunResult:
    records: List[RoundRecord]
    final_model: ParamVector
    global_state: GlobalState
    parties: List[PartyState]
    party_models: Optional[Dict[int, ParamVector]] = None


# --- server-side primitives -------------------------------------------------

def sample_clients(num_parties: int, fraction: float, round_seed: int) -> List[int]:
    """max(1, round(fraction * N)) distinct party ids in ascending order."""
    if not 0 < fraction <= 1:
        raise ContractError(f"sample fraction must lie in (0, 1], got {fraction}")
    if fraction == 1:
        return list(range(num_parties))
    count = max(1, int(round(fraction * num_parties)))
    chosen = make_rng(round_seed).choice(num_parties, size=count, replace=False)
    return sorted(int(i) for i in chosen)


def aggregate(models: Sequence[ParamVector], counts: Sequence[int]) -> ParamVector:
    """Sample-count weighted average, weights normalised over the given models."""
    if not models:
        raise ContractError("aggregate needs at least one model")
    if len(models) != len(counts):
        raise ContractError(f"{len(models)} models but {len(counts)} sample counts")
    if any(c <= 0 for c in counts):
        raise ContractError("aggregation sample counts must be positive")
    first = models[0]
    for m in models[1:]:
        if len(m) != len(first):
            raise DimensionError("aggregate", (len(first),), (len(m),))
    if all(m.identical_to(first) for m in models[1:]):
        return first.copy()
    total = float(sum(counts))
    acc = np.zeros_like(first.values)
    for m, c in zip(models, counts):
        acc += (c / total) * m.values
    return ParamVector(acc, first.arch)


def fedavgm_server_update(state: GlobalState, aggregated: ParamVector, beta: float) -> ParamVector:
    """Server momentum: v = beta * v + (w - aggregated); w' = w - v."""
    if not 0 <= beta < 1:
        raise ContractError(f"server momentum must lie in [0, 1), got {beta}")
    delta = state.model - aggregated
    if beta == 0:
        state.momentum_buffer = delta
        return aggregated.copy()
    previous = state.momentum_buffer if state.momentum_buffer is not None else ParamVector.zeros_like(delta)
    state.momentum_buffer = ParamVector(beta * previous.values + delta.values, delta.arch)
    return state.model - state.momentum_buffer


# --- party-local training ---------------------------------------------------

def _train(
    net: Network,
    party: PartyState,
    cfg: AlgorithmConfig,
    round_index: int,
    loss_fn: LossFn,
    epochs: int,
    correction: Optional[ParamVector] = None,
) -> LocalResult:
    state = SgdState.for_network(net, cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    sup_losses: List[float] = []
    reg_losses: List[float] = []
    for epoch in range(epochs):
        seed = derive_seed(cfg.master_seed, Stream.BATCHES, party.party_id, round_index, epoch)
        for x, y in batches(party.dataset, cfg.batch_size, seed):
            net.zero_grad()
            loss = loss_fn(net, x, y)
            backward(loss.total)
            sgd_step(net, state, correction)
            sup_losses.append(loss.sup)
            if loss.reg is not None:
                reg_losses.append(loss.reg)
    return LocalResult(
        party_id=party.party_id,
        model=to_vector(net),
        sup_loss=float(np.mean(sup_losses)) if sup_losses else 0.0,
        con_loss=float(np.mean(reg_losses)) if reg_losses else None,
        steps=len(sup_losses),
    )


def _supervised(net: Network, x, y) -> LossBreakdown:
    sup = cross_entropy(net(x), y)
    return LossBreakdown(total=sup, sup=sup.item())


def local_train_fedavg(party: PartyState, global_model: ParamVector, cfg: AlgorithmConfig, round_index: int = 0) -> LocalResult:
    net = from_vector(global_model.arch, global_model)
    return _train(net, party, cfg, round_index, _supervised, cfg.local_epochs)


def local_train_moon(party: PartyState, global_model: ParamVector, cfg: AlgorithmConfig, round_index: int = 0) -> LocalResult:
    """Supervised plus model-contrastive training; pushes the trained model to the party's history."""
    arch = global_model.arch
    net = from_vector(arch, global_model)
    frozen_global = from_vector(arch, global_model, trainable=False)
    frozen_prev = [from_vector(arch, m, trainable=False) for m in islice(party.prev_models, cfg.max_negative_pairs)]
    contrastive = cfg.contrastive()

    def loss_fn(model: Network, x, y) -> LossBreakdown:
        z = model.representation(x)
        logits = model.output_layer(z)
        z_glob = frozen_global.representation(x)
        z_prevs = [prev.representation(x) for prev in frozen_prev]
        return local_objective(logits, y, z, z_glob, z_prevs, contrastive, cfg.loss_variant)

    result = _train(net, party, cfg, round_index, loss_fn, cfg.local_epochs)
    party.prev_models.appendleft(result.model.copy())
    return result


def local_train_fedprox(party: PartyState, global_model: ParamVector, cfg: AlgorithmConfig, round_index: int = 0) -> LocalResult:
    net = from_vector(global_model.arch, global_model)
    if cfg.mu == 0:
        return _train(net, party, cfg, round_index, _supervised, cfg.local_epochs)

    def loss_fn(model: Network, x, y) -> LossBreakdown:
        sup = cross_entropy(model(x), y)
        prox = proximal_term(model.parameter_tensor(), global_model)
        return LossBreakdown(total=sup + prox * cfg.mu, sup=sup.item())

    return _train(net, party, cfg, round_index, loss_fn, cfg.local_epochs)


def local_train_scaffold(
    party: PartyState,
    global_model: ParamVector,
    c: ParamVector,
    cfg: AlgorithmConfig,
    round_index: int = 0,
) -> LocalResult:
    """Local steps on g - c_i + c, then the Option-II control-variate refresh."""
    c_i = party.control_variate if party.control_variate is not None else ParamVector.zeros_like(global_model)
    correction = (c - c_i) if cfg.scaffold_corrections else None
    net = from_vector(global_model.arch, global_model)
    result = _train(net, party, cfg, round_index, _supervised, cfg.local_epochs, correction)
    if result.steps == 0:
        logger.warning(f"Party {party.party_id} has no samples; skipping its SCAFFOLD update")
        result.control_variate = c_i
        return result
    if cfg.scaffold_corrections:
        drift = (global_model - result.model).values / (result.steps * cfg.learning_rate)
        c_new = ParamVector(c_i.values - c.values + drift, global_model.arch)
        result.delta_c = c_new - c_i
        party.control_variate = c_new
    else:
        result.delta_c = ParamVector.zeros_like(c_i)
    result.control_variate = party.control_variate if party.control_variate is not None else c_i
    return result


def solo_train(
    party: PartyState,
    cfg: AlgorithmConfig,
    arch: Optional[NetworkArch] = None,
    init_model: Optional[ParamVector] = None,
    round_index: int = 0,
    epochs: Optional[int] = None,
) -> LocalResult:
    """Train a party alone; starts from a fresh seeded init unless `init_model` is given."""
    if init_model is None:
        if arch is None:
            raise ContractError("solo_train needs an architecture or a starting model")
        net = init(arch, derive_seed(cfg.master_seed, Stream.SOLO_INIT, party.party_id))
    else:
        net = from_vector(init_model.arch, init_model)
    return _train(net, party, cfg, round_index, _supervised, epochs or cfg.solo_epochs or cfg.local_epochs)


# --- server loop ------------------------------------------------------------

def _local_update(party: PartyState, snapshot: ParamVector, c: Optional[ParamVector], cfg: AlgorithmConfig, t: int) -> LocalResult:
    with monitoring.span("fed.local_training", party_id=party.party_id, round=t, algorithm=cfg.variant):
        if cfg.variant == "moon":
            result = local_train_moon(party, snapshot, cfg, t)
        elif cfg.variant == "fedprox":
            result = local_train_fedprox(party, snapshot, cfg, t)
        elif cfg.variant == "scaffold":
            result = local_train_scaffold(party, snapshot, c, cfg, t)
        else:
            result = local_train_fedavg(party, snapshot, cfg, t)
    logger.debug(
        f"Round {t + 1} party {party.party_id}: {result.steps} steps, "
        f"sup={result.sup_loss:.4f} con={result.con_loss}"
    )
    return result


def _snapshot(cfg: AlgorithmConfig, state: GlobalState, parties: List[PartyState]) -> FederationSnapshot:
    return FederationSnapshot(
        round=state.round,
        algorithm=cfg.label,
        global_model=state.model,
        momentum_buffer=state.momentum_buffer if cfg.server_momentum > 0 else None,
        control_variate=state.control_variate,
        parties=[PartySnapshot(p.party_id, list(p.prev_models), p.control_variate) for p in parties],
    )


def _restore(path: Union[str, Path], cfg: AlgorithmConfig, arch: NetworkArch, state: GlobalState, parties: List[PartyState]) -> None:
    snap = load_federation(path)
    if snap.global_model.arch != arch:
        raise CheckpointError(f"{path}: checkpoint architecture does not match the run")
    if snap.algorithm != cfg.label:
        raise CheckpointError(f"{path}: checkpoint is for {snap.algorithm!r}, run is {cfg.label!r}")
    if len(snap.parties) != len(parties):
        raise CheckpointError(f"{path}: checkpoint has {len(snap.parties)} parties, run has {len(parties)}")
    state.round = snap.round
    state.model = snap.global_model
    state.momentum_buffer = snap.momentum_buffer
    state.control_variate = snap.control_variate
    for party, saved in zip(parties, sorted(snap.parties, key=lambda p: p.party_id)):
        party.prev_models = deque(saved.prev_models, maxlen=cfg.max_negative_pairs)
        party.control_variate = saved.control_variate


def _mean_or_none(values: List[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def run(
    cfg: AlgorithmConfig,
    partition: Partition,
    train_ds: Dataset,
    test_ds: Dataset,
    arch: Optional[NetworkArch] = None,
    *,
    workers: int = 1,
    eval_every: int = 1,
    on_round: Optional[Callable[[RoundRecord], None]] = None,
    on_model: Optional[Callable[[int, ParamVector], None]] = None,
    checkpoint_path: Optional[Union[str, Path]] = None,
    resume_from: Optional[Union[str, Path]] = None,
) -> RunResult:
    """Run T communication rounds; a pure function of its inputs and cfg.master_seed.

    `on_round` receives every emitted record; `on_model` receives the round
    index and a copy of the global model after every federated round,
    evaluated or not. SOLO never calls it.
    """
    if not partition.is_valid_for(train_ds.n):
        raise ContractError("partition does not cover the training set exactly once")
    if eval_every < 1 or workers < 1:
        raise ContractError("eval_every and workers must be at least 1")
    arch = arch or NetworkArch(input_dim=train_ds.dim, num_classes=train_ds.num_classes)
    if arch.input_dim != train_ds.dim:
        raise DimensionError("run", (arch.input_dim,), (train_ds.dim,))

    parties = [
        PartyState.create(i, train_ds.subset(idx), cfg.max_negative_pairs)
        for i, idx in enumerate(partition.index_sets)
    ]
    state = GlobalState(round=0, model=to_vector(init(arch, derive_seed(cfg.master_seed, Stream.INIT))))
    if cfg.variant == "scaffold":
        state.control_variate = ParamVector.zeros_like(state.model)
        for party in parties:
            party.control_variate = ParamVector.zeros_like(state.model)

    if cfg.variant == "solo":
        if checkpoint_path is not None or resume_from is not None:
            raise ContractError("SOLO runs do not communicate and cannot be checkpointed")
        return _run_solo(cfg, parties, state, arch, test_ds, workers, eval_every, on_round)

    if resume_from is not None:
        _restore(resume_from, cfg, arch, state, parties)
        logger.info(f"Resumed {cfg.label} from {resume_from} after round {state.round}")

    records: List[RoundRecord] = []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for t in range(state.round, cfg.rounds):
            started = time.perf_counter()
            with monitoring.span("fed.round", round=t + 1, algorithm=cfg.label):
                ids = sample_clients(len(parties), cfg.sample_fraction, derive_seed(cfg.master_seed, Stream.SAMPLING, t))
                snapshot = state.model.copy()
                c = state.control_variate.copy() if state.control_variate is not None else None

                def task(pid: int) -> LocalResult:
                    return _local_update(parties[pid], snapshot, c, cfg, t)

                results = list(pool.map(task, ids)) if pool else [task(pid) for pid in ids]
                trained = [r for r in results if r.steps > 0]
                if trained:
                    aggregated = aggregate([r.model for r in trained], [parties[r.party_id].sample_count for r in trained])
                    if cfg.server_momentum > 0:
                        state.model = fedavgm_server_update(state, aggregated, cfg.server_momentum)
                    else:
                        state.model = aggregated
                if cfg.variant == "scaffold" and cfg.scaffold_corrections and trained:
                    total_delta = np.zeros_like(state.control_variate.values)
                    for r in trained:
                        total_delta += r.delta_c.values
                    state.control_variate = ParamVector(
                        state.control_variate.values + total_delta / len(parties), state.model.arch
                    )
                state.round = t + 1

            elapsed = time.perf_counter() - started
            monitoring.record_round(cfg.label, elapsed, len(trained))
            if checkpoint_path is not None:
                save_federation(checkpoint_path, _snapshot(cfg, state, parties))
            if on_model is not None:
                on_model(state.round, state.model.copy())
            if state.round % eval_every == 0 or state.round == cfg.rounds:
                accuracy = top1_accuracy(state.model, test_ds)
                monitoring.record_accuracy(cfg.label, accuracy)
                record = RoundRecord(
                    round=state.round,
                    algorithm=cfg.label,
                    participants=ids,
                    accuracy=accuracy,
                    mean_sup_loss=float(np.mean([r.sup_loss for r in trained])) if trained else 0.0,
                    mean_con_loss=_mean_or_none([r.con_loss for r in trained]),
                    wall_time=elapsed,
                )
                records.append(record)
                logger.info(f"[{cfg.label}] round {state.round}/{cfg.rounds} accuracy={accuracy:.4f}")
                if on_round is not None:
                    on_round(record)
    finally:
        if pool is not None:
            pool.shutdown()

    return RunResult(records=records, final_model=state.model, global_state=state, parties=parties)


def _run_solo(
    cfg: AlgorithmConfig,
    parties: List[PartyState],
    state: GlobalState,
    arch: NetworkArch,
    test_ds: Dataset,
    workers: int,
    eval_every: int,
    on_round: Optional[Callable[[RoundRecord], None]],
) -> RunResult:
    """Every party trains alone round by round; the global model is never touched."""
    models: Dict[int, ParamVector] = {
        p.party_id: to_vector(init(arch, derive_seed(cfg.master_seed, Stream.SOLO_INIT, p.party_id)))
        for p in parties
    }
    records: List[RoundRecord] = []
    ids = [p.party_id for p in parties]
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for t in range(cfg.rounds):
            started = time.perf_counter()
            with monitoring.span("fed.round", round=t + 1, algorithm="solo"):
                def task(pid: int) -> LocalResult:
                    return solo_train(parties[pid], cfg, init_model=models[pid], round_index=t)

                results = list(pool.map(task, ids)) if pool else [task(pid) for pid in ids]
                for r in results:
                    models[r.party_id] = r.model
            elapsed = time.perf_counter() - started
            monitoring.record_round("solo", elapsed, len(results))
            if (t + 1) % eval_every == 0 or t + 1 == cfg.rounds:
                accuracies = [top1_accuracy(models[pid], test_ds) for pid in ids]
                mean, std = party_stats(accuracies)
                monitoring.record_accuracy("solo", mean)
                record = RoundRecord(
                    round=t + 1,
                    algorithm="solo",
                    participants=ids,
                    accuracy=mean,
                    accuracy_std=std,
                    mean_sup_loss=float(np.mean([r.sup_loss for r in results])),
                    wall_time=elapsed,
                )
                records.append(record)
                logger.info(f"[solo] round {t + 1}/{cfg.rounds} accuracy={mean:.4f} +/- {std:.4f}")
                if on_round is not None:
                    on_round(record)
    finally:
        if pool is not None:
            pool.shutdown()
    return RunResult(records=records, final_model=state.model, global_state=state, parties=parties, party_models=models)
