import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from app.core.errors import ContractError
from app.core.seeding import Stream, derive_seed
from app.models.network import ParamVector, init, l2_distance, to_vector
from app.schemas.config import AlgorithmConfig
from app.services.data import Dataset, batches
from app.services.fed import (
    GlobalState,
    PartyState,
    aggregate,
    fedavgm_server_update,
    local_train_fedavg,
    local_train_fedprox,
    local_train_moon,
    local_train_scaffold,
    run,
    sample_clients,
    solo_train,
)
from app.services.metrics import top1_accuracy


@pytest.fixture
def party(blobs_split):
    train, _ = blobs_split
    return PartyState.create(0, train.subset(range(24)))


@pytest.fixture
def global_model(toy_arch):
    return to_vector(init(toy_arch, 99))


def vec(*values):
    return ParamVector(np.array(values, dtype=float))


class TestSampleClients:
    def test_full_participation(self):
        assert sample_clients(7, 1.0, 123) == list(range(7))

    def test_fraction_of_hundred(self):
        ids = sample_clients(100, 0.2, derive_seed(0, Stream.SAMPLING, 4))
        assert len(ids) == 20
        assert len(set(ids)) == 20
        assert ids == sorted(ids)

    def test_same_seed_same_sample(self):
        assert sample_clients(50, 0.3, 77) == sample_clients(50, 0.3, 77)

    def test_at_least_one_party(self):
        assert len(sample_clients(10, 0.01, 5)) == 1

    def test_invalid_fraction(self):
        with pytest.raises(ContractError):
            sample_clients(10, 0.0, 1)


class TestAggregate:
    def test_single_model_is_returned_exactly(self):
        model = vec(0.1, 0.2, 0.3)
        out = aggregate([model], [7])
        assert out.identical_to(model)
        assert out is not model

    def test_two_models(self):
        assert_array_equal(aggregate([vec(0, 0), vec(2, 4)], [1, 1]).values, [1.0, 2.0])

    def test_three_models_against_exact_sum(self, rng):
        models = [ParamVector(rng.normal(size=5)) for _ in range(3)]
        out = aggregate(models, [1, 2, 3])
        expected = [math.fsum(c * m.values[j] for c, m in zip([1, 2, 3], models)) / 6 for j in range(5)]
        assert_allclose(out.values, expected, rtol=0, atol=1e-12)

    def test_identical_models(self):
        model = vec(1.0 / 3.0, 2.0 / 7.0)
        assert aggregate([model, model.copy(), model.copy()], [1, 5, 9]).identical_to(model)

    def test_empty(self):
        with pytest.raises(ContractError):
            aggregate([], [])


@hsettings(max_examples=40, deadline=None)
@given(
    value=st.floats(min_value=-1e6, max_value=1e6, allow_nan=False),
    counts=st.lists(st.integers(min_value=1, max_value=1000), min_size=1, max_size=8),
)
def test_aggregating_identical_models_is_exact(value, counts):
    models = [vec(value, -value) for _ in counts]
    assert aggregate(models, counts).identical_to(models[0])


class TestFedAvgM:
    def test_zero_momentum_is_plain_aggregate(self):
        state = GlobalState(round=0, model=vec(1.0, 2.0))
        aggregated = vec(0.3, 0.7)
        assert fedavgm_server_update(state, aggregated, 0.0).identical_to(aggregated)

    def test_geometric_accumulation(self):
        """Constant delta: v_t = delta * (1 - 0.9^t) / 0.1."""
        delta = 0.5
        state = GlobalState(round=0, model=vec(10.0))
        for t in (1, 2, 3):
            before = state.model.values[0]
            state.model = fedavgm_server_update(state, vec(before - delta), 0.9)
            assert state.momentum_buffer.values[0] == pytest.approx(delta * (1 - 0.9 ** t) / 0.1, abs=1e-12)
        assert state.model.values[0] == pytest.approx(10.0 - 0.5 * (1 + 1.9 + 2.71), abs=1e-12)

    def test_zero_delta_leaves_model(self):
        state = GlobalState(round=0, model=vec(1.0, -1.0))
        assert fedavgm_server_update(state, vec(1.0, -1.0), 0.9).identical_to(vec(1.0, -1.0))

    def test_rejects_momentum_of_one(self):
        with pytest.raises(ContractError):
            fedavgm_server_update(GlobalState(round=0, model=vec(0.0)), vec(0.0), 1.0)


class TestLocalTraining:
    def test_moon_zero_learning_rate(self, party, global_model, make_cfg):
        result = local_train_moon(party, global_model, make_cfg(variant="moon", learning_rate=0.0))
        assert result.model.identical_to(global_model)
        assert party.prev_models[0].identical_to(global_model)

    def test_moon_without_contrastive_weight_matches_fedavg(self, party, global_model, make_cfg):
        cfg = make_cfg(variant="moon", mu=0.0, batch_size=64)
        party.prev_models.appendleft(to_vector(init(global_model.arch, 5)))
        moon = local_train_moon(party, global_model, cfg)
        plain = local_train_fedavg(PartyState.create(0, party.dataset), global_model, cfg)
        assert moon.model.identical_to(plain.model)

    def test_moon_duplicate_negatives_are_capped(self, blobs_split, global_model, make_cfg):
        train, _ = blobs_split
        cfg = make_cfg(variant="moon", max_negative_pairs=1)
        previous = to_vector(init(global_model.arch, 5))
        one = PartyState.create(0, train.subset(range(24)), 1)
        one.prev_models.appendleft(previous)
        two = PartyState(0, train.subset(range(24)), deque([previous, previous.copy()], maxlen=2))
        assert local_train_moon(one, global_model, cfg).model.identical_to(local_train_moon(two, global_model, cfg).model)

    def test_moon_history_is_bounded(self, party, global_model, make_cfg):
        party.prev_models = deque(maxlen=2)
        cfg = make_cfg(variant="moon", max_negative_pairs=2)
        results = [local_train_moon(party, global_model, cfg, round_index=t) for t in range(3)]
        assert len(party.prev_models) == 2
        assert party.prev_models[0].identical_to(results[-1].model)
        assert party.prev_models[1].identical_to(results[-2].model)

    def test_fedavg_is_deterministic(self, party, global_model, make_cfg):
        cfg = make_cfg(variant="fedavg")
        assert local_train_fedavg(party, global_model, cfg, 3).model.identical_to(
            local_train_fedavg(party, global_model, cfg, 3).model
        )

    def test_fedprox_without_weight_matches_fedavg(self, party, global_model, make_cfg):
        cfg = make_cfg(variant="fedprox", mu=0.0)
        assert local_train_fedprox(party, global_model, cfg).model.identical_to(
            local_train_fedavg(party, global_model, cfg).model
        )

    def test_fedprox_large_weight_stays_close(self, party, global_model, make_cfg):
        cfg = make_cfg(variant="fedprox", mu=1e6, learning_rate=1e-6, momentum=0.0, local_epochs=10, batch_size=4)
        prox = local_train_fedprox(party, global_model, cfg)
        plain = local_train_fedavg(party, global_model, cfg)
        assert l2_distance(prox.model, global_model) * 10 <= l2_distance(plain.model, global_model)

    def test_scaffold_zero_variates_single_step_is_sgd(self, party, global_model, make_cfg):
        cfg = make_cfg(variant="scaffold", batch_size=64)
        zeros = ParamVector.zeros_like(global_model)
        party.control_variate = zeros.copy()
        result = local_train_scaffold(party, global_model, zeros, cfg)
        assert result.steps == 1
        assert result.model.identical_to(local_train_fedavg(party, global_model, cfg).model)

    def test_scaffold_control_variate_refresh(self, party, global_model, make_cfg, rng):
        """c_i+ - c_i + c == (w_t - w) / (K * lr)."""
        cfg = make_cfg(variant="scaffold", learning_rate=0.1, momentum=0.0)
        c = ParamVector(rng.normal(scale=0.01, size=len(global_model)), global_model.arch)
        c_i = ParamVector(rng.normal(scale=0.01, size=len(global_model)), global_model.arch)
        party.control_variate = c_i.copy()
        result = local_train_scaffold(party, global_model, c, cfg)
        drift = (global_model.values - result.model.values) / (result.steps * 0.1)
        assert_allclose(result.control_variate.values - c_i.values + c.values, drift, atol=1e-12)
        assert_allclose(result.delta_c.values, result.control_variate.values - c_i.values, atol=1e-15)

    def test_scaffold_empty_party_is_skipped(self, blobs_split, global_model, make_cfg):
        train, _ = blobs_split
        empty = PartyState.create(3, train.subset([]))
        empty.control_variate = ParamVector.zeros_like(global_model)
        result = local_train_scaffold(empty, global_model, ParamVector.zeros_like(global_model), make_cfg(variant="scaffold"))
        assert result.steps == 0
        assert result.model.identical_to(global_model)

    def test_solo_learns_single_class_party(self, blobs_split, toy_arch, make_cfg):
        train, _ = blobs_split
        only_first = np.flatnonzero(train.labels == 0)
        lonely = PartyState.create(0, train.subset(only_first))
        result = solo_train(lonely, make_cfg(variant="solo", local_epochs=10), arch=toy_arch)
        assert top1_accuracy(result.model, lonely.dataset) >= 0.99


class TestRun:
    def test_zero_learning_rate_keeps_initial_model(self, blobs_split, toy_partition, toy_arch, make_cfg):
        train, test = blobs_split
        cfg = make_cfg(variant="fedavg", learning_rate=0.0, rounds=2)
        result = run(cfg, toy_partition, train, test, toy_arch)
        assert result.final_model.identical_to(to_vector(init(toy_arch, derive_seed(cfg.master_seed, Stream.INIT))))

    def test_records(self, blobs_split, toy_partition, toy_arch, make_cfg):
        train, test = blobs_split
        seen = []
        result = run(make_cfg(variant="moon", rounds=5), toy_partition, train, test, toy_arch, eval_every=2, on_round=seen.append)
        assert [r.round for r in result.records] == [2, 4, 5]
        assert seen == result.records
        assert all(0.0 <= r.accuracy <= 1.0 for r in result.records)
        assert all(r.participants == list(range(5)) for r in result.records)
        assert result.global_state.round == 5

    @pytest.mark.parametrize("overrides", [
        {"variant": "moon", "mu": 0.0},
        {"variant": "fedprox", "mu": 0.0},
        {"variant": "scaffold", "scaffold_corrections": False},
        {"variant": "fedavg", "server_momentum": 0.0},
    ], ids=["moon-mu0", "fedprox-mu0", "scaffold-frozen", "fedavgm-beta0"])
    def test_degenerate_variant_follows_fedavg_every_round(
        self, blobs_split, toy_partition, toy_arch, make_cfg, overrides
    ):
        train, test = blobs_split

        def trajectory(cfg):
            models = []
            run(cfg, toy_partition, train, test, toy_arch, on_model=lambda r, m: models.append((r, m)))
            return models

        degenerate = trajectory(make_cfg(rounds=10, **overrides))
        plain = trajectory(make_cfg(variant="fedavg", rounds=10))
        assert [r for r, _ in degenerate] == list(range(1, 11))
        assert [r for r, _ in plain] == list(range(1, 11))
        for (_, a), (_, b) in zip(degenerate, plain):
            assert np.max(np.abs(a.values - b.values)) <= 1e-12

    def test_scaffold_without_corrections_keeps_zero_variates(self, blobs_split, toy_partition, toy_arch, make_cfg):
        train, test = blobs_split
        frozen = run(make_cfg(variant="scaffold", scaffold_corrections=False, rounds=3), toy_partition, train, test, toy_arch)
        assert not np.any(frozen.global_state.control_variate.values)
        assert all(not np.any(p.control_variate.values) for p in frozen.parties)

    def test_on_model_sees_every_round(self, blobs_split, toy_partition, toy_arch, make_cfg):
        train, test = blobs_split
        seen = []
        result = run(
            make_cfg(variant="fedavg", rounds=5), toy_partition, train, test, toy_arch,
            eval_every=3, on_model=lambda r, m: seen.append((r, m)),
        )
        assert [r for r, _ in seen] == [1, 2, 3, 4, 5]
        assert seen[-1][1].identical_to(result.final_model)
        assert seen[0][1] is not result.final_model

    def test_scaffold_server_variate_is_party_mean(self, blobs_split, toy_partition, toy_arch, make_cfg):
        train, test = blobs_split
        result = run(make_cfg(variant="scaffold", rounds=2), toy_partition, train, test, toy_arch)
        mean_ci = np.mean([p.control_variate.values for p in result.parties], axis=0)
        assert_allclose(result.global_state.control_variate.values, mean_ci, atol=1e-12)

    def test_parallel_matches_serial(self, blobs_split, toy_partition, toy_arch, make_cfg):
        train, test = blobs_split
        cfg = make_cfg(variant="moon", sample_fraction=0.6, rounds=4, server_momentum=0.5)
        serial = run(cfg, toy_partition, train, test, toy_arch, workers=1)
        parallel = run(cfg, toy_partition, train, test, toy_arch, workers=4)
        assert serial.final_model.identical_to(parallel.final_model)
        assert [r.csv_row() for r in serial.records] == [r.csv_row() for r in parallel.records]

    def test_unsampled_parties_are_untouched(self, blobs_split, toy_partition, toy_arch, make_cfg):
        train, test = blobs_split
        result = run(make_cfg(variant="moon", sample_fraction=0.4, rounds=1), toy_partition, train, test, toy_arch)
        sampled = set(result.records[0].participants)
        assert len(sampled) == 2
        for p in result.parties:
            assert len(p.prev_models) == (1 if p.party_id in sampled else 0)

    @pytest.mark.parametrize("variant", ["moon", "scaffold", "fedavg"])
    def test_resume_reproduces_uninterrupted_run(self, tmp_path, blobs_split, toy_partition, toy_arch, make_cfg, variant):
        train, test = blobs_split
        extra = {"server_momentum": 0.9} if variant == "fedavg" else {}
        full = run(make_cfg(variant=variant, rounds=4, **extra), toy_partition, train, test, toy_arch)
        ckpt = tmp_path / "federation.ckpt"
        run(make_cfg(variant=variant, rounds=2, **extra), toy_partition, train, test, toy_arch, checkpoint_path=ckpt)
        resumed = run(make_cfg(variant=variant, rounds=4, **extra), toy_partition, train, test, toy_arch, resume_from=ckpt)
        assert resumed.final_model.identical_to(full.final_model)
        assert [r.round for r in resumed.records] == [3, 4]
        assert [r.accuracy for r in resumed.records] == [r.accuracy for r in full.records[2:]]

    def test_solo_never_touches_global_model(self, blobs_split, toy_partition, toy_arch, make_cfg):
        train, test = blobs_split
        cfg = make_cfg(variant="solo", rounds=2)
        result = run(cfg, toy_partition, train, test, toy_arch)
        assert result.final_model.identical_to(to_vector(init(toy_arch, derive_seed(cfg.master_seed, Stream.INIT))))
        assert sorted(result.party_models) == list(range(5))
        assert all(r.accuracy_std is not None and r.algorithm == "solo" for r in result.records)

    def test_solo_cannot_checkpoint(self, tmp_path, blobs_split, toy_partition, toy_arch, make_cfg):
        train, test = blobs_split
        with pytest.raises(ContractError):
            run(make_cfg(variant="solo"), toy_partition, train, test, toy_arch, checkpoint_path=tmp_path / "x.ckpt")

    def test_rejects_foreign_partition(self, blobs_split, toy_partition, toy_arch, make_cfg):
        train, test = blobs_split
        with pytest.raises(ContractError):
            run(make_cfg(), toy_partition, train.subset(range(10)), test, toy_arch)

    def test_golden_five_round_run(self, blobs_split, toy_partition, toy_arch, make_cfg, snapshot):
        train, test = blobs_split

        def build():
            result = run(make_cfg(variant="moon", rounds=5), toy_partition, train, test, toy_arch)
            return {
                "accuracy": [r.accuracy for r in result.records],
                "checksum": float(np.sum(result.final_model.values)),
            }

        snapshot("golden_moon_run", build)


def test_batch_seeds_depend_on_party_round_and_epoch(blobs_split):
    train, _ = blobs_split
    ds = train.subset(range(40))
    orders = {
        key: [y.tolist() for _, y in batches(ds, 40, derive_seed(3, Stream.BATCHES, *key))]
        for key in [(0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1)]
    }
    assert len({str(v) for v in orders.values()}) == 4


def test_algorithm_label():
    assert AlgorithmConfig(variant="moon").label == "moon"
    assert AlgorithmConfig(variant="moon", server_momentum=0.9).label == "moon+fedavgm"


def test_dataset_fixture_is_consistent(blobs_split):
    train, test = blobs_split
    assert isinstance(train, Dataset) and train.num_classes == test.num_classes == 3
