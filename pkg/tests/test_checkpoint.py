import json
import struct

import numpy as np
import pytest

from app.core.errors import CheckpointError
from app.core.seeding import PRNG_NAME, PRNG_VERSION
from app.models.checkpoint import (
    MAGIC,
    FederationSnapshot,
    PartySnapshot,
    load_federation,
    load_model,
    load_network,
    save_federation,
    save_model,
)
from app.models.network import ParamVector, init, to_vector


def read_header(path):
    raw = path.read_bytes()
    _, _, header_len = struct.unpack_from("<8sII", raw)
    return json.loads(raw[16:16 + header_len].decode("utf-8"))


def write_raw(path, header, values):
    payload = json.dumps(header).encode("utf-8")
    path.write_bytes(struct.pack("<8sII", MAGIC, 1, len(payload)) + payload + np.asarray(values, dtype="<f8").tobytes())


@pytest.fixture
def model(small_arch):
    return to_vector(init(small_arch, 4))


class TestModelCheckpoint:
    def test_save_and_load(self, tmp_path, model, small_arch):
        path = tmp_path / "model.ckpt"
        save_model(path, model)
        loaded = load_model(path)
        assert loaded.identical_to(model)
        assert loaded.arch == small_arch
        assert to_vector(load_network(path)).identical_to(model)

    def test_layout_prefix(self, tmp_path, model):
        path = tmp_path / "model.ckpt"
        save_model(path, model)
        raw = path.read_bytes()
        magic, version, header_len = struct.unpack_from("<8sII", raw)
        assert magic == MAGIC and version == 1
        assert len(raw) == 16 + header_len + 8 * len(model)

    def test_bad_magic(self, tmp_path, model):
        path = tmp_path / "model.ckpt"
        save_model(path, model)
        path.write_bytes(b"NOTACKPT" + path.read_bytes()[8:])
        with pytest.raises(CheckpointError):
            load_model(path)

    def test_truncated_values(self, tmp_path, model):
        path = tmp_path / "model.ckpt"
        save_model(path, model)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CheckpointError):
            load_model(path)

    def test_missing_architecture(self, tmp_path):
        with pytest.raises(CheckpointError):
            save_model(tmp_path / "x.ckpt", ParamVector(np.zeros(3)))

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_model(tmp_path / "absent.ckpt")


class TestFederationCheckpoint:
    def test_round_trip(self, tmp_path, model):
        other = model.scaled(2.0)
        snap = FederationSnapshot(
            round=3,
            algorithm="scaffold+fedavgm",
            global_model=model,
            momentum_buffer=model.scaled(0.5),
            control_variate=ParamVector.zeros_like(model),
            parties=[
                PartySnapshot(1, [other], ParamVector.zeros_like(model)),
                PartySnapshot(0, [model, other], None),
            ],
        )
        path = tmp_path / "federation.ckpt"
        save_federation(path, snap)
        loaded = load_federation(path)
        assert loaded.round == 3 and loaded.algorithm == "scaffold+fedavgm"
        assert loaded.global_model.identical_to(model)
        assert loaded.momentum_buffer.identical_to(model.scaled(0.5))
        assert [p.party_id for p in loaded.parties] == [0, 1]
        assert [len(p.prev_models) for p in loaded.parties] == [2, 1]
        assert loaded.parties[0].prev_models[1].identical_to(other)
        assert loaded.parties[0].control_variate is None
        assert loaded.parties[1].control_variate is not None

    def test_model_file_is_not_a_federation(self, tmp_path, model):
        path = tmp_path / "model.ckpt"
        save_model(path, model)
        with pytest.raises(CheckpointError):
            load_federation(path)

    def test_header_records_random_streams(self, tmp_path, model):
        path = tmp_path / "federation.ckpt"
        save_federation(path, FederationSnapshot(round=1, algorithm="fedavg", global_model=model))
        header = read_header(path)
        assert header["prng"] == PRNG_NAME
        assert header["prng_version"] == PRNG_VERSION

    def test_random_stream_mismatch(self, tmp_path, model):
        path = tmp_path / "federation.ckpt"
        save_federation(path, FederationSnapshot(round=1, algorithm="fedavg", global_model=model))
        header = read_header(path)
        header["prng"] = "numpy.MT19937"
        write_raw(path, header, model.values)
        with pytest.raises(CheckpointError, match="random streams"):
            load_federation(path)

    @pytest.mark.parametrize("missing", ["round", "algorithm", "has_momentum", "has_control_variate", "parties"])
    def test_missing_header_key(self, tmp_path, model, missing):
        path = tmp_path / "federation.ckpt"
        save_federation(path, FederationSnapshot(round=1, algorithm="fedavg", global_model=model))
        header = read_header(path)
        del header[missing]
        write_raw(path, header, model.values)
        with pytest.raises(CheckpointError):
            load_federation(path)

    def test_malformed_party_entry(self, tmp_path, model):
        path = tmp_path / "federation.ckpt"
        save_federation(path, FederationSnapshot(round=1, algorithm="fedavg", global_model=model))
        header = read_header(path)
        header["parties"] = [{"party_id": 0}]
        write_raw(path, header, model.values)
        with pytest.raises(CheckpointError):
            load_federation(path)


def test_model_header_records_random_streams(tmp_path, model):
    path = tmp_path / "model.ckpt"
    save_model(path, model)
    assert read_header(path)["prng"] == PRNG_NAME
