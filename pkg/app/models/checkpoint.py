"""
Binary checkpoint container for models and whole federations.

Layout (all integers little-endian):

    bytes 0-7    magic b"FEDSIMCK"
    bytes 8-11   uint32 format version (currently 1)
    bytes 12-15  uint32 header length H
    next H bytes UTF-8 JSON header
    remainder    float64 little-endian values

Model checkpoints use header {"kind": "model", "arch": {...}, "length": n,
"prng": name, "prng_version": v}
followed by the ParamVector in canonical layer order.

Federation checkpoints use header {"kind": "federation", ...} and store the
vectors in this order: global model, server momentum buffer (if present),
global control variate (if present), then for every party in ascending id
its previous local models front to back and its control variate (if present).
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError

from app.core.errors import CheckpointError
from app.core.seeding import PRNG_NAME, PRNG_VERSION
from app.models.network import Network, ParamVector, from_vector
from app.schemas.config import NetworkArch

MAGIC = b"FEDSIMCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")

PathLike = Union[str, Path]


@dataclass
class PartySnapshot:
    party_id: int
    prev_models: List[ParamVector] = field(default_factory=list)
    control_variate: Optional[ParamVector] = None


@dataclass
class FederationSnapshot:
    round: int
    algorithm: str
    global_model: ParamVector
    momentum_buffer: Optional[ParamVector] = None
    control_variate: Optional[ParamVector] = None
    parties: List[PartySnapshot] = field(default_factory=list)


def _write(path: PathLike, header: dict, vectors: List[ParamVector]) -> None:
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(payload)))
        f.write(payload)
        for v in vectors:
            f.write(np.asarray(v.values, dtype="<f8").tobytes())


def _read(path: PathLike) -> Tuple[dict, np.ndarray]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}", exc) from exc
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    body = raw[_PREFIX.size + header_len:]
    if len(body) % 8 != 0:
        raise CheckpointError(f"{path}: value section is not a whole number of float64s")
    try:
        header = json.loads(raw[_PREFIX.size:_PREFIX.size + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header", exc) from exc
    if not isinstance(header, dict):
        raise CheckpointError(f"{path}: header is not a JSON object")
    return header, np.frombuffer(body, dtype="<f8").astype(np.float64)


def _arch(header: dict, path: PathLike) -> NetworkArch:
    try:
        return NetworkArch.model_validate(header["arch"])
    except (KeyError, ValidationError) as exc:
        raise CheckpointError(f"{path}: invalid architecture descriptor", exc) from exc


def save_model(path: PathLike, model: ParamVector) -> None:
    if model.arch is None:
        raise CheckpointError("cannot checkpoint a vector without an architecture")
    header = {
        "kind": "model",
        "arch": model.arch.model_dump(mode="json"),
        "length": len(model),
        "prng": PRNG_NAME,
        "prng_version": PRNG_VERSION,
    }
    _write(path, header, [model])


def load_model(path: PathLike) -> ParamVector:
    header, values = _read(path)
    if header.get("kind") != "model":
        raise CheckpointError(f"{path}: expected a model checkpoint, found {header.get('kind')!r}")
    arch = _arch(header, path)
    if values.shape[0] != header.get("length") or values.shape[0] != arch.parameter_count():
        raise CheckpointError(f"{path}: parameter count does not match the architecture")
    return ParamVector(values, arch)


def load_network(path: PathLike) -> Network:
    model = load_model(path)
    return from_vector(model.arch, model)


def save_federation(path: PathLike, snapshot: FederationSnapshot) -> None:
    arch = snapshot.global_model.arch
    if arch is None:
        raise CheckpointError("cannot checkpoint a federation without an architecture")
    vectors = [snapshot.global_model]
    if snapshot.momentum_buffer is not None:
        vectors.append(snapshot.momentum_buffer)
    if snapshot.control_variate is not None:
        vectors.append(snapshot.control_variate)
    parties = []
    for party in sorted(snapshot.parties, key=lambda p: p.party_id):
        vectors.extend(party.prev_models)
        if party.control_variate is not None:
            vectors.append(party.control_variate)
        parties.append({
            "party_id": party.party_id,
            "prev_models": len(party.prev_models),
            "has_control_variate": party.control_variate is not None,
        })
    header = {
        "kind": "federation",
        "round": snapshot.round,
        "algorithm": snapshot.algorithm,
        "prng": PRNG_NAME,
        "prng_version": PRNG_VERSION,
        "arch": arch.model_dump(mode="json"),
        "has_momentum": snapshot.momentum_buffer is not None,
        "has_control_variate": snapshot.control_variate is not None,
        "parties": parties,
    }
    _write(path, header, vectors)


def load_federation(path: PathLike) -> FederationSnapshot:
    header, values = _read(path)
    if header.get("kind") != "federation":
        raise CheckpointError(f"{path}: expected a federation checkpoint, found {header.get('kind')!r}")
    if (header.get("prng"), header.get("prng_version")) != (PRNG_NAME, PRNG_VERSION):
        raise CheckpointError(
            f"{path}: written with random streams {header.get('prng')!r} v{header.get('prng_version')}, "
            f"this build uses {PRNG_NAME!r} v{PRNG_VERSION}"
        )
    arch = _arch(header, path)
    n = arch.parameter_count()
    try:
        count = 1 + int(header["has_momentum"]) + int(header["has_control_variate"])
        count += sum(int(p["prev_models"]) + int(p["has_control_variate"]) for p in header["parties"])
        if values.shape[0] != count * n:
            raise CheckpointError(f"{path}: expected {count} vectors of length {n}")

        chunks = iter(ParamVector(values[i * n:(i + 1) * n], arch) for i in range(count))
        global_model = next(chunks)
        momentum = next(chunks) if header["has_momentum"] else None
        control = next(chunks) if header["has_control_variate"] else None
        parties = []
        for meta in header["parties"]:
            prev = [next(chunks) for _ in range(int(meta["prev_models"]))]
            c_i = next(chunks) if meta["has_control_variate"] else None
            parties.append(PartySnapshot(party_id=int(meta["party_id"]), prev_models=prev, control_variate=c_i))
        return FederationSnapshot(
            round=int(header["round"]),
            algorithm=str(header["algorithm"]),
            global_model=global_model,
            momentum_buffer=momentum,
            control_variate=control,
            parties=parties,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid federation header: {exc!r}", exc) from exc
