"""Evaluation metrics: accuracy, rounds-to-target, speedup and per-party statistics."""

from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.errors import ContractError
from app.core.tensor import Tensor
from app.models.network import Network, ParamVector, from_vector
from app.schemas.records import Curve, RoundRecord
from app.services.data import Dataset

NEVER: Literal["never"] = "never"

_EVAL_CHUNK = 1024


def predict(net: Network, ds: Dataset) -> np.ndarray:
    """Argmax class per sample; ties go to the lowest class index."""
    preds = []
    for start in range(0, ds.n, _EVAL_CHUNK):
        logits = net(Tensor(ds.features.values[start:start + _EVAL_CHUNK]))
        preds.append(np.argmax(logits.values, axis=1))
    return np.concatenate(preds)


def top1_accuracy(net: Union[Network, ParamVector], ds: Dataset) -> float:
    if ds.n == 0:
        raise ContractError("top1_accuracy needs a non-empty dataset")
    if isinstance(net, ParamVector):
        net = from_vector(net.arch, net, trainable=False)
    return float(np.mean(predict(net, ds) == ds.labels))


def evaluate_parties(models: Dict[int, ParamVector], ds: Dataset) -> Dict[int, float]:
    return {pid: top1_accuracy(model, ds) for pid, model in sorted(models.items())}


def rounds_to_target(curve: Curve, target: float) -> Optional[int]:
    """First round whose accuracy reaches `target`, or None."""
    if not 0 < target <= 1:
        raise ContractError(f"target accuracy must lie in (0, 1], got {target}")
    for round_index, accuracy in curve.points:
        if accuracy >= target:
            return round_index
    return None


def speedup(baseline: Curve, other: Curve) -> Union[float, Literal["never"]]:
    """Rounds the baseline needs to reach its own final accuracy over the rounds `other` needs.

    The baseline always reaches its final accuracy, at the latest in its last
    round, so speedup(c, c) == 1.
    """
    if not baseline.points or not other.points:
        raise ContractError("speedup needs non-empty curves")
    target = baseline.final_accuracy
    # every round reaches a zero target
    if target <= 0:
        return baseline.points[0][0] / other.points[0][0]
    reached = rounds_to_target(other, target)
    if reached is None:
        return NEVER
    return rounds_to_target(baseline, target) / reached


def party_stats(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and population standard deviation."""
    if len(values) == 0:
        raise ContractError("party_stats needs at least one value")
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def curve_from_records(records: List[RoundRecord], name: str = "") -> Curve:
    return Curve(name=name or (records[0].algorithm if records else ""), points=[(r.round, r.accuracy) for r in records])
