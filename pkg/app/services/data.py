"""Datasets, party partitions and mini-batch iteration."""

import codecs
import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Sequence, Tuple, Union

import numpy as np

from app.core.errors import (
    ContractError,
    InputError,
    ParameterError,
    ParseError,
    PartitionInfeasibleError,
)
from app.core.seeding import Stream, derive_seed, make_rng
from app.core.tensor import Tensor
from app.schemas.config import PartitionSpec

logger = logging.getLogger(__name__)

MAX_PARTITION_ATTEMPTS = 100
MAX_PLACEMENT_ATTEMPTS = 1000

PathLike = Union[str, Path]


@dataclass(eq=False)
class Dataset:
    features: Tensor
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.values.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise InputError(f"features {self.features.shape} and labels {self.labels.shape} disagree")
        if self.num_classes < 1:
            raise InputError("num_classes must be positive")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.n

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(Tensor(self.features.values[idx]), self.labels[idx], self.num_classes)

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(eq=False)
class Partition:
    """Disjoint index sets, one per party, covering the parent dataset."""

    index_sets: List[np.ndarray]

    @property
    def num_parties(self) -> int:
        return len(self.index_sets)

    def sizes(self) -> List[int]:
        return [int(s.size) for s in self.index_sets]

    def is_valid_for(self, n: int) -> bool:
        joined = np.concatenate(self.index_sets) if self.index_sets else np.array([], dtype=np.int64)
        return joined.size == n and np.array_equal(np.sort(joined), np.arange(n))

    def to_dict(self) -> Dict[str, List[int]]:
        return {str(i): [int(v) for v in s] for i, s in enumerate(self.index_sets)}

    @classmethod
    def from_dict(cls, mapping: Dict[str, List[int]]) -> "Partition":
        keys = sorted(mapping, key=int)
        return cls([np.sort(np.asarray(mapping[k], dtype=np.int64)) for k in keys])


# --- generation -------------------------------------------------------------

def make_blobs(num_classes: int, samples_per_class: int, dim: int, spread: float, seed: int) -> Dataset:
    """Gaussian class clusters N(mean_k, spread^2 I).

    Class means are drawn uniformly from a cube and rejected until every pair
    is at least 4 * spread apart.
    """
    if num_classes < 1 or samples_per_class < 1 or dim < 1 or not spread > 0:
        raise ParameterError("make_blobs parameters must all be positive")
    rng = make_rng(derive_seed(seed, Stream.BLOBS))
    half_width = 4.0 * spread * num_classes ** (1.0 / dim)
    min_distance = 4.0 * spread
    means: List[np.ndarray] = []
    for k in range(num_classes):
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            candidate = rng.uniform(-half_width, half_width, size=dim)
            if all(np.linalg.norm(candidate - m) >= min_distance for m in means):
                means.append(candidate)
                break
        else:
            raise ParameterError(
                f"could not place class {k} mean at distance >= {min_distance} after "
                f"{MAX_PLACEMENT_ATTEMPTS} attempts; use fewer classes or a larger dim"
            )
    features = np.concatenate([m + spread * rng.standard_normal((samples_per_class, dim)) for m in means])
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    return Dataset(Tensor(features), labels, num_classes)


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    if not 0 < test_fraction < 1:
        raise ParameterError("test_fraction must lie in (0, 1)")
    n_test = max(1, int(round(ds.n * test_fraction)))
    if n_test >= ds.n:
        raise ParameterError(f"dataset of {ds.n} samples is too small for a {test_fraction} holdout")
    perm = make_rng(derive_seed(seed, Stream.SPLIT)).permutation(ds.n)
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


# --- partitioning -----------------------------------------------------------

def dirichlet_proportions(rng: np.random.Generator, beta: float, num_parties: int) -> np.ndarray:
    """One draw from Dir_N(beta) via normalised Gamma(beta, 1) variates."""
    while True:
        g = rng.standard_gamma(beta, size=num_parties)
        total = g.sum()
        if total > 0:
            return g / total


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing exactly to `total`, closest to proportions * total."""
    quotas = proportions * total
    counts = np.floor(quotas).astype(np.int64)
    remainder = total - int(counts.sum())
    order = np.argsort(-(quotas - counts), kind="stable")
    counts[order[:remainder]] += 1
    return counts


def dirichlet_partition(ds: Dataset, spec: PartitionSpec) -> Partition:
    """Label-skewed partition: class k is split across parties by p_k ~ Dir_N(beta)."""
    if spec.mode != "dirichlet":
        raise ContractError(f"dirichlet_partition called with mode {spec.mode!r}")
    n_parties = spec.num_parties
    if n_parties > ds.n:
        raise PartitionInfeasibleError(f"cannot give {n_parties} parties at least one of {ds.n} samples")

    rng = make_rng(derive_seed(spec.seed, Stream.PARTITION))
    class_indices = [np.flatnonzero(ds.labels == k) for k in range(ds.num_classes)]
    for attempt in range(1, MAX_PARTITION_ATTEMPTS + 1):
        assigned: List[List[np.ndarray]] = [[] for _ in range(n_parties)]
        for indices in class_indices:
            proportions = dirichlet_proportions(rng, spec.beta, n_parties)
            counts = largest_remainder(proportions, indices.size)
            shuffled = rng.permutation(indices)
            for party, chunk in enumerate(np.split(shuffled, np.cumsum(counts)[:-1])):
                assigned[party].append(chunk)
        index_sets = [np.sort(np.concatenate(chunks)) for chunks in assigned]
        if all(s.size > 0 for s in index_sets):
            return Partition(index_sets)
        logger.warning(f"Dirichlet draw {attempt} left a party without samples; redrawing")
    raise PartitionInfeasibleError(
        f"no partition without empty parties after {MAX_PARTITION_ATTEMPTS} draws "
        f"(beta={spec.beta}, parties={n_parties}); use a larger beta or fewer parties"
    )


def iid_partition(ds: Dataset, spec: PartitionSpec) -> Partition:
    """Seeded shuffle split into contiguous near-equal shares (first parties get the remainder)."""
    if spec.mode != "iid":
        raise ContractError(f"iid_partition called with mode {spec.mode!r}")
    if spec.num_parties > ds.n:
        raise PartitionInfeasibleError(f"cannot split {ds.n} samples across {spec.num_parties} parties")
    perm = make_rng(derive_seed(spec.seed, Stream.PARTITION)).permutation(ds.n)
    base, extra = divmod(ds.n, spec.num_parties)
    sizes = [base + 1 if i < extra else base for i in range(spec.num_parties)]
    return Partition([np.sort(chunk) for chunk in np.split(perm, np.cumsum(sizes)[:-1])])


def partition_dataset(ds: Dataset, spec: PartitionSpec) -> Partition:
    if spec.mode == "iid":
        return iid_partition(ds, spec)
    return dirichlet_partition(ds, spec)


def class_counts(ds: Dataset, partition: Partition) -> np.ndarray:
    """Party x class matrix of sample counts."""
    return np.stack([np.bincount(ds.labels[idx], minlength=ds.num_classes) for idx in partition.index_sets])


def label_entropy(counts: Sequence[int]) -> float:
    """Shannon entropy (nats) of a party's label distribution."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def save_partition_json(partition: Partition, path: PathLike) -> None:
    Path(path).write_text(json.dumps(partition.to_dict()), encoding="utf-8")


def load_partition_json(path: PathLike) -> Partition:
    try:
        return Partition.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except (OSError, ValueError) as exc:
        raise ParseError(f"invalid partition file {path}: {exc}", cause=exc) from exc


# --- iteration --------------------------------------------------------------

def batches(party_ds: Dataset, batch_size: int, epoch_seed: int) -> Iterator[Tuple[Tensor, np.ndarray]]:
    """Yield shuffled (features, labels) mini-batches; the last one may be partial."""
    if batch_size < 1:
        raise ContractError("batch_size must be at least 1")
    if party_ds.n == 0:
        return
    order = make_rng(epoch_seed).permutation(party_ds.n)
    for start in range(0, party_ds.n, batch_size):
        idx = order[start:start + batch_size]
        yield Tensor(party_ds.features.values[idx]), party_ds.labels[idx]


# --- CSV ingestion ----------------------------------------------------------

def _is_number(field: str) -> bool:
    try:
        float(field)
    except ValueError:
        return False
    return True


def load_csv(path: PathLike) -> Dataset:
    """Rows of d floats followed by an integer label.

    A header is recognised on the first non-blank row; a UTF-8 byte order mark
    is ignored. Lines are decoded one at a time so encoding errors carry their
    line number.
    """
    rows: List[List[float]] = []
    labels: List[int] = []
    width = None
    header_allowed = True
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}", cause=exc) from exc
    if raw.startswith(codecs.BOM_UTF8):
        raw = raw[len(codecs.BOM_UTF8):]
    for line_number, line in enumerate(raw.splitlines(), start=1):
        try:
            text = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"invalid UTF-8: {exc}", line_number, exc) from exc
        row = next(csv.reader([text]), [])
        if not row or all(not cell.strip() for cell in row):
            continue
        if header_allowed:
            header_allowed = False
            if not _is_number(row[0].strip()):
                continue
        if len(row) < 2:
            raise ParseError("expected at least one feature and a label", line_number)
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise ParseError(f"expected {width} columns, found {len(row)}", line_number)
        try:
            values = [float(cell) for cell in row[:-1]]
            label = int(row[-1].strip())
        except ValueError as exc:
            raise ParseError(f"malformed value: {exc}", line_number, exc) from exc
        if not all(math.isfinite(v) for v in values):
            raise ParseError("non-finite feature value", line_number)
        if label < 0:
            raise ParseError(f"negative label {label}", line_number)
        rows.append(values)
        labels.append(label)
    if not rows:
        raise ParseError(f"{path} contains no data rows")
    return Dataset(Tensor(np.asarray(rows)), np.asarray(labels), max(labels) + 1)


def export_csv(ds: Dataset, path: PathLike, header: bool = True) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        if header:
            writer.writerow([f"x{j}" for j in range(ds.dim)] + ["label"])
        for row, label in zip(ds.features.values, ds.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])
