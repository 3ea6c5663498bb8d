"""Split a pooled dataset into per-client train/test batches.

Three knobs control the split: ``balance`` (equal client sizes or not),
``non_iid`` (class imbalance across clients or not) and ``distribution``
(``pat:<k>`` gives every client exactly k classes, ``dir:<alpha>`` draws
class shares from a Dirichlet distribution).

All randomness comes from one PCG64 generator seeded with ``spec.seed``,
consumed in a fixed order, so a (dataset, spec) pair always maps to the
same result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset

TEST_FRACTION = 0.25
MIN_CLIENT_SAMPLES = 10
HARD_MIN_CLIENT_SAMPLES = 4
UNBALANCED_SIZE_CONCENTRATION = 1.5
PATHOLOGICAL_SPLIT_CONCENTRATION = 1.0


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    balance: bool = True
    non_iid: bool = False
    distribution: str = "none"  # "none" | "pat" | "dir"
    classes_per_client: int | None = None
    alpha: float | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_clients < 1:
            raise PartitionError("num_clients must be positive")
        if self.distribution not in ("none", "pat", "dir"):
            raise PartitionError(f"unknown distribution {self.distribution!r}")
        if self.non_iid != (self.distribution != "none"):
            raise PartitionError("non_iid must be set exactly when a distribution is given")
        if self.distribution == "pat" and (self.classes_per_client is None or self.classes_per_client < 1):
            raise PartitionError("pathological distribution needs classes_per_client >= 1")
        if self.distribution == "dir" and (self.alpha is None or not self.alpha > 0):
            raise PartitionError("dirichlet distribution needs alpha > 0")
        if not 0 <= self.seed < 2**64:
            raise PartitionError("seed must be an unsigned 64-bit integer")

    @classmethod
    def from_flag(cls, num_clients: int, balance: bool, dist: str | None, seed: int = 0) -> PartitionSpec:
        """Build a spec from a ``pat:<k>`` / ``dir:<alpha>`` / ``none`` flag."""
        if dist in (None, "", "none"):
            return cls(num_clients, balance, False, "none", seed=seed)
        kind, _, arg = dist.partition(":")
        try:
            if kind == "pat":
                return cls(num_clients, balance, True, "pat", classes_per_client=int(arg), seed=seed)
            if kind == "dir":
                return cls(num_clients, balance, True, "dir", alpha=float(arg), seed=seed)
        except ValueError:
            raise PartitionError(f"bad distribution argument in {dist!r}") from None
        raise PartitionError(f"unknown distribution {dist!r}")

    @property
    def flag(self) -> str:
        if self.distribution == "pat":
            return f"pat:{self.classes_per_client}"
        if self.distribution == "dir":
            return f"dir:{self.alpha:g}"
        return "none"

    def to_dict(self) -> dict:
        return {
            "num_clients": self.num_clients,
            "balance": self.balance,
            "non_iid": self.non_iid,
            "distribution": self.flag,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> PartitionSpec:
        return cls.from_flag(int(d["num_clients"]), bool(d["balance"]), d.get("distribution"),
                             int(d.get("seed", 0)))


@dataclass
class ClientSplit:
    train: np.ndarray
    test: np.ndarray
    histogram: np.ndarray

    @property
    def size(self) -> int:
        return len(self.train) + len(self.test)


@dataclass
class PartitionResult:
    clients: list[ClientSplit]
    spec: PartitionSpec
    num_classes: int
    dataset_size: int
    seed: int = field(init=False)

    def __post_init__(self) -> None:
        self.seed = self.spec.seed


def largest_remainder(shares: np.ndarray, total: int) -> np.ndarray:
    """Round nonnegative ``shares`` to integers summing exactly to ``total``.

    ``shares`` is rescaled to sum to ``total`` first. Leftover units go to the
    largest fractional parts; ties go to the lower index.
    """
    shares = np.asarray(shares, dtype=np.float64)
    s = shares.sum()
    if s <= 0:
        shares, s = np.ones(len(shares)), float(len(shares))
    exact = shares * (total / s)
    base = np.floor(exact).astype(np.int64)
    left = total - int(base.sum())
    if left > 0:
        order = np.argsort(-(exact - base), kind="stable")
        base[order[:left]] += 1
    elif left < 0:  # float noise pushed floors over the total
        order = np.argsort(exact - base, kind="stable")
        for i in order:
            if left == 0:
                break
            if base[i] > 0:
                base[i] -= 1
                left += 1
    return base


def _equal_split(n: int, parts: int) -> np.ndarray:
    return largest_remainder(np.ones(parts), n)


def _iid_balanced(labels, spec, rng):
    n = len(labels)
    chunk = n // spec.num_clients
    perm = rng.permutation(n)
    return [perm[i * chunk : (i + 1) * chunk] for i in range(spec.num_clients)]


def _iid_unbalanced(labels, spec, rng):
    n, k = len(labels), spec.num_clients
    floor = min(MIN_CLIENT_SAMPLES, n // k)
    props = rng.dirichlet(np.full(k, UNBALANCED_SIZE_CONCENTRATION))
    sizes = floor + largest_remainder(props, n - floor * k)
    perm = rng.permutation(n)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return [perm[bounds[i] : bounds[i + 1]] for i in range(k)]


def _class_pools(labels, num_classes, rng):
    return [rng.permutation(np.flatnonzero(labels == c)) for c in range(num_classes)]


def _pathological(labels, num_classes, spec, rng):
    k, nc = spec.classes_per_client, spec.num_clients
    if k > num_classes:
        raise PartitionError(f"classes_per_client={k} exceeds the {num_classes} classes")
    if k * nc < num_classes:
        raise PartitionError(f"{nc} clients x {k} classes cannot cover {num_classes} classes")
    order = rng.permutation(num_classes)
    assignees: list[list[int]] = [[] for _ in range(num_classes)]
    for slot in range(nc * k):
        assignees[order[slot % num_classes]].append(slot // k)
    pools = _class_pools(labels, num_classes, rng)
    parts: list[list[np.ndarray]] = [[] for _ in range(nc)]
    for c in range(num_classes):
        owners = assignees[c]
        if len(pools[c]) < len(owners):
            raise PartitionError(f"class {c} has {len(pools[c])} samples for {len(owners)} clients")
        if spec.balance:
            counts = _equal_split(len(pools[c]), len(owners))
        else:
            # one sample each up front so every owner really holds the class
            props = rng.dirichlet(np.full(len(owners), PATHOLOGICAL_SPLIT_CONCENTRATION))
            counts = 1 + largest_remainder(props, len(pools[c]) - len(owners))
        start = 0
        for owner, cnt in zip(owners, counts):
            parts[owner].append(pools[c][start : start + cnt])
            start += cnt
    return [np.concatenate(p) if p else np.empty(0, dtype=np.int64) for p in parts]


def _dirichlet_unbalanced(labels, num_classes, spec, rng):
    nc = spec.num_clients
    pools = _class_pools(labels, num_classes, rng)
    parts: list[list[np.ndarray]] = [[] for _ in range(nc)]
    for c in range(num_classes):
        q = rng.dirichlet(np.full(nc, spec.alpha))
        counts = largest_remainder(q, len(pools[c]))
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for j in range(nc):
            parts[j].append(pools[c][bounds[j] : bounds[j + 1]])
    clients = [np.concatenate(p) for p in parts]
    return _repair_small(clients, rng)


def _repair_small(clients, rng):
    """Move samples from the largest client into clients below the floor."""
    floor = MIN_CLIENT_SAMPLES
    while True:
        sizes = np.array([len(c) for c in clients])
        small = int(np.argmin(sizes))
        if sizes[small] >= floor:
            return clients
        big = int(np.argmax(sizes))
        spare = sizes[big] - floor
        need = min(floor - sizes[small], spare)
        if need <= 0:
            return clients
        donor = clients[big]
        pick = np.zeros(len(donor), dtype=bool)
        pick[rng.choice(len(donor), size=need, replace=False)] = True
        clients[small] = np.concatenate([clients[small], donor[pick]])
        clients[big] = donor[~pick]


def _dirichlet_balanced(labels, num_classes, spec, rng):
    nc = spec.num_clients
    q = np.stack([rng.dirichlet(np.full(nc, spec.alpha)) for _ in range(num_classes)])
    pools = _class_pools(labels, num_classes, rng)
    remaining = np.array([len(p) for p in pools], dtype=np.int64)
    cursor = np.zeros(num_classes, dtype=np.int64)
    per_client = len(labels) // nc
    clients = []
    for j in range(nc):
        mix = q[:, j] / q[:, j].sum()
        take = np.minimum(largest_remainder(mix, per_client), remaining)
        short = per_client - int(take.sum())
        while short > 0:
            room = remaining - take
            weights = np.where(room > 0, mix, 0.0)
            if weights.sum() <= 0:  # preferred pools exhausted; any nonempty class
                weights = room.astype(np.float64)
            extra = np.minimum(largest_remainder(weights, short), room)
            if extra.sum() == 0:
                extra[int(np.argmax(weights))] = 1
            take += extra
            short -= int(extra.sum())
        chunk = []
        for c in np.flatnonzero(take):
            chunk.append(pools[c][cursor[c] : cursor[c] + take[c]])
            cursor[c] += take[c]
        remaining -= take
        clients.append(np.concatenate(chunk))
    return clients


def _split_train_test(idx, labels, num_classes, rng):
    """Stratified 75/25 split of one client's samples."""
    client_labels = labels[idx]
    counts = np.bincount(client_labels, minlength=num_classes)
    n_test = math.floor(TEST_FRACTION * len(idx) + 0.5)
    test_quota = largest_remainder(counts * TEST_FRACTION, n_test)
    train, test = [], []
    for c in np.flatnonzero(counts):
        members = rng.permutation(idx[client_labels == c])
        test.append(members[: test_quota[c]])
        train.append(members[test_quota[c] :])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test)), counts


def partition(dataset: Dataset, spec: PartitionSpec) -> PartitionResult:
    labels = np.asarray(dataset.labels)
    if len(labels) == 0:
        raise PartitionError("cannot partition an empty dataset")
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    if spec.distribution == "none":
        if spec.balance:
            clients = _iid_balanced(labels, spec, rng)
        else:
            clients = _iid_unbalanced(labels, spec, rng)
    elif spec.distribution == "pat":
        clients = _pathological(labels, dataset.num_classes, spec, rng)
    elif spec.balance:
        clients = _dirichlet_balanced(labels, dataset.num_classes, spec, rng)
    else:
        clients = _dirichlet_unbalanced(labels, dataset.num_classes, spec, rng)

    for i, idx in enumerate(clients):
        if len(idx) < HARD_MIN_CLIENT_SAMPLES:
            raise PartitionError(
                f"client {i} ends with {len(idx)} samples (< {HARD_MIN_CLIENT_SAMPLES}); "
                "use fewer clients or a larger dataset"
            )
    splits = [ClientSplit(*_split_train_test(idx, labels, dataset.num_classes, rng)) for idx in clients]
    return PartitionResult(splits, spec, dataset.num_classes, len(labels))


def describe(result: PartitionResult) -> dict:
    """JSON-serializable record of client sizes and class histograms."""
    return {
        "spec": result.spec.to_dict(),
        "num_classes": result.num_classes,
        "dataset_size": result.dataset_size,
        "clients": [
            {
                "client": i,
                "train_size": int(len(c.train)),
                "test_size": int(len(c.test)),
                "histogram": [int(v) for v in c.histogram],
            }
            for i, c in enumerate(result.clients)
        ],
    }
