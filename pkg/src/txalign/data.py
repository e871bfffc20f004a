"""Event records, client sequences, CSV loading and the synthetic generator."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

CATEGORICAL_FIELDS = ("mcc", "tx_type")
REQUIRED_COLUMNS = ("client_id", "timestamp", "amount", "mcc", "tx_type")

TRAIN = "train"
UNLABELED = "unlabeled"
HOLDOUT = "holdout"

SECONDS_PER_DAY = 86400


class SchemaError(ValueError):
    pass


class DataError(ValueError):
    pass


class EventRecord(NamedTuple):
    timestamp: int
    amount: float
    mcc: int
    tx_type: int


@dataclass(frozen=True, eq=False)
class EventSequence:
    """One client's events, stored column-wise and sorted by timestamp."""

    client_id: str
    timestamps: np.ndarray
    amounts: np.ndarray
    mcc: np.ndarray
    tx_type: np.ndarray
    label: int | None = None

    def __post_init__(self):
        n = len(self.timestamps)
        if not (len(self.amounts) == len(self.mcc) == len(self.tx_type) == n):
            raise DataError(f"client {self.client_id}: column lengths differ")
        if n and np.any(np.diff(self.timestamps) < 0):
            raise DataError(f"client {self.client_id}: events not sorted by timestamp")
        if n and self.timestamps[0] < 0:
            raise DataError(f"client {self.client_id}: negative timestamp")
        if np.any(np.isnan(self.amounts)):
            raise DataError(f"client {self.client_id}: NaN amount")

    @classmethod
    def from_records(cls, client_id: str, records, label: int | None = None) -> "EventSequence":
        records = sorted(records, key=lambda r: r.timestamp)
        return cls(
            client_id=client_id,
            timestamps=np.array([r.timestamp for r in records], dtype=np.int64),
            amounts=np.array([r.amount for r in records], dtype=np.float64),
            mcc=np.array([r.mcc for r in records], dtype=np.int64),
            tx_type=np.array([r.tx_type for r in records], dtype=np.int64),
            label=label,
        )

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def events(self) -> list[EventRecord]:
        return list(self.iter_events())

    def iter_events(self) -> Iterator[EventRecord]:
        for t, a, m, k in zip(self.timestamps, self.amounts, self.mcc, self.tx_type):
            yield EventRecord(int(t), float(a), int(m), int(k))

    def slice(self, start: int, stop: int) -> "EventSequence":
        return replace(
            self,
            timestamps=self.timestamps[start:stop],
            amounts=self.amounts[start:stop],
            mcc=self.mcc[start:stop],
            tx_type=self.tx_type[start:stop],
        )

    def same_content(self, other: "EventSequence") -> bool:
        return (
            self.client_id == other.client_id
            and self.label == other.label
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.amounts, other.amounts)
            and np.array_equal(self.mcc, other.mcc)
            and np.array_equal(self.tx_type, other.tx_type)
        )


@dataclass(frozen=True)
class Dataset:
    sequences: tuple[EventSequence, ...]
    vocab_sizes: dict[str, int]
    splits: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        ids = [s.client_id for s in self.sequences]
        if len(set(ids)) != len(ids):
            raise DataError("client ids are not unique")
        for s in self.sequences:
            for name in CATEGORICAL_FIELDS:
                col = getattr(s, name)
                if len(col) and (col.min() < 0 or col.max() >= self.vocab_sizes[name]):
                    raise DataError(
                        f"client {s.client_id}: {name} index outside vocabulary of size "
                        f"{self.vocab_sizes[name]}"
                    )
        if not self.splits:
            object.__setattr__(
                self, "splits", {s.client_id: TRAIN if s.label is not None else UNLABELED for s in self.sequences}
            )

    def __len__(self) -> int:
        return len(self.sequences)

    def __getitem__(self, client_id: str) -> EventSequence:
        return self._index()[client_id]

    def _index(self) -> dict[str, EventSequence]:
        idx = self.__dict__.get("_by_id")
        if idx is None:
            idx = {s.client_id: s for s in self.sequences}
            object.__setattr__(self, "_by_id", idx)
        return idx

    def with_split(self, tag: str) -> list[EventSequence]:
        return [s for s in self.sequences if self.splits[s.client_id] == tag]

    @property
    def labeled(self) -> list[EventSequence]:
        return [s for s in self.sequences if s.label is not None]

    def manifest(self) -> dict:
        tags = list(self.splits.values())
        return {
            "n_clients": len(self.sequences),
            "n_labeled": sum(s.label is not None for s in self.sequences),
            "n_unlabeled": tags.count(UNLABELED),
            "n_holdout": tags.count(HOLDOUT),
            "n_events": int(sum(len(s) for s in self.sequences)),
            "vocab_sizes": dict(self.vocab_sizes),
            "splits": dict(self.splits),
        }


def _parse_int(value: str, column: str, line: int) -> int:
    try:
        return int(value)
    except ValueError:
        try:
            f = float(value)
        except ValueError:
            raise DataError(f"line {line}: cannot parse {column}={value!r}") from None
        if not f.is_integer():
            raise DataError(f"line {line}: {column}={value!r} is not an integer")
        return int(f)


def load_dataset(path: str | Path, schema: dict[str, str] | None = None) -> Dataset:
    """Read a CSV of events into a Dataset.

    ``schema`` maps logical column names (client_id, timestamp, amount, mcc,
    tx_type, label) to header names in the file. Categorical columns holding
    non-negative integers are used as vocabulary indices directly; any other
    values are mapped to indices in sorted order.
    """
    schema = {c: c for c in (*REQUIRED_COLUMNS, "label")} | dict(schema or {})
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        pos = {name: i for i, name in enumerate(header)}
        for col in REQUIRED_COLUMNS:
            if schema[col] not in pos:
                raise SchemaError(f"{path}: missing column {schema[col]!r} (for {col})")
        label_pos = pos.get(schema["label"])
        rows = []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: line {line}: expected {len(header)} fields, got {len(row)}")
            get = lambda c: row[pos[schema[c]]].strip()  # noqa: E731
            try:
                amount = float(get("amount"))
            except ValueError:
                raise DataError(f"{path}: line {line}: cannot parse amount={get('amount')!r}") from None
            if math.isnan(amount):
                raise DataError(f"{path}: line {line}: NaN amount")
            ts = _parse_int(get("timestamp"), "timestamp", line)
            if ts < 0:
                raise DataError(f"{path}: line {line}: negative timestamp")
            label_raw = row[label_pos].strip() if label_pos is not None else ""
            label = _parse_int(label_raw, "label", line) if label_raw else None
            rows.append((get("client_id"), ts, amount, get("mcc"), get("tx_type"), label, line))
    if not rows:
        raise DataError(f"{path}: no data rows")

    vocab_sizes, mappings = {}, {}
    for k, name in ((3, "mcc"), (4, "tx_type")):
        raw = {r[k] for r in rows}
        if all(v.isdigit() for v in raw):
            mappings[name] = {v: int(v) for v in raw}
            vocab_sizes[name] = max(mappings[name].values()) + 1
        else:
            mappings[name] = {v: i for i, v in enumerate(sorted(raw))}
            vocab_sizes[name] = len(raw)

    grouped: dict[str, list] = {}
    labels: dict[str, int | None] = {}
    for cid, ts, amount, mcc, tx_type, label, line in rows:
        rec = EventRecord(ts, amount, mappings["mcc"][mcc], mappings["tx_type"][tx_type])
        grouped.setdefault(cid, []).append(rec)
        if cid in labels and labels[cid] != label:
            raise DataError(f"{path}: line {line}: conflicting label for client {cid}")
        labels[cid] = label
    sequences = tuple(EventSequence.from_records(cid, grouped[cid], labels[cid]) for cid in sorted(grouped))
    return Dataset(sequences=sequences, vocab_sizes=vocab_sizes)


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*REQUIRED_COLUMNS, "label"])
        for s in dataset.sequences:
            label = "" if s.label is None else str(s.label)
            for ev in s.iter_events():
                writer.writerow([s.client_id, ev.timestamp, repr(ev.amount), ev.mcc, ev.tx_type, label])


def write_manifest(dataset: Dataset, path: str | Path) -> None:
    Path(path).write_text(json.dumps(dataset.manifest(), indent=2, sort_keys=True) + "\n")


def apply_manifest(dataset: Dataset, path: str | Path) -> Dataset:
    """Restore split tags (and declared vocab sizes) saved by `write_manifest`."""
    manifest = json.loads(Path(path).read_text())
    vocab = {k: max(v, manifest["vocab_sizes"].get(k, 0)) for k, v in dataset.vocab_sizes.items()}
    return Dataset(sequences=dataset.sequences, vocab_sizes=vocab, splits=manifest["splits"])


def split_holdout(dataset: Dataset, holdout_frac: float, seed: int) -> Dataset:
    if not 0 < holdout_frac < 1:
        raise ValueError(f"holdout_frac must be in (0, 1), got {holdout_frac}")
    labeled = sorted(s.client_id for s in dataset.labeled)
    need = math.ceil(1 / holdout_frac)
    if len(labeled) < need:
        raise DataError(f"need at least {need} labeled clients for holdout_frac={holdout_frac}, have {len(labeled)}")
    n_hold = math.floor(holdout_frac * len(labeled))
    rng = np.random.default_rng(seed)
    chosen = {labeled[i] for i in rng.permutation(len(labeled))[:n_hold]}
    splits = {}
    for s in dataset.sequences:
        if s.label is None:
            splits[s.client_id] = UNLABELED
        else:
            splits[s.client_id] = HOLDOUT if s.client_id in chosen else TRAIN
    return Dataset(sequences=dataset.sequences, vocab_sizes=dataset.vocab_sizes, splits=splits)


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs of the planted-signal generator.

    Each client draws three favourite merchant categories that dominate its
    MCC distribution. With probability ``signal`` a client "expresses" its
    label: all of its categories come from the label's half of the MCC
    vocabulary. The label also shifts the client's mean log-amount by
    ``signal * amount_shift``.
    """

    n_mcc: int = 40
    n_tx_type: int = 4
    min_len: int = 20
    max_len: int = 120
    signal: float = 0.5
    n_favorites: int = 3
    favorite_mass: float = 0.8
    amount_shift: float = 0.5
    income_share: tuple[float, float] = (0.03, 0.2)
    rate_range: tuple[float, float] = (0.1, 3.0)
    unlabeled_frac: float = 0.0
    start_epoch: int = 1_577_836_800  # 2020-01-01T00:00:00Z

    def __post_init__(self):
        if not 0.0 <= self.signal <= 1.0:
            raise ValueError(f"signal strength must be in [0, 1], got {self.signal}")
        if self.n_mcc < 2 * self.n_favorites or self.n_mcc % 2:
            raise ValueError("n_mcc must be even and at least twice n_favorites")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")


def generate_synthetic(n_clients: int, seed: int, config: SyntheticConfig | None = None) -> Dataset:
    config = config or SyntheticConfig()
    if n_clients < 2:
        raise ValueError("n_clients must be >= 2")
    rng = np.random.default_rng(seed)
    half = config.n_mcc // 2
    width = len(str(n_clients - 1))
    sequences = []
    for i in range(n_clients):
        label = int(rng.integers(2))
        expresses = rng.random() < config.signal
        support = np.arange(half) + label * half if expresses else np.arange(config.n_mcc)

        favorites = rng.choice(support, size=config.n_favorites, replace=False)
        p = np.zeros(config.n_mcc)
        p[support] = (1 - config.favorite_mass) / len(support)
        p[favorites] += config.favorite_mass * rng.dirichlet(np.full(config.n_favorites, 4.0))
        type_p = rng.dirichlet(np.full(config.n_tx_type - 1, 2.0))

        n = int(rng.integers(config.min_len, config.max_len + 1))
        lo, hi = np.log(config.rate_range)
        rate = float(np.exp(rng.uniform(lo, hi)))
        gaps = rng.exponential(SECONDS_PER_DAY / rate, size=n)
        gaps[0] = rng.uniform(0, 365 * SECONDS_PER_DAY)
        timestamps = config.start_epoch + np.floor(np.cumsum(gaps)).astype(np.int64)

        mcc = rng.choice(config.n_mcc, size=n, p=p)
        income = rng.random(n) < rng.uniform(*config.income_share)
        tx_type = np.where(income, 0, 1 + rng.choice(config.n_tx_type - 1, size=n, p=type_p))
        log_mu = rng.normal(6.5, 0.6) + config.signal * config.amount_shift * (2 * label - 1)
        magnitude = np.maximum(1.0, np.round(np.exp(rng.normal(log_mu, 0.8, size=n))))
        magnitude[income] = np.maximum(1.0, np.round(np.exp(rng.normal(log_mu + 2.5, 0.4, size=income.sum()))))
        amounts = np.where(income, magnitude, -magnitude)

        sequences.append(
            EventSequence(
                client_id=f"c{i:0{width}d}",
                timestamps=timestamps,
                amounts=amounts.astype(np.float64),
                mcc=mcc.astype(np.int64),
                tx_type=tx_type.astype(np.int64),
                label=label,
            )
        )
    if config.unlabeled_frac > 0:
        n_unl = int(round(config.unlabeled_frac * n_clients))
        hide = set(rng.permutation(n_clients)[:n_unl].tolist())
        sequences = [replace(s, label=None) if i in hide else s for i, s in enumerate(sequences)]
    return Dataset(
        sequences=tuple(sequences),
        vocab_sizes={"mcc": config.n_mcc, "tx_type": config.n_tx_type},
    )


MCC_FAMILIES = ("groceries", "utilities", "pharmacy", "fuel", "travel", "restaurants", "electronics", "entertainment")


def synthetic_mcc_names(n_mcc: int) -> dict[int, str]:
    """Readable names for synthetic codes: consecutive codes share a family word.

    Families split along the same halves of the vocabulary as the planted
    label signal, the way real merchant categories carry meaning a language
    model can pick up on.
    """
    k = len(MCC_FAMILIES)
    return {i: f"{MCC_FAMILIES[i * k // n_mcc]} {i}" for i in range(n_mcc)}
