"""Interaction logs, k-core filtering, temporal split and LOO validation."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

DAY = 86400


class IngestError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass
class FormatDescriptor:
    user_col: str = "user_id"
    item_col: str = "item_id"
    timestamp_col: str = "timestamp"
    timestamp_format: str = "unix_seconds"  # or "iso8601"
    delimiter: str = ","


@dataclass
class InteractionLog:
    """Parallel arrays of internal ids plus the external id maps.

    ``user_map[i]`` is the external id of internal user ``i``; same for items.
    """

    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    user_map: list[str] = field(default_factory=list)
    item_map: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.users)

    @property
    def n_users(self) -> int:
        return len(self.user_map)

    @property
    def n_items(self) -> int:
        return len(self.item_map)

    def user_index(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.user_map)}

    def item_index(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.item_map)}

    def records(self) -> list[tuple[int, int, int]]:
        return list(zip(self.users.tolist(), self.items.tolist(), self.timestamps.tolist()))

    def subset(self, keep: np.ndarray) -> "InteractionLog":
        """Row subset that keeps the current id maps."""
        return InteractionLog(self.users[keep], self.items[keep], self.timestamps[keep],
                              list(self.user_map), list(self.item_map))

    def sequences(self) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        """Per-user (items, timestamps) sorted by time; ties keep input order."""
        order = np.lexsort((np.arange(len(self)), self.timestamps, self.users))
        users = self.users[order]
        starts = np.flatnonzero(np.r_[True, users[1:] != users[:-1]])
        ends = np.r_[starts[1:], len(users)]
        out = {}
        for s, e in zip(starts, ends):
            rows = order[s:e]
            out[int(users[s])] = (self.items[rows], self.timestamps[rows])
        return out


def from_records(records) -> InteractionLog:
    """Build a log from (user, item, timestamp) tuples of external ids."""
    users, items, stamps = [], [], []
    umap: dict = {}
    imap: dict = {}
    for u, i, t in records:
        users.append(umap.setdefault(str(u), len(umap)))
        items.append(imap.setdefault(str(i), len(imap)))
        stamps.append(int(t))
    return InteractionLog(np.array(users, dtype=np.int64), np.array(items, dtype=np.int64),
                          np.array(stamps, dtype=np.int64), list(umap), list(imap))


def _parse_timestamp(raw: str, fmt: str) -> int:
    if fmt == "unix_seconds":
        return int(float(raw))
    if fmt == "iso8601":
        dt = datetime.fromisoformat(raw.replace("Z", "+00:00"))
        if dt.tzinfo is None:
            dt = dt.replace(tzinfo=timezone.utc)
        return int(dt.timestamp())
    raise IngestError(f"unknown timestamp format {fmt!r}")


def ingest(path, fmt: FormatDescriptor | None = None) -> InteractionLog:
    fmt = fmt or FormatDescriptor()
    path = Path(path)
    if not path.exists():
        raise IngestError(f"{path}: file not found")
    records = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=fmt.delimiter)
        header = next(reader, None)
        if header is None:
            raise IngestError(f"{path}: no interactions")
        header = [h.strip() for h in header]
        cols = []
        for name in (fmt.user_col, fmt.item_col, fmt.timestamp_col):
            if name not in header:
                raise IngestError(f"{path}:1: missing column {name!r} (header: {header})")
            cols.append(header.index(name))
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                u, i, t = (row[c].strip() for c in cols)
            except IndexError:
                raise IngestError(f"{path}:{lineno}: too few fields") from None
            try:
                ts = _parse_timestamp(t, fmt.timestamp_format)
            except ValueError:
                raise IngestError(f"{path}:{lineno}: unparsable timestamp {t!r}") from None
            if ts < 0:
                raise IngestError(f"{path}:{lineno}: negative timestamp {ts}")
            records.append((u, i, ts))
    if not records:
        raise IngestError(f"{path}: no interactions")
    return from_records(records)


def _compact(log: InteractionLog, keep: np.ndarray) -> InteractionLog:
    """Keep rows and renumber ids contiguously in first-appearance order."""
    users, items, ts = log.users[keep], log.items[keep], log.timestamps[keep]
    u_old, u_first = np.unique(users, return_index=True)
    i_old, i_first = np.unique(items, return_index=True)
    u_order = u_old[np.argsort(u_first, kind="stable")]
    i_order = i_old[np.argsort(i_first, kind="stable")]
    u_new = np.empty(log.n_users, dtype=np.int64)
    u_new[u_order] = np.arange(len(u_order))
    i_new = np.empty(log.n_items, dtype=np.int64)
    i_new[i_order] = np.arange(len(i_order))
    return InteractionLog(u_new[users], i_new[items], ts,
                          [log.user_map[u] for u in u_order],
                          [log.item_map[i] for i in i_order])


def core_filter(log: InteractionLog, user_core: int = 2, item_core: int = 5) -> InteractionLog:
    """Iterate item then user thresholds until neither removes anything."""
    if user_core < 1 or item_core < 1:
        raise ValueError("core thresholds must be >= 1")
    keep = np.ones(len(log), dtype=bool)
    while True:
        item_counts = np.bincount(log.items[keep], minlength=log.n_items)
        drop_items = keep & (item_counts[log.items] < item_core)
        keep &= ~drop_items
        user_counts = np.bincount(log.users[keep], minlength=log.n_users)
        drop_users = keep & (user_counts[log.users] < user_core)
        keep &= ~drop_users
        if not drop_items.any() and not drop_users.any():
            break
    if not keep.any():
        raise SplitError("filtering removed all data")
    return _compact(log, keep)


def tail_share(log: InteractionLog, window_days: int) -> float:
    boundary = log.timestamps.max() - window_days * DAY
    return float(np.mean(log.timestamps >= boundary))


def select_window(log: InteractionLog, options=(14, 30, 60), target_fraction: float = 0.05) -> int:
    """Window whose raw tail share is closest to the target; ties go to the smaller window."""
    if len(log) == 0:
        raise SplitError("empty log")
    best = None
    for days in sorted(options):
        gap = abs(tail_share(log, days) - target_fraction)
        if best is None or gap < best[0]:
            best = (gap, days)
    return best[1]


@dataclass
class SplitResult:
    train: InteractionLog
    test: InteractionLog
    boundary: int
    window_days: int

    def manifest(self) -> dict:
        return {
            "boundary": int(self.boundary),
            "window_days": int(self.window_days),
            "counts": {
                "train_interactions": len(self.train),
                "test_interactions": len(self.test),
                "train_users": int(len(np.unique(self.train.users))),
                "train_items": self.train.n_items,
                "test_users": int(len(np.unique(self.test.users))),
            },
        }


def temporal_split(log: InteractionLog, window_days: int) -> SplitResult:
    """Global time split; test rows with users/items unseen in train are dropped.

    Train ids are renumbered contiguously; test rows are expressed in train ids.
    """
    boundary = int(log.timestamps.max()) - window_days * DAY
    is_train = log.timestamps < boundary
    if not is_train.any():
        raise SplitError("empty train set: window covers the whole log")
    train = _compact(log, is_train)
    u_lookup = train.user_index()
    i_lookup = train.item_index()
    test_rows = np.flatnonzero(~is_train)
    tu, ti, tt = [], [], []
    for r in test_rows:
        u = u_lookup.get(log.user_map[log.users[r]])
        i = i_lookup.get(log.item_map[log.items[r]])
        if u is None or i is None:
            continue
        tu.append(u)
        ti.append(i)
        tt.append(log.timestamps[r])
    if not tu:
        raise SplitError("empty test set after filtering unseen users/items")
    test = InteractionLog(np.array(tu), np.array(ti), np.array(tt),
                          list(train.user_map), list(train.item_map))
    return SplitResult(train, test, boundary, window_days)


@dataclass
class ValidationFold:
    holdout: dict[int, tuple[int, int]]  # user -> (item, timestamp)
    reduced_train: InteractionLog


def loo_validation(train: InteractionLog) -> ValidationFold:
    """Hold out each user's latest interaction (last in input order on ties)."""
    n = len(train)
    # lexsort puts the last-in-input-order row of each user's max timestamp at the end
    order = np.lexsort((np.arange(n), train.timestamps, train.users))
    users = train.users[order]
    last = np.r_[users[1:] != users[:-1], True]
    counts = np.bincount(users, minlength=train.n_users)
    holdout = {}
    drop = np.zeros(n, dtype=bool)
    for pos in np.flatnonzero(last):
        row = order[pos]
        u = int(train.users[row])
        if counts[u] < 2:
            continue
        holdout[u] = (int(train.items[row]), int(train.timestamps[row]))
        drop[row] = True
    return ValidationFold(holdout, train.subset(~drop))


def write_log_csv(log: InteractionLog, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "item_id", "timestamp"])
        for u, i, t in zip(log.users.tolist(), log.items.tolist(), log.timestamps.tolist()):
            w.writerow([u, i, t])


def read_internal_csv(path, user_map: list[str], item_map: list[str]) -> InteractionLog:
    arr = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    return InteractionLog(arr[:, 0], arr[:, 1], arr[:, 2], list(user_map), list(item_map))


def save_split(split: SplitResult, directory, extra: dict | None = None) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_log_csv(split.train, directory / "train.csv")
    write_log_csv(split.test, directory / "test.csv")
    (directory / "id_maps.json").write_text(json.dumps(
        {"users": split.train.user_map, "items": split.train.item_map}))
    manifest = split.manifest()
    manifest.update(extra or {})
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_split(directory) -> tuple[SplitResult, dict]:
    directory = Path(directory)
    maps = json.loads((directory / "id_maps.json").read_text())
    manifest = json.loads((directory / "manifest.json").read_text())
    train = read_internal_csv(directory / "train.csv", maps["users"], maps["items"])
    test = read_internal_csv(directory / "test.csv", maps["users"], maps["items"])
    return SplitResult(train, test, manifest["boundary"], manifest["window_days"]), manifest
