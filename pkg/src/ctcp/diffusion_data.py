"""Cascade ingestion, preprocessing, splitting and synthetic data.

Input files hold one cascade per line::

    cascade_id<TAB>root_user<TAB>publish_time<TAB>n_participants<TAB>path_1 path_2 ...

where each path is ``user_a/user_b/.../user_z:rel_time``. The participant is the
last user of the path and its source the second-to-last; a single-user path is
the root post itself and is skipped.
"""

from __future__ import annotations

import json
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

END_OF_DATA = "end-of-data"
MIN_OBSERVED = 10
MAX_OBSERVED = 100
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)


class DataError(ValueError):
    """Input data cannot be used."""


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None, field_name: str | None = None):
        self.line = line
        self.field_name = field_name
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field_name is not None:
            where.append(f"field '{field_name}'")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class EmptyDatasetError(DataError):
    pass


class ConfigError(ValueError):
    """Invalid combination of settings."""


Participant = tuple  # (source_user, target_user, relative_time)


@dataclass(frozen=True, order=True)
class DiffusionEvent:
    """User ``target_user`` joins ``cascade`` through ``source_user`` at ``time``."""

    time: float
    cascade: str
    target_user: str
    source_user: str

    def __post_init__(self):
        if not math.isfinite(self.time) or self.time < 0:
            raise DataError(f"event time must be finite and non-negative, got {self.time}")
        if self.source_user == self.target_user:
            raise DataError(f"self-loop event for user {self.source_user} in cascade {self.cascade}")

    @property
    def sort_key(self):
        return (self.time, self.cascade, self.target_user, self.source_user)


@dataclass
class RawCascade:
    cascade: str
    root_user: str
    publish_time: float
    declared_count: int
    participants: list[Participant] = field(default_factory=list)


@dataclass(frozen=True)
class CascadeRecord:
    cascade: str
    root_user: str
    publish_time: float
    participants: tuple[Participant, ...]
    observed_count: int
    label: int
    # post-window participants counted in ``label``; not part of the model input
    future: tuple[Participant, ...] = ()

    def sequence(self) -> list[tuple[str, float]]:
        """Participating users in order, the root first at relative time 0."""
        return [(self.root_user, 0.0)] + [(tgt, t) for _, tgt, t in self.participants]

    def edges(self) -> list[tuple[str, str]]:
        return [(src, tgt) for src, tgt, _ in self.participants]

    @property
    def last_event(self) -> Participant:
        return self.participants[-1]


@dataclass(frozen=True)
class PreprocessStats:
    total: int = 0
    retained: int = 0
    discarded_small: int = 0
    discarded_filter: int = 0
    discarded_invalid: int = 0
    truncated: int = 0

    @property
    def discarded(self) -> int:
        return self.discarded_small + self.discarded_filter + self.discarded_invalid

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "retained": self.retained,
            "discarded": self.discarded,
            "discarded_small": self.discarded_small,
            "discarded_filter": self.discarded_filter,
            "discarded_invalid": self.discarded_invalid,
            "truncated": self.truncated,
        }


@dataclass(frozen=True)
class DiffusionGraph:
    events: tuple[DiffusionEvent, ...]
    cascades: dict[str, CascadeRecord]
    users: tuple[str, ...]
    observation_window: float
    prediction_horizon: float | str = END_OF_DATA
    stats: PreprocessStats = PreprocessStats()

    @property
    def observation_deadlines(self) -> dict[str, float]:
        return {c: r.publish_time + self.observation_window for c, r in self.cascades.items()}

    @property
    def cascade_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.cascades))

    def replay(self, cascade: str) -> list[Participant]:
        """Rebuild a cascade's participant list from the global event stream."""
        rec = self.cascades[cascade]
        return [
            (e.source_user, e.target_user, e.time - rec.publish_time)
            for e in self.events
            if e.cascade == cascade
        ]


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]
    fractions: tuple[float, float, float] = SPLIT_FRACTIONS

    def __getitem__(self, name: str) -> tuple[str, ...]:
        if name not in ("train", "val", "test"):
            raise KeyError(name)
        return getattr(self, name)

    def as_map(self) -> dict[str, str]:
        out = {}
        for name in ("train", "val", "test"):
            for c in self[name]:
                out[c] = name
        return out


@dataclass(frozen=True)
class ParseConfig:
    column_sep: str = "\t"
    participant_sep: str = " "
    path_sep: str = "/"
    time_sep: str = ":"


def _parse_float(text: str, line: int, name: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"expected a number, got {text!r}", line, name) from None
    if not math.isfinite(value) or value < 0:
        raise ParseError(f"expected a finite non-negative number, got {text!r}", line, name)
    return value


def parse_line(text: str, line: int = 1, config: ParseConfig = ParseConfig()) -> RawCascade:
    cols = text.rstrip("\r\n").split(config.column_sep)
    if len(cols) not in (4, 5):
        raise ParseError(f"expected 5 tab-separated columns, got {len(cols)}", line)
    cascade, root = cols[0].strip(), cols[1].strip()
    if not cascade:
        raise ParseError("empty cascade id", line, "cascade_id")
    if not root:
        raise ParseError("empty root user", line, "root_user")
    publish = _parse_float(cols[2], line, "publish_time")
    try:
        declared = int(cols[3])
    except ValueError:
        raise ParseError(f"expected an integer, got {cols[3]!r}", line, "n_participants") from None
    if declared < 0:
        raise ParseError("negative participant count", line, "n_participants")

    participants = []
    paths = cols[4].split(config.participant_sep) if len(cols) == 5 else []
    for raw in paths:
        if not raw:
            continue
        path, sep, rel = raw.rpartition(config.time_sep)
        if not sep or not path:
            raise ParseError(f"malformed path {raw!r}", line, "paths")
        rel_time = _parse_float(rel, line, "paths")
        users = path.split(config.path_sep)
        if any(not u for u in users):
            raise ParseError(f"empty user in path {raw!r}", line, "paths")
        if len(users) == 1:
            continue
        src, tgt = users[-2], users[-1]
        if src == tgt:
            raise ParseError(f"self-loop in path {raw!r}", line, "paths")
        participants.append((src, tgt, rel_time))
    return RawCascade(cascade, root, publish, declared, participants)


def parse_cascade_file(path: str | os.PathLike, config: ParseConfig = ParseConfig()) -> list[RawCascade]:
    records = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            rec = parse_line(text, lineno, config)
            if rec.cascade in seen:
                raise ParseError(
                    f"duplicate cascade id {rec.cascade!r} (first seen on line {seen[rec.cascade]})",
                    lineno,
                    "cascade_id",
                )
            seen[rec.cascade] = lineno
            records.append(rec)
    return records


def _fmt_time(t: float) -> str:
    return str(int(t)) if float(t).is_integer() else repr(float(t))


def format_cascade_line(rec: RawCascade) -> str:
    parents: dict[str, str] = {}
    paths = []
    for src, tgt, rel in rec.participants:
        chain = [tgt, src]
        seen = {tgt, src}
        cur = src
        while cur != rec.root_user and cur in parents and parents[cur] not in seen:
            cur = parents[cur]
            chain.append(cur)
            seen.add(cur)
        parents.setdefault(tgt, src)
        paths.append("/".join(reversed(chain)) + ":" + _fmt_time(rel))
    cols = [rec.cascade, rec.root_user, _fmt_time(rec.publish_time), str(rec.declared_count), " ".join(paths)]
    return "\t".join(cols)


def write_cascade_file(records: Iterable[RawCascade], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(format_cascade_line(rec) + "\n")


def _rooted_dag(root: str, edges: Sequence[tuple[str, str]]) -> bool:
    """True when ``edges`` form an acyclic graph where every node is reachable from ``root``."""
    children = defaultdict(set)
    indeg: dict[str, int] = {root: 0}
    for src, tgt in set(edges):
        children[src].add(tgt)
        indeg.setdefault(src, 0)
        indeg[tgt] = indeg.get(tgt, 0) + 1
    if indeg[root] != 0:
        return False
    if any(n != root and d == 0 for n, d in indeg.items()):
        return False
    queue = [root]
    visited = 0
    while queue:
        node = queue.pop()
        visited += 1
        for child in children[node]:
            indeg[child] -= 1
            if indeg[child] == 0:
                queue.append(child)
    return visited == len(indeg)


def preprocess(
    records: Iterable[RawCascade],
    t_o: float,
    t_p: float | str = END_OF_DATA,
    publish_filter: tuple[float, float] | None = None,
) -> DiffusionGraph:
    """Apply the observation window, size filters, truncation and labelling.

    ``publish_filter`` is a half-open ``[start, end)`` interval on absolute
    publish time. Cascades whose observed graph is not a rooted DAG are
    discarded and counted as invalid.
    """
    if not t_o > 0:
        raise ConfigError(f"observation window must be positive, got {t_o}")
    if t_p != END_OF_DATA:
        t_p = float(t_p)
        if t_p <= t_o:
            raise ConfigError(f"prediction horizon {t_p} must exceed observation window {t_o}")
    horizon = math.inf if t_p == END_OF_DATA else t_p

    counts = defaultdict(int)
    cascades: dict[str, CascadeRecord] = {}
    for raw in records:
        counts["total"] += 1
        if publish_filter is not None and not (publish_filter[0] <= raw.publish_time < publish_filter[1]):
            counts["discarded_filter"] += 1
            continue
        # same order as the global event stream: time, then target, then source
        ordered = sorted(raw.participants, key=lambda p: (p[2], p[1], p[0]))
        observed = [p for p in ordered if p[2] < t_o]
        future = tuple(p for p in ordered if t_o <= p[2] < horizon)
        if len(observed) < MIN_OBSERVED:
            counts["discarded_small"] += 1
            continue
        if len(observed) > MAX_OBSERVED:
            observed = observed[:MAX_OBSERVED]
            counts["truncated"] += 1
        if not _rooted_dag(raw.root_user, [(s, t) for s, t, _ in observed]):
            counts["discarded_invalid"] += 1
            continue
        cascades[raw.cascade] = CascadeRecord(
            cascade=raw.cascade,
            root_user=raw.root_user,
            publish_time=float(raw.publish_time),
            participants=tuple((s, t, float(r)) for s, t, r in observed),
            observed_count=len(observed),
            label=len(future),
            future=future,
        )
    counts["retained"] = len(cascades)
    if not cascades:
        raise EmptyDatasetError("no cascades left after preprocessing")

    events = []
    users = set()
    for rec in cascades.values():
        users.add(rec.root_user)
        for src, tgt, rel in rec.participants:
            events.append(DiffusionEvent(rec.publish_time + rel, rec.cascade, tgt, src))
            users.update((src, tgt))
    events.sort(key=lambda e: e.sort_key)
    return DiffusionGraph(
        events=tuple(events),
        cascades=dict(sorted(cascades.items())),
        users=tuple(sorted(users)),
        observation_window=float(t_o),
        prediction_horizon=t_p,
        stats=PreprocessStats(**counts),
    )


def to_raw_records(graph: DiffusionGraph) -> list[RawCascade]:
    out = []
    for rec in graph.cascades.values():
        parts = list(rec.participants) + list(rec.future)
        out.append(RawCascade(rec.cascade, rec.root_user, rec.publish_time, len(parts), parts))
    return out


def split(graph: DiffusionGraph, seed: int) -> DatasetSplit:
    ids = list(graph.cascade_ids)
    n = len(ids)
    if n < 3:
        raise DataError(f"need at least 3 cascades to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(SPLIT_FRACTIONS[0] * n))
    n_val = int(math.floor(SPLIT_FRACTIONS[1] * n))
    shuffled = [ids[i] for i in order]
    return DatasetSplit(
        train=tuple(shuffled[:n_train]),
        val=tuple(shuffled[n_train:n_train + n_val]),
        test=tuple(shuffled[n_train + n_val:]),
    )


INFLUENCER_FRACTION = 0.05


def generate_synthetic(
    n_cascades: int,
    n_users: int,
    seed: int,
    popularity_mode: str = "random",
    observation_window: float = 86400.0,
    time_span: float = 10 * 86400.0,
    min_size: int = 10,
    max_size: int = 30,
    high_log_mean: float = 5.0,
    low_log_mean: float = 1.5,
    log_sd: float = 0.4,
) -> list[RawCascade]:
    """Seeded random cascades in the canonical raw format.

    In ``"popular-user-signal"`` mode a cascade whose observed users (root
    included) contain one of the designated influencers draws its incremental
    popularity around ``2**high_log_mean``, every other cascade around
    ``2**low_log_mean``. In ``"random"`` mode the same two regimes are picked by
    a coin flip independent of who participates. Cascade size, shape and
    publication time never depend on the label regime.
    """
    if popularity_mode not in ("random", "popular-user-signal"):
        raise ValueError(f"unknown popularity mode {popularity_mode!r}")
    if n_cascades < 1:
        raise ValueError("n_cascades must be >= 1")
    if n_users < 10:
        raise ValueError("n_users must be >= 10")
    if not 1 <= min_size <= max_size:
        raise ValueError("need 1 <= min_size <= max_size")

    rng = np.random.default_rng(seed)
    n_inf = max(1, int(round(INFLUENCER_FRACTION * n_users)))
    influencers = set(int(i) for i in rng.choice(n_users, size=n_inf, replace=False))
    width = len(str(n_cascades - 1))
    records = []
    for k in range(n_cascades):
        publish = float(np.floor(rng.uniform(0, time_span)))
        size = int(rng.integers(min_size, max_size + 1))
        size = min(size, n_users - 1)
        members = [int(m) for m in rng.choice(n_users, size=size + 1, replace=False)]
        rel = np.sort(np.floor(rng.uniform(0, observation_window, size=size)))
        nodes = [members[0]]
        parts = []
        for i in range(size):
            parent = members[0] if rng.random() < 0.5 else nodes[int(rng.integers(len(nodes)))]
            parts.append((f"u{parent}", f"u{members[i + 1]}", float(rel[i])))
            nodes.append(members[i + 1])

        if popularity_mode == "popular-user-signal":
            high = any(m in influencers for m in members)
        else:
            high = bool(rng.random() < 0.5)
        mu = high_log_mean if high else low_log_mean
        label = max(0, int(round(2.0 ** rng.normal(mu, log_sd) - 1)))
        future_rel = np.sort(np.floor(rng.uniform(observation_window, 2 * observation_window, size=label)))
        future_users = rng.integers(n_users, size=label)
        for t, fu in zip(future_rel, future_users):
            parent = nodes[int(rng.integers(len(nodes)))]
            if int(fu) == parent:
                fu = (int(fu) + 1) % n_users
            parts.append((f"u{parent}", f"u{int(fu)}", float(t)))
        records.append(RawCascade(f"c{k:0{width}d}", f"u{members[0]}", publish, len(parts), parts))
    return records


def influencer_users(n_users: int, seed: int) -> set[str]:
    """The influencer set ``generate_synthetic`` designates for ``(n_users, seed)``."""
    rng = np.random.default_rng(seed)
    n_inf = max(1, int(round(INFLUENCER_FRACTION * n_users)))
    return {f"u{int(i)}" for i in rng.choice(n_users, size=n_inf, replace=False)}


# processed dataset on disk: events.tsv, labels.tsv, split.tsv, meta.json
EVENTS_FILE = "events.tsv"
LABELS_FILE = "labels.tsv"
SPLIT_FILE = "split.tsv"
META_FILE = "meta.json"


def write_processed(graph: DiffusionGraph, dsplit: DatasetSplit, out_dir: str | os.PathLike, seed: int | None = None) -> list[Path]:
    """Write the processed dataset.

    events.tsv: source_user, target_user, cascade, time (one event per line,
    canonical order). labels.tsv: cascade, root_user, publish_time,
    observed_count, label. split.tsv: cascade, split name.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / EVENTS_FILE, out / LABELS_FILE, out / SPLIT_FILE, out / META_FILE]
    with open(paths[0], "w", encoding="utf-8", newline="\n") as fh:
        for e in graph.events:
            fh.write(f"{e.source_user}\t{e.target_user}\t{e.cascade}\t{_fmt_time(e.time)}\n")
    with open(paths[1], "w", encoding="utf-8", newline="\n") as fh:
        for rec in graph.cascades.values():
            fh.write(f"{rec.cascade}\t{rec.root_user}\t{_fmt_time(rec.publish_time)}\t{rec.observed_count}\t{rec.label}\n")
    with open(paths[2], "w", encoding="utf-8", newline="\n") as fh:
        for name in ("train", "val", "test"):
            for c in dsplit[name]:
                fh.write(f"{c}\t{name}\n")
    meta = {
        "observation_window": graph.observation_window,
        "prediction_horizon": graph.prediction_horizon,
        "n_cascades": len(graph.cascades),
        "n_users": len(graph.users),
        "n_events": len(graph.events),
        "split_seed": seed,
        "split_sizes": {k: len(dsplit[k]) for k in ("train", "val", "test")},
        "stats": graph.stats.as_dict(),
    }
    with open(paths[3], "w", encoding="utf-8", newline="\n") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths


def load_processed(data_dir: str | os.PathLike) -> tuple[DiffusionGraph, DatasetSplit]:
    base = Path(data_dir)
    for name in (EVENTS_FILE, LABELS_FILE, SPLIT_FILE, META_FILE):
        if not (base / name).is_file():
            raise DataError(f"missing {name} in {base}")
    with open(base / META_FILE, encoding="utf-8") as fh:
        meta = json.load(fh)

    labels = {}
    with open(base / LABELS_FILE, encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, start=1):
            cols = text.rstrip("\n").split("\t")
            if len(cols) != 5:
                raise ParseError("expected 5 columns", lineno, LABELS_FILE)
            labels[cols[0]] = (cols[1], float(cols[2]), int(cols[3]), int(cols[4]))

    events = []
    parts = defaultdict(list)
    with open(base / EVENTS_FILE, encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, start=1):
            cols = text.rstrip("\n").split("\t")
            if len(cols) != 4:
                raise ParseError("expected 4 columns", lineno, EVENTS_FILE)
            src, tgt, c, t = cols
            if c not in labels:
                raise ParseError(f"unknown cascade {c!r}", lineno, EVENTS_FILE)
            ev = DiffusionEvent(float(t), c, tgt, src)
            events.append(ev)
            parts[c].append((src, tgt, ev.time - labels[c][1]))

    cascades = {}
    users = set()
    for c, (root, publish, observed, label) in labels.items():
        if len(parts[c]) != observed:
            raise DataError(f"cascade {c}: {len(parts[c])} events but observed_count {observed}")
        cascades[c] = CascadeRecord(c, root, publish, tuple(parts[c]), observed, label)
        users.add(root)
        for s, t, _ in parts[c]:
            users.update((s, t))

    groups = {"train": [], "val": [], "test": []}
    with open(base / SPLIT_FILE, encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, start=1):
            cols = text.rstrip("\n").split("\t")
            if len(cols) != 2 or cols[1] not in groups:
                raise ParseError("expected 'cascade<TAB>train|val|test'", lineno, SPLIT_FILE)
            groups[cols[1]].append(cols[0])

    graph = DiffusionGraph(
        events=tuple(events),
        cascades=dict(sorted(cascades.items())),
        users=tuple(sorted(users)),
        observation_window=float(meta["observation_window"]),
        prediction_horizon=meta.get("prediction_horizon", END_OF_DATA),
        stats=PreprocessStats(**{k: v for k, v in meta.get("stats", {}).items() if k != "discarded"}),
    )
    return graph, DatasetSplit(tuple(groups["train"]), tuple(groups["val"]), tuple(groups["test"]))
