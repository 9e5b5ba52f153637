"""Dynamic states of users and cascades, updated event by event.

Every diffusion event ``(u, v, c, t)`` touches exactly three states: the
originator state of ``u``, the receiver state of ``v`` and the state of
cascade ``c``. Each gets a message computed from the three pre-event states
plus a cosine encoding of its own elapsed time, and is then fused with the
old state by a gated recurrent cell.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .diffusion_data import DataError, DiffusionEvent

ROLES = ("originator", "receiver", "cascade")
STATE_FILE = "states.pt"
STATE_MANIFEST = "states.json"


def default_frequencies(n_f: int) -> np.ndarray:
    """Geometric frequencies 1, 10^-a, 10^-2a, ... spanning nine decades."""
    if n_f < 1:
        raise ValueError("n_f must be >= 1")
    alpha = 9.0 / (n_f - 1) if n_f > 1 else 0.0
    return 1.0 / 10.0 ** (np.arange(n_f) * alpha)


def encode_time(delta_t, frequencies) -> Tensor:
    """``cos(w_i * delta_t)`` for every frequency; works on scalars or 1-d batches."""
    frequencies = torch.as_tensor(frequencies)
    delta_t = torch.as_tensor(delta_t, dtype=frequencies.dtype)
    if bool((delta_t < 0).any()):
        raise ValueError("time deltas must be non-negative")
    return torch.cos(delta_t.unsqueeze(-1) * frequencies)


class TimeEncoder(nn.Module):
    def __init__(self, n_f: int = 16):
        super().__init__()
        self.frequencies = nn.Parameter(torch.tensor(default_frequencies(n_f), dtype=torch.get_default_dtype()))

    @property
    def dim(self) -> int:
        return self.frequencies.numel()

    def forward(self, delta_t: Tensor) -> Tensor:
        return encode_time(delta_t, self.frequencies)


class MessageEncoder(nn.Module):
    """sigmoid(W [s_o(u) || s_r(v) || s_c || f_t] + b) for one role."""

    def __init__(self, d: int, n_f: int):
        super().__init__()
        self.d = d
        self.linear = nn.Linear(3 * d + n_f, d)

    def forward(self, s_orig: Tensor, s_recv: Tensor, s_casc: Tensor, time_feat: Tensor) -> Tensor:
        return torch.sigmoid(self.linear(torch.cat([s_orig, s_recv, s_casc, time_feat], dim=-1)))


class StateUpdater(nn.Module):
    r"""Gated fusion of an old state with a message.

    .. math::
        g_i = \sigma(W_{is} s + W_{im} m + b_i) \\
        g_f = \sigma(W_{fs} s + W_{fm} m + b_f) \\
        \hat s = \tanh(W_m m + g_i \odot (W_s s + b_s) + b) \\
        s' = g_f \odot \hat s + (1 - g_f) \odot s
    """

    def __init__(self, d: int):
        super().__init__()
        self.d = d
        for name in ("weight_is", "weight_im", "weight_fs", "weight_fm", "weight_m", "weight_s"):
            self.register_parameter(name, nn.Parameter(torch.empty(d, d)))
        for name in ("bias_i", "bias_f", "bias_s", "bias"):
            self.register_parameter(name, nn.Parameter(torch.empty(d)))
        self.reset_parameters()

    def reset_parameters(self):
        bound = 1.0 / math.sqrt(self.d)
        for p in self.parameters():
            nn.init.uniform_(p, -bound, bound)

    def forward(self, state: Tensor, message: Tensor) -> Tensor:
        g_i = torch.sigmoid(state @ self.weight_is.T + message @ self.weight_im.T + self.bias_i)
        g_f = torch.sigmoid(state @ self.weight_fs.T + message @ self.weight_fm.T + self.bias_f)
        cand = torch.tanh(message @ self.weight_m.T + g_i * (state @ self.weight_s.T + self.bias_s) + self.bias)
        return g_f * cand + (1 - g_f) * state


class EvolutionModule(nn.Module):
    """Per-role time encoders, message encoders and state updaters."""

    def __init__(self, d: int = 64, n_f: int = 16):
        super().__init__()
        self.d = d
        self.n_f = n_f
        self.time_encoders = nn.ModuleDict({r: TimeEncoder(n_f) for r in ROLES})
        self.message_encoders = nn.ModuleDict({r: MessageEncoder(d, n_f) for r in ROLES})
        self.updaters = nn.ModuleDict({r: StateUpdater(d) for r in ROLES})

    def messages(self, s_o: Tensor, s_r: Tensor, s_c: Tensor, dts: Sequence[Tensor]) -> list[Tensor]:
        return [
            self.message_encoders[role](s_o, s_r, s_c, self.time_encoders[role](dt))
            for role, dt in zip(ROLES, dts)
        ]

    def fused(self) -> "FusedEvolution":
        return FusedEvolution(self)

    def step(self, s_o: Tensor, s_r: Tensor, s_c: Tensor, dts: Sequence[Tensor]) -> tuple[Tensor, Tensor, Tensor]:
        m_o, m_r, m_c = self.messages(s_o, s_r, s_c, dts)
        return (
            self.updaters["originator"](s_o, m_o),
            self.updaters["receiver"](s_r, m_r),
            self.updaters["cascade"](s_c, m_c),
        )


class FusedEvolution:
    """The three roles' parameters stacked once so a wave costs a few batched matmuls.

    Build a fresh instance after every optimizer step.
    """

    def __init__(self, evo: EvolutionModule):
        enc = [evo.message_encoders[r].linear for r in ROLES]
        upd = [evo.updaters[r] for r in ROLES]
        self.freq = torch.stack([evo.time_encoders[r].frequencies for r in ROLES]).unsqueeze(1)
        self.msg_w = torch.stack([e.weight.T for e in enc])
        self.msg_b = torch.stack([e.bias for e in enc]).unsqueeze(1)
        self.state_w = torch.stack([torch.cat([p.weight_is, p.weight_fs, p.weight_s]).T for p in upd])
        self.mess_w = torch.stack([torch.cat([p.weight_im, p.weight_fm, p.weight_m]).T for p in upd])
        self.b_i = torch.stack([p.bias_i for p in upd]).unsqueeze(1)
        self.b_f = torch.stack([p.bias_f for p in upd]).unsqueeze(1)
        self.b_s = torch.stack([p.bias_s for p in upd]).unsqueeze(1)
        self.b = torch.stack([p.bias for p in upd]).unsqueeze(1)
        self.d = evo.d

    def __call__(self, olds: Sequence[Tensor], dts: Sequence[Tensor]) -> list[Tensor]:
        s_o, s_r, s_c = olds
        b = s_o.shape[0]
        feats = torch.cos(torch.stack(list(dts)).unsqueeze(-1) * self.freq)
        shared = torch.cat([s_o, s_r, s_c], dim=-1).expand(3, b, 3 * self.d)
        msg = torch.sigmoid(torch.baddbmm(self.msg_b, torch.cat([shared, feats], dim=-1), self.msg_w))
        state = torch.stack(list(olds))
        si, sf, ss = torch.bmm(state, self.state_w).split(self.d, dim=-1)
        mi, mf, mm = torch.bmm(msg, self.mess_w).split(self.d, dim=-1)
        g_i = torch.sigmoid(si + mi + self.b_i)
        g_f = torch.sigmoid(sf + mf + self.b_f)
        cand = torch.tanh(mm + g_i * (ss + self.b_s) + self.b)
        return list((g_f * cand + (1 - g_f) * state).unbind(0))


@dataclass
class DynamicStateStore:
    """Originator/receiver states per user and one state per cascade.

    Tables are replaced, never written in place, so tensors handed out earlier
    stay valid and autograd can track updates. ``last_update`` holds NaN for
    entities that have not been touched yet.
    """

    user_index: dict[str, int]
    cascade_index: dict[str, int]
    originator: Tensor
    receiver: Tensor
    cascade: Tensor
    last_update: dict[str, np.ndarray] = field(default_factory=dict)
    cursor: int = 0
    clock: float = -math.inf

    @classmethod
    def zeros(cls, users: Sequence[str], cascades: Sequence[str], d: int, dtype=None) -> "DynamicStateStore":
        dtype = dtype or torch.get_default_dtype()
        n_u, n_c = len(users), len(cascades)
        return cls(
            user_index={u: i for i, u in enumerate(users)},
            cascade_index={c: i for i, c in enumerate(cascades)},
            originator=torch.zeros(n_u, d, dtype=dtype),
            receiver=torch.zeros(n_u, d, dtype=dtype),
            cascade=torch.zeros(n_c, d, dtype=dtype),
            last_update={
                "originator": np.full(n_u, np.nan),
                "receiver": np.full(n_u, np.nan),
                "cascade": np.full(n_c, np.nan),
            },
        )

    @property
    def dim(self) -> int:
        return self.originator.shape[1]

    def table(self, role: str) -> Tensor:
        return getattr(self, role)

    def state(self, role: str, entity: str) -> Tensor:
        index = self.cascade_index if role == "cascade" else self.user_index
        return self.table(role)[index[entity]]

    def delta_t(self, role: str, idx, t) -> np.ndarray:
        last = self.last_update[role][idx]
        return np.where(np.isnan(last), 0.0, t - np.nan_to_num(last, nan=0.0))

    def copy(self) -> "DynamicStateStore":
        return DynamicStateStore(
            self.user_index,
            self.cascade_index,
            self.originator,
            self.receiver,
            self.cascade,
            {k: v.copy() for k, v in self.last_update.items()},
            self.cursor,
            self.clock,
        )

    def detach(self) -> "DynamicStateStore":
        out = self.copy()
        out.originator = self.originator.detach()
        out.receiver = self.receiver.detach()
        out.cascade = self.cascade.detach()
        return out

    def encode(self, events: Sequence[DiffusionEvent]):
        """Integer arrays ``(u, v, c, t)`` for a list of events."""
        try:
            u = np.array([self.user_index[e.source_user] for e in events], dtype=np.int64)
            v = np.array([self.user_index[e.target_user] for e in events], dtype=np.int64)
            c = np.array([self.cascade_index[e.cascade] for e in events], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"event references unknown entity {exc.args[0]!r}") from None
        t = np.array([e.time for e in events], dtype=np.float64)
        return u, v, c, t

    def save(self, out_dir: str | os.PathLike) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        users = sorted(self.user_index, key=self.user_index.get)
        cascades = sorted(self.cascade_index, key=self.cascade_index.get)
        torch.save(
            {
                "originator": self.originator.detach(),
                "receiver": self.receiver.detach(),
                "cascade": self.cascade.detach(),
                "last_update": {k: torch.from_numpy(v) for k, v in self.last_update.items()},
                "users": users,
                "cascades": cascades,
            },
            out / STATE_FILE,
        )
        manifest = {
            "dim": self.dim,
            "n_users": len(users),
            "n_cascades": len(cascades),
            "cursor": self.cursor,
            "clock": None if math.isinf(self.clock) else self.clock,
        }
        with open(out / STATE_MANIFEST, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return [out / STATE_FILE, out / STATE_MANIFEST]

    @classmethod
    def load(cls, in_dir: str | os.PathLike) -> "DynamicStateStore":
        src = Path(in_dir)
        blob = torch.load(src / STATE_FILE, weights_only=False)
        with open(src / STATE_MANIFEST, encoding="utf-8") as fh:
            manifest = json.load(fh)
        clock = manifest["clock"]
        return cls(
            user_index={u: i for i, u in enumerate(blob["users"])},
            cascade_index={c: i for i, c in enumerate(blob["cascades"])},
            originator=blob["originator"],
            receiver=blob["receiver"],
            cascade=blob["cascade"],
            last_update={k: v.numpy().copy() for k, v in blob["last_update"].items()},
            cursor=manifest["cursor"],
            clock=-math.inf if clock is None else clock,
        )


def _dts(store: DynamicStateStore, ui, vi, ci, t, dtype) -> list[Tensor]:
    return [
        torch.as_tensor(store.delta_t(role, idx, t), dtype=dtype)
        for role, idx in zip(ROLES, (ui, vi, ci))
    ]


def compute_messages(event: DiffusionEvent, store: DynamicStateStore, evolution: EvolutionModule):
    """Messages ``(m_u, m_v, m_c)`` for one event against the pre-event store."""
    if store.dim != evolution.d:
        raise ValueError(f"store dimension {store.dim} != model dimension {evolution.d}")
    ui = store.user_index[event.source_user]
    vi = store.user_index[event.target_user]
    ci = store.cascade_index[event.cascade]
    dts = _dts(store, ui, vi, ci, event.time, store.originator.dtype)
    for role, dt in zip(ROLES, dts):
        if dt.item() < 0:
            raise DataError(f"event at {event.time} precedes last {role} update")
    s_o, s_r, s_c = store.originator[ui], store.receiver[vi], store.cascade[ci]
    return tuple(evolution.messages(s_o, s_r, s_c, dts))


def update_states(event: DiffusionEvent, store: DynamicStateStore, messages, evolution: EvolutionModule) -> DynamicStateStore:
    """Fuse the three messages into a new store; other entities are untouched."""
    m_o, m_r, m_c = messages
    ui = store.user_index[event.source_user]
    vi = store.user_index[event.target_user]
    ci = store.cascade_index[event.cascade]
    out = store.copy()
    new_o = evolution.updaters["originator"](store.originator[ui], m_o)
    new_r = evolution.updaters["receiver"](store.receiver[vi], m_r)
    new_c = evolution.updaters["cascade"](store.cascade[ci], m_c)
    out.originator = store.originator.index_copy(0, torch.tensor([ui]), new_o.unsqueeze(0))
    out.receiver = store.receiver.index_copy(0, torch.tensor([vi]), new_r.unsqueeze(0))
    out.cascade = store.cascade.index_copy(0, torch.tensor([ci]), new_c.unsqueeze(0))
    out.last_update["originator"][ui] = event.time
    out.last_update["receiver"][vi] = event.time
    out.last_update["cascade"][ci] = event.time
    out.cursor += 1
    out.clock = max(out.clock, event.time)
    return out


@dataclass
class StateQuery:
    """Read states at a point inside a replay window.

    ``position`` counts window events that precede the query. ``users`` get
    both originator and receiver states; ``cascade`` gets its cascade state.
    """

    position: int
    cascade: int
    users: np.ndarray


@dataclass
class QueryResult:
    originator: Tensor
    receiver: Tensor
    cascade: Tensor


@dataclass
class Gather:
    """Rows pulled from several source tensors, returned in request order.

    Source 0 is the block of window-start rows, source ``k + 1`` the output of
    wave ``k``.
    """

    parts: list[tuple[int, Tensor]]
    inverse: Tensor | None

    @classmethod
    def build(cls, sources: np.ndarray, rows: np.ndarray) -> "Gather":
        parts = []
        order = []
        for s in np.unique(sources):
            sel = np.nonzero(sources == s)[0]
            parts.append((int(s), torch.from_numpy(rows[sel].astype(np.int64))))
            order.append(sel)
        if len(parts) <= 1:
            return cls(parts, None)
        perm = np.concatenate(order)
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(len(perm))
        return cls(parts, torch.from_numpy(inverse))

    def __call__(self, tensors: list[Tensor]) -> Tensor:
        picked = [tensors[s].index_select(0, rows) for s, rows in self.parts]
        if self.inverse is None:
            return picked[0]
        return torch.cat(picked).index_select(0, self.inverse)


@dataclass
class ReplayPlan:
    """Index bookkeeping for one replay window; independent of parameters."""

    n_events: int
    levels: list[np.ndarray]
    dts: dict[str, np.ndarray]
    base_rows: dict[str, Tensor]
    inputs: list[dict[str, Gather]]
    query_gathers: list[dict[str, Gather]]
    final: dict[str, tuple[Tensor, Gather]]
    last_update: dict[str, tuple[np.ndarray, np.ndarray]]
    end_clock: float


def plan_replay(
    store: DynamicStateStore,
    u: np.ndarray,
    v: np.ndarray,
    c: np.ndarray,
    t: np.ndarray,
    queries: Sequence[StateQuery] = (),
    batched: bool = True,
) -> ReplayPlan:
    """Group events into waves with no shared (entity, role) and resolve where each input lives.

    An event lands one wave after the latest earlier event that touched any of
    its three (entity, role) slots, so running waves in order reproduces
    strictly sequential processing. With ``batched=False`` every event gets
    its own wave.
    """
    n = len(t)
    ents = {"originator": u, "receiver": v, "cascade": c}
    if n and np.any(np.diff(t) < 0):
        raise DataError("events are not in chronological order")
    if n and t[0] < store.clock:
        raise DataError(f"event at {t[0]} precedes the store clock {store.clock}")

    last_ev = {r: {} for r in ROLES}
    last_t = {r: {} for r in ROLES}
    prev = {r: np.full(n, -1, dtype=np.int64) for r in ROLES}
    dts = {r: np.empty(n, dtype=np.float64) for r in ROLES}
    level = np.empty(n, dtype=np.int64)
    # per role: entity -> slot in the window-start block
    base_slot = {r: {} for r in ROLES}

    def locate(role, x):
        k = last_ev[role].get(x)
        if k is not None:
            return ("event", k)
        return ("base", base_slot[role].setdefault(x, len(base_slot[role])))

    raw_queries: list = [None] * len(queries)
    order = sorted(range(len(queries)), key=lambda k: queries[k].position)
    qi = 0
    for j in range(n + 1):
        while qi < len(order) and queries[order[qi]].position == j:
            q = queries[order[qi]]
            raw_queries[order[qi]] = {
                "originator": [locate("originator", int(x)) for x in q.users],
                "receiver": [locate("receiver", int(x)) for x in q.users],
                "cascade": [locate("cascade", int(q.cascade))],
            }
            qi += 1
        if j == n:
            break
        lvl = 0
        for role in ROLES:
            x = int(ents[role][j])
            k = last_ev[role].get(x)
            if k is None:
                base_slot[role].setdefault(x, len(base_slot[role]))
                lt = store.last_update[role][x]
                dts[role][j] = 0.0 if np.isnan(lt) else t[j] - lt
            else:
                prev[role][j] = k
                dts[role][j] = t[j] - last_t[role][x]
                lvl = max(lvl, level[k] + 1)
            last_ev[role][x] = j
            last_t[role][x] = t[j]
        level[j] = lvl if batched else j
    if qi != len(order):
        raise ValueError("query position beyond the window")

    levels = []
    pos = np.empty(n, dtype=np.int64)
    wave_of = np.empty(n, dtype=np.int64)
    if n:
        by_level = np.argsort(level, kind="stable")
        bounds = np.searchsorted(level[by_level], np.arange(level.max() + 2))
        for i in range(len(bounds) - 1):
            if bounds[i + 1] > bounds[i]:
                members = by_level[bounds[i]:bounds[i + 1]]
                wave_of[members] = len(levels)
                pos[members] = np.arange(len(members))
                levels.append(members)

    def gather(locs):
        src = np.array([0 if kind == "base" else wave_of[k] + 1 for kind, k in locs], dtype=np.int64)
        rows = np.array([k if kind == "base" else pos[k] for kind, k in locs], dtype=np.int64)
        return Gather.build(src, rows)

    inputs = []
    for members in levels:
        spec = {}
        for role in ROLES:
            locs = []
            for j in members:
                k = prev[role][j]
                locs.append(("event", k) if k >= 0 else ("base", base_slot[role][int(ents[role][j])]))
            spec[role] = gather(locs)
        inputs.append(spec)

    query_gathers = [{role: gather(locs) for role, locs in rq.items()} for rq in raw_queries]

    final = {}
    lu = {}
    for role in ROLES:
        touched = np.array(sorted(last_ev[role]), dtype=np.int64)
        final[role] = (torch.from_numpy(touched), gather([("event", last_ev[role][x]) for x in touched]))
        lu[role] = (touched, np.array([last_t[role][x] for x in touched], dtype=np.float64))
    base_rows = {}
    for role in ROLES:
        slots = base_slot[role]
        ids = np.empty(len(slots), dtype=np.int64)
        for x, sl in slots.items():
            ids[sl] = x
        base_rows[role] = torch.from_numpy(ids)
    return ReplayPlan(
        n_events=n,
        levels=levels,
        dts=dts,
        base_rows=base_rows,
        inputs=inputs,
        query_gathers=query_gathers,
        final=final,
        last_update=lu,
        end_clock=float(t[-1]) if n else store.clock,
    )


def run_replay(store: DynamicStateStore, evolution: EvolutionModule | None, plan: ReplayPlan):
    """Execute a plan. Returns the new store and one QueryResult per query.

    With ``evolution=None`` states stay at their window-start values (no
    evolution learning), but clocks and cursors still advance.
    """
    sources = {role: [store.table(role).index_select(0, plan.base_rows[role])] for role in ROLES}
    if evolution is not None and plan.levels:
        fused = evolution.fused()
        dtype = store.originator.dtype
        for wave, spec in zip(plan.levels, plan.inputs):
            olds = [spec[role](sources[role]) for role in ROLES]
            dts = [torch.as_tensor(plan.dts[role][wave], dtype=dtype) for role in ROLES]
            news = fused(olds, dts)
            for role, new in zip(ROLES, news):
                sources[role].append(new)
    elif plan.levels:
        for wave, spec in zip(plan.levels, plan.inputs):
            for role in ROLES:
                sources[role].append(spec[role](sources[role]))

    results = [
        QueryResult(
            originator=q["originator"](sources["originator"]),
            receiver=q["receiver"](sources["receiver"]),
            cascade=q["cascade"](sources["cascade"])[0],
        )
        for q in plan.query_gathers
    ]

    out = store.copy()
    for role in ROLES:
        touched, gather = plan.final[role]
        if evolution is not None and len(touched):
            setattr(out, role, store.table(role).index_copy(0, touched, gather(sources[role])))
        idx, times = plan.last_update[role]
        out.last_update[role][idx] = times
    out.cursor += plan.n_events
    out.clock = max(store.clock, plan.end_clock)
    return out, results


def process_events(
    events: Sequence[DiffusionEvent],
    store: DynamicStateStore,
    evolution: EvolutionModule,
    update_gradients: bool = True,
    batched: bool = True,
) -> DynamicStateStore:
    """Fold all events into the store in chronological order."""
    for a, b in zip(events, events[1:]):
        if b.sort_key < a.sort_key:
            raise DataError(f"events out of order at time {b.time}")
    with torch.set_grad_enabled(update_gradients and torch.is_grad_enabled()):
        if not batched:
            for ev in events:
                store = update_states(ev, store, compute_messages(ev, store, evolution), evolution)
            return store
        plan = plan_replay(store, *store.encode(events), batched=True)
        store, _ = run_replay(store, evolution, plan)
    return store
