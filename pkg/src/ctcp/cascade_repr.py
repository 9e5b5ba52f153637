"""Temporal and structural cascade embeddings and their fusion.

User representations are aggregated two ways: along the participation
sequence with an LSTM (after adding time-slot and position embeddings), and
over the cascade DAG with a child-sum LSTM cell run forward (root to leaves)
and on the reversed graph. Both branches exist twice, once on static user
embeddings and once on dynamic states.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn.utils.rnn import pack_padded_sequence

from .diffusion_data import CascadeRecord, DataError

MAX_POSITIONS = 100


class StaticUserTable(nn.Module):
    """Learnable per-user vectors; row 0 is the shared fallback for unseen users."""

    def __init__(self, users: Sequence[str], d: int):
        super().__init__()
        self.users = list(users)
        self.index = {u: i + 1 for i, u in enumerate(self.users)}
        self.embedding = nn.Embedding(len(self.users) + 1, d)
        nn.init.normal_(self.embedding.weight, std=0.1)

    def rows(self, users: Sequence[str]) -> Tensor:
        return torch.tensor([self.index.get(u, 0) for u in users], dtype=torch.long)

    def forward(self, rows: Tensor) -> Tensor:
        return self.embedding(rows)

    def lookup(self, users: Sequence[str]) -> Tensor:
        return self.embedding(self.rows(users))


class SlotEmbeddings(nn.Module):
    """Time-slot, position and publication-slot embeddings, all of width d."""

    def __init__(self, d: int, n_t: int, observation_window: float, n_g: int = 20,
                 publish_span: tuple[float, float] = (0.0, 1.0), max_len: int = MAX_POSITIONS):
        super().__init__()
        if observation_window <= 0:
            raise ValueError("observation window must be positive")
        self.n_t = n_t
        self.n_g = n_g
        self.max_len = max_len
        self.observation_window = float(observation_window)
        self.publish_span = (float(publish_span[0]), float(publish_span[1]))
        self.time_slot = nn.Embedding(n_t, d)
        self.position = nn.Embedding(max_len, d)
        self.publication = nn.Embedding(n_g, d)
        for emb in (self.time_slot, self.position, self.publication):
            nn.init.normal_(emb.weight, std=0.1)

    def time_slot_index(self, rel_times) -> np.ndarray:
        rel = np.asarray(rel_times, dtype=np.float64)
        return np.clip(np.floor(rel * self.n_t / self.observation_window), 0, self.n_t - 1).astype(np.int64)

    def position_index(self, n: int) -> np.ndarray:
        return np.minimum(np.arange(n), self.max_len - 1).astype(np.int64)

    def publication_slot_index(self, publish_times) -> np.ndarray:
        lo, hi = self.publish_span
        t = np.asarray(publish_times, dtype=np.float64)
        if hi <= lo:
            return np.zeros(t.shape, dtype=np.int64)
        return np.clip(np.floor((t - lo) * self.n_g / (hi - lo)), 0, self.n_g - 1).astype(np.int64)


class CascadeDAG:
    """Cascade graph over unique users; nodes keep first-appearance order."""

    def __init__(self, nodes: Sequence[str], edges: Sequence[tuple[str, str]], root: str | None = None,
                 strict: bool = True):
        self.nodes = list(dict.fromkeys(nodes))
        self.index = {u: i for i, u in enumerate(self.nodes)}
        pairs = []
        for src, tgt in edges:
            if src not in self.index or tgt not in self.index:
                raise DataError(f"edge ({src}, {tgt}) references a node outside the graph")
            pair = (self.index[src], self.index[tgt])
            if pair not in pairs:
                pairs.append(pair)
        self.edges = pairs
        self.root = root
        self.predecessors: dict[int, list[int]] = defaultdict(list)
        self.successors: dict[int, list[int]] = defaultdict(list)
        for a, b in self.edges:
            self.successors[a].append(b)
            self.predecessors[b].append(a)
        self._levels = {"forward": self._topo_levels(self.predecessors, self.successors)}
        self._levels["reverse"] = self._topo_levels(self.successors, self.predecessors)
        if strict:
            self.validate()

    @classmethod
    def from_record(cls, rec: CascadeRecord) -> "CascadeDAG":
        users = [rec.root_user] + [t for _, t, _ in rec.participants]
        return cls(users, rec.edges(), root=rec.root_user)

    def without(self, users) -> "CascadeDAG":
        """Induced subgraph with ``users`` removed; may have several roots."""
        drop = set(users)
        keep = [u for u in self.nodes if u not in drop]
        edges = [(self.nodes[a], self.nodes[b]) for a, b in self.edges
                 if self.nodes[a] not in drop and self.nodes[b] not in drop]
        return CascadeDAG(keep, edges, strict=False)

    def _topo_levels(self, preds, succs) -> np.ndarray:
        n = len(self.nodes)
        indeg = np.array([len(preds[i]) for i in range(n)], dtype=np.int64)
        level = np.zeros(n, dtype=np.int64)
        frontier = [i for i in range(n) if indeg[i] == 0]
        seen = 0
        while frontier:
            nxt = []
            for i in frontier:
                seen += 1
                for j in succs[i]:
                    level[j] = max(level[j], level[i] + 1)
                    indeg[j] -= 1
                    if indeg[j] == 0:
                        nxt.append(j)
            frontier = nxt
        if seen != n:
            raise DataError("cascade graph contains a cycle")
        return level

    @property
    def roots(self) -> list[int]:
        return [i for i in range(len(self.nodes)) if not self.predecessors[i]]

    @property
    def leaves(self) -> list[int]:
        return [i for i in range(len(self.nodes)) if not self.successors[i]]

    def sinks(self, direction: str) -> list[int]:
        return self.leaves if direction == "forward" else self.roots

    def node_ids(self) -> range:
        return range(len(self.nodes))

    def levels(self, direction: str) -> np.ndarray:
        return self._levels[direction]

    def validate(self):
        roots = self.roots
        if len(roots) != 1 or (self.root is not None and self.nodes[roots[0]] != self.root):
            raise DataError(f"cascade graph must have exactly one root, found {[self.nodes[r] for r in roots]}")
        reach = {roots[0]}
        stack = [roots[0]]
        while stack:
            for j in self.successors[stack.pop()]:
                if j not in reach:
                    reach.add(j)
                    stack.append(j)
        if len(reach) != len(self.nodes):
            missing = [self.nodes[i] for i in range(len(self.nodes)) if i not in reach]
            raise DataError(f"nodes not reachable from the root: {missing}")


@dataclass
class DAGBatch:
    """Several DAGs flattened into one node index space, grouped by level."""

    n_graphs: int
    levels: dict[str, list[tuple[Tensor, Tensor, Tensor]]]
    sinks: dict[str, tuple[Tensor, Tensor]]

    @classmethod
    def build(cls, dags: Sequence[CascadeDAG], offsets: Sequence[int]) -> "DAGBatch":
        levels = {}
        sinks = {}
        for direction in ("forward", "reverse"):
            by_level = defaultdict(lambda: ([], [], []))
            sink_nodes, sink_graph = [], []
            for g, (dag, off) in enumerate(zip(dags, offsets)):
                lv = dag.levels(direction)
                for i in dag.node_ids():
                    by_level[int(lv[i])][0].append(off + i)
                for a, b in dag.edges:
                    parent, child = (a, b) if direction == "forward" else (b, a)
                    bucket = by_level[int(lv[child])]
                    bucket[1].append(off + parent)
                    bucket[2].append(off + child)
                for s in dag.sinks(direction):
                    sink_nodes.append(off + s)
                    sink_graph.append(g)
            levels[direction] = [
                (torch.tensor(by_level[l][0], dtype=torch.long),
                 torch.tensor(by_level[l][1], dtype=torch.long),
                 torch.tensor(by_level[l][2], dtype=torch.long))
                for l in sorted(by_level)
            ]
            sinks[direction] = (torch.tensor(sink_nodes, dtype=torch.long), torch.tensor(sink_graph, dtype=torch.long))
        return cls(len(dags), levels, sinks)


class DAGCell(nn.Module):
    """Child-sum LSTM cell with one forget gate per incoming edge."""

    def __init__(self, d: int):
        super().__init__()
        self.d = d
        self.input_gate = nn.Linear(2 * d, d)
        self.forget_gate = nn.Linear(2 * d, d)
        self.output_gate = nn.Linear(2 * d, d)
        self.candidate = nn.Linear(2 * d, d)

    def forward(self, x: Tensor, batch: DAGBatch, direction: str = "forward") -> tuple[Tensor, Tensor]:
        """Node hidden and cell states for every node of the batch."""
        n, d = x.shape[0], self.d
        H = x.new_zeros(n, d)
        C = x.new_zeros(n, d)
        for nodes, parents, children in batch.levels[direction]:
            xs = x.index_select(0, nodes)
            local = torch.empty(n, dtype=torch.long)
            local[nodes] = torch.arange(len(nodes))
            h_sum = xs.new_zeros(len(nodes), d)
            fc_sum = xs.new_zeros(len(nodes), d)
            if len(parents):
                slot = local[children]
                h_par = H.index_select(0, parents)
                f = torch.sigmoid(self.forget_gate(torch.cat([x.index_select(0, children), h_par], dim=-1)))
                h_sum = h_sum.index_add(0, slot, h_par)
                fc_sum = fc_sum.index_add(0, slot, f * C.index_select(0, parents))
            inp = torch.cat([xs, h_sum], dim=-1)
            i = torch.sigmoid(self.input_gate(inp))
            o = torch.sigmoid(self.output_gate(inp))
            g = torch.tanh(self.candidate(inp))
            c = i * g + fc_sum
            h = o * torch.tanh(c)
            H = H.index_copy(0, nodes, h)
            C = C.index_copy(0, nodes, c)
        return H, C


def encode_dag_batch(x: Tensor, batch: DAGBatch, cell: DAGCell, direction: str) -> Tensor:
    """Sum of sink hidden states per graph, shape ``(n_graphs, d)``."""
    H, _ = cell(x, batch, direction)
    nodes, graph = batch.sinks[direction]
    return x.new_zeros(batch.n_graphs, cell.d).index_add(0, graph, H.index_select(0, nodes))


def structural_encode(dag: CascadeDAG, user_repr: Tensor, cell: DAGCell, direction: str = "forward") -> Tensor:
    """Encode one DAG; ``user_repr`` rows follow ``dag.nodes``."""
    if direction not in ("forward", "reverse"):
        raise ValueError(f"unknown direction {direction!r}")
    if user_repr.shape[0] != len(dag.nodes):
        raise ValueError("need one representation row per DAG node")
    return encode_dag_batch(user_repr, DAGBatch.build([dag], [0]), cell, direction)[0]


class TemporalEncoder(nn.Module):
    """LSTM over ``user_repr + time_slot + position``; returns the last hidden state."""

    def __init__(self, d: int):
        super().__init__()
        self.lstm = nn.LSTM(d, d, batch_first=True)

    def forward(self, z: Tensor, lengths: Tensor) -> Tensor:
        """``z`` is padded ``(B, L, d)``; zero-length rows yield zero vectors."""
        out = z.new_zeros(z.shape[0], self.lstm.hidden_size)
        keep = lengths > 0
        if bool(keep.any()):
            packed = pack_padded_sequence(z[keep], lengths[keep].cpu(), batch_first=True, enforce_sorted=False)
            _, (h, _) = self.lstm(packed)
            out = out.index_copy(0, torch.nonzero(keep).squeeze(1), h[-1])
        return out


def temporal_inputs(user_repr: Tensor, rel_times, slots: SlotEmbeddings) -> Tensor:
    n = user_repr.shape[0]
    t_idx = torch.from_numpy(slots.time_slot_index(rel_times))
    p_idx = torch.from_numpy(slots.position_index(n))
    return user_repr + slots.time_slot(t_idx) + slots.position(p_idx)


def temporal_encode(rel_times, user_repr: Tensor, slots: SlotEmbeddings, encoder: TemporalEncoder) -> Tensor:
    """Encode one participation sequence; ``user_repr`` rows follow the sequence."""
    if user_repr.shape[0] == 0:
        raise ValueError("cannot encode an empty participation sequence")
    rel = np.asarray(rel_times, dtype=np.float64)
    if np.any(rel < 0) or np.any(rel >= slots.observation_window):
        raise ValueError("relative times must lie in [0, observation window)")
    z = temporal_inputs(user_repr, rel, slots).unsqueeze(0)
    return encoder(z, torch.tensor([user_repr.shape[0]]))[0]


class MLP(nn.Module):
    """One hidden ReLU layer, tanh output."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.hidden = nn.Linear(in_dim, hidden)
        self.out = nn.Linear(hidden, out_dim)

    def forward(self, x: Tensor) -> Tensor:
        return torch.tanh(self.out(torch.relu(self.hidden(x))))


def fuse_static(h_t: Tensor, h_s: Tensor | None, fusion: MLP) -> Tensor:
    parts = [h_t] if h_s is None else [h_t, h_s]
    x = torch.cat(parts, dim=-1)
    if x.shape[-1] != fusion.hidden.in_features:
        raise ValueError(f"fusion expects {fusion.hidden.in_features} inputs, got {x.shape[-1]}")
    return fusion(x)


class DynamicFusion(nn.Module):
    def __init__(self, d: int, structural: bool = True):
        super().__init__()
        self.state_merge = nn.Linear(3 * d, d, bias=False)
        self.merge = nn.Linear((3 if structural else 2) * d, d, bias=False)

    def forward(self, h_t: Tensor, h_s: Tensor | None, s_c: Tensor, pub_embedding: Tensor,
                s_orig: Tensor, s_recv: Tensor) -> tuple[Tensor, Tensor]:
        s_tilde = s_c + pub_embedding
        h_tilde = torch.sigmoid(self.state_merge(torch.cat([s_tilde, s_orig, s_recv], dim=-1)))
        parts = [h_t, h_tilde] if h_s is None else [h_t, h_s, h_tilde]
        x = torch.cat(parts, dim=-1)
        if x.shape[-1] != self.merge.in_features:
            raise ValueError(f"fusion expects {self.merge.in_features} inputs, got {x.shape[-1]}")
        return torch.sigmoid(self.merge(x)), h_tilde


def fuse_dynamic(h_t, h_s, cascade_state, last_event_states, pub_slot_embedding, fusion: DynamicFusion) -> Tensor:
    s_o, s_r = last_event_states
    return fusion(h_t, h_s, cascade_state, pub_slot_embedding, s_o, s_r)[0]


@dataclass
class CascadeInputs:
    """Parameter-free structure of one cascade at its observation deadline."""

    cascade: str
    dag: CascadeDAG
    seq_nodes: np.ndarray  # node index of each sequence element, root first
    seq_times: np.ndarray
    reduced_dag: CascadeDAG
    reduced_nodes: np.ndarray  # full-DAG node index of each reduced-DAG node
    reduced_seq: np.ndarray  # positions into seq_nodes kept after excluding the last event's users
    last_source: int
    last_target: int
    publish_time: float

    @classmethod
    def from_record(cls, rec: CascadeRecord) -> "CascadeInputs":
        dag = CascadeDAG.from_record(rec)
        seq = rec.sequence()
        seq_nodes = np.array([dag.index[u] for u, _ in seq], dtype=np.int64)
        seq_times = np.array([t for _, t in seq], dtype=np.float64)
        u, v, _ = rec.last_event
        drop = {u, v}
        reduced = dag.without(drop)
        return cls(
            cascade=rec.cascade,
            dag=dag,
            seq_nodes=seq_nodes,
            seq_times=seq_times,
            reduced_dag=reduced,
            reduced_nodes=np.array([dag.index[n] for n in reduced.nodes], dtype=np.int64),
            reduced_seq=np.array([i for i, (user, _) in enumerate(seq) if user not in drop], dtype=np.int64),
            last_source=dag.index[u],
            last_target=dag.index[v],
            publish_time=rec.publish_time,
        )


@dataclass
class CascadeBatch:
    """Index tensors for encoding several cascades at once."""

    n: int
    node_count: int
    node_offsets: np.ndarray
    full_dags: DAGBatch
    reduced_dags: DAGBatch
    seq_index: Tensor  # (B, L) into batch nodes
    seq_len: Tensor
    seq_slot: Tensor
    seq_pos: Tensor
    red_seq_index: Tensor
    red_seq_len: Tensor
    red_seq_slot: Tensor
    red_seq_pos: Tensor
    last_source: Tensor
    last_target: Tensor
    pub_slot: Tensor

    @classmethod
    def build(cls, items: Sequence[CascadeInputs], slots: SlotEmbeddings) -> "CascadeBatch":
        sizes = np.array([len(it.dag.nodes) for it in items], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        full = DAGBatch.build([it.dag for it in items], offsets)
        # reduced DAG nodes are mapped back into the full node index space
        red = DAGBatch.build([_ReindexedDAG(it.reduced_dag, it.reduced_nodes) for it in items], offsets)

        def pad(seqs, times):
            L = max([len(s) for s in seqs] + [1])
            index = torch.zeros(len(seqs), L, dtype=torch.long)
            slot = torch.zeros(len(seqs), L, dtype=torch.long)
            pos = torch.zeros(len(seqs), L, dtype=torch.long)
            for b, (s, t) in enumerate(zip(seqs, times)):
                n = len(s)
                if n:
                    index[b, :n] = torch.from_numpy(s)
                    slot[b, :n] = torch.from_numpy(slots.time_slot_index(t))
                    pos[b, :n] = torch.from_numpy(slots.position_index(n))
            return index, torch.tensor([len(s) for s in seqs], dtype=torch.long), slot, pos

        full_seq = pad([it.seq_nodes + off for it, off in zip(items, offsets)], [it.seq_times for it in items])
        red_seq = pad(
            [it.seq_nodes[it.reduced_seq] + off for it, off in zip(items, offsets)],
            [it.seq_times[it.reduced_seq] for it in items],
        )
        return cls(
            n=len(items),
            node_count=int(sizes.sum()),
            node_offsets=offsets,
            full_dags=full,
            reduced_dags=red,
            seq_index=full_seq[0], seq_len=full_seq[1], seq_slot=full_seq[2], seq_pos=full_seq[3],
            red_seq_index=red_seq[0], red_seq_len=red_seq[1], red_seq_slot=red_seq[2], red_seq_pos=red_seq[3],
            last_source=torch.tensor([off + it.last_source for it, off in zip(items, offsets)], dtype=torch.long),
            last_target=torch.tensor([off + it.last_target for it, off in zip(items, offsets)], dtype=torch.long),
            pub_slot=torch.from_numpy(slots.publication_slot_index([it.publish_time for it in items])),
        )


class _ReindexedDAG:
    """A reduced DAG whose node ids are expressed in its parent DAG's numbering."""

    def __init__(self, dag: CascadeDAG, mapping: np.ndarray):
        self._dag = dag
        self._map = mapping
        self.edges = [(int(mapping[a]), int(mapping[b])) for a, b in dag.edges]
        self._levels = {}
        for direction in ("forward", "reverse"):
            lv = np.zeros(int(mapping.max()) + 1 if len(mapping) else 0, dtype=np.int64)
            lv[mapping] = dag.levels(direction)
            self._levels[direction] = lv

    def node_ids(self) -> list[int]:
        return [int(i) for i in self._map]

    def levels(self, direction: str) -> np.ndarray:
        return self._levels[direction]

    def sinks(self, direction: str) -> list[int]:
        return [int(self._map[s]) for s in self._dag.sinks(direction)]


class CascadeRepresentation(nn.Module):
    """Static and dynamic cascade embeddings for batches of cascades."""

    def __init__(self, d: int, n_t: int, observation_window: float, users: Sequence[str] | None,
                 publish_span: tuple[float, float] = (0.0, 1.0), n_g: int = 20, structural: bool = True):
        super().__init__()
        self.d = d
        self.structural = structural
        self.static_table = StaticUserTable(users, d) if users is not None else None
        self.slots = SlotEmbeddings(d, n_t, observation_window, n_g, publish_span)
        self.static_temporal = TemporalEncoder(d)
        self.dynamic_temporal = TemporalEncoder(d)
        self.dynamic_projection = nn.Linear(2 * d, d)
        if structural:
            self.static_dag_forward = DAGCell(d)
            self.static_dag_reverse = DAGCell(d)
            self.static_structure = MLP(2 * d, d, d)
            self.dynamic_dag_forward = DAGCell(d)
            self.dynamic_dag_reverse = DAGCell(d)
            self.dynamic_structure = MLP(2 * d, d, d)
        self.static_fusion = MLP((2 if structural else 1) * d, d, d)
        self.dynamic_fusion = DynamicFusion(d, structural)

    def node_static(self, batch_users: Sequence[str]) -> Tensor:
        if self.static_table is None:
            return self.slots.time_slot.weight.new_zeros(len(batch_users), self.d)
        return self.static_table(self.static_table.rows(batch_users))

    def _temporal(self, x, index, length, slot, pos, encoder):
        z = x[index] + self.slots.time_slot(slot) + self.slots.position(pos)
        return encoder(z, length)

    def _structural(self, x, dags, forward_cell, reverse_cell, combine):
        up = encode_dag_batch(x, dags, forward_cell, "forward")
        down = encode_dag_batch(x, dags, reverse_cell, "reverse")
        return combine(torch.cat([up, down], dim=-1))

    def forward(self, batch: CascadeBatch, node_users: Sequence[str], node_orig: Tensor, node_recv: Tensor,
                cascade_state: Tensor) -> dict[str, Tensor]:
        """Embeddings for every cascade of ``batch``.

        ``node_users`` and the two dynamic state tensors are row-aligned with
        the batch nodes; ``cascade_state`` has one row per cascade.
        """
        x_static = self.node_static(node_users)
        h_t = self._temporal(x_static, batch.seq_index, batch.seq_len, batch.seq_slot, batch.seq_pos,
                             self.static_temporal)
        h_s = None
        if self.structural:
            h_s = self._structural(x_static, batch.full_dags, self.static_dag_forward,
                                   self.static_dag_reverse, self.static_structure)
        static = fuse_static(h_t, h_s, self.static_fusion)

        x_dyn = self.dynamic_projection(torch.cat([node_orig, node_recv], dim=-1))
        hd_t = self._temporal(x_dyn, batch.red_seq_index, batch.red_seq_len, batch.red_seq_slot,
                              batch.red_seq_pos, self.dynamic_temporal)
        hd_s = None
        if self.structural:
            hd_s = self._structural(x_dyn, batch.reduced_dags, self.dynamic_dag_forward,
                                    self.dynamic_dag_reverse, self.dynamic_structure)
            # a cascade emptied by the exclusion keeps a zero structural part
            empty = (batch.red_seq_len == 0).unsqueeze(1)
            hd_s = torch.where(empty, torch.zeros_like(hd_s), hd_s)
        dynamic, h_tilde = self.dynamic_fusion(
            hd_t, hd_s, cascade_state, self.slots.publication(batch.pub_slot),
            node_orig.index_select(0, batch.last_source), node_recv.index_select(0, batch.last_target),
        )
        out = {"static": static, "dynamic": dynamic, "static_temporal": h_t, "dynamic_temporal": hd_t,
               "dynamic_state": h_tilde}
        if self.structural:
            out["static_structural"] = h_s
            out["dynamic_structural"] = hd_s
        return out
