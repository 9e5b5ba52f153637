"""Chronological training and evaluation.

One epoch replays the whole event stream from zero states. Observation
deadlines of the requested split are grouped ``batch_size`` at a time; the
events up to the last deadline of a group form one replay window, the group's
loss is back-propagated through that window only and Adam takes a step.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .cascade_repr import CascadeBatch, CascadeInputs, CascadeRepresentation
from .diffusion_data import ConfigError, DataError, DatasetSplit, DiffusionGraph
from .evolution import DynamicStateStore, EvolutionModule, StateQuery, plan_replay, run_replay
from .metrics import MetricReport, bucketed_metrics, compute_metrics
from .prediction import PredictionHeads, log_popularity, msle_loss, to_count

log = logging.getLogger(__name__)

CONFIG_ENV = "CTCP_CONFIG"
ABLATIONS = ("without_evolution", "without_static", "without_structural")
MODEL_FILE = "model.pt"
MANIFEST_FILE = "manifest.json"
VOCAB_FILE = "users.txt"


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class ModelConfig:
    d: int = 64
    n_t: int = 20
    n_f: int = 16
    n_g: int = 20
    lam: float = 0.1
    learning_rate: float = 1e-4
    batch_size: int = 50
    patience: int = 15
    max_epochs: int = 200
    seed: int = 0
    without_evolution: bool = False
    without_static: bool = False
    without_structural: bool = False
    eval_batch_size: int = 200
    # "best_val" keeps the parameters of the best validation epoch, "last" the final ones
    selection: str = "best_val"
    # stop as soon as an epoch's mean training loss falls below this value
    stop_train_loss: float | None = None
    # start both heads' output bias at the mean training target instead of zero
    init_output_bias: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        for name in ("d", "n_t", "n_f", "n_g", "batch_size", "patience", "max_epochs", "eval_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.selection not in ("best_val", "last"):
            raise ConfigError(f"unknown selection {self.selection!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)

    @property
    def ablations(self) -> list[str]:
        return [a for a in ABLATIONS if getattr(self, a)]

    def as_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["lambda"] = out.pop("lam")
        return out

    @classmethod
    def from_mapping(cls, values: dict) -> "ModelConfig":
        """Build from string or typed values; ``lambda`` and ``ablation`` keys are accepted."""
        kwargs = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            name = "lam" if key == "lambda" else key.replace("-", "_")
            if name in ("ablation", "ablations"):
                items = raw if isinstance(raw, (list, tuple)) else str(raw).replace(",", " ").split()
                for a in items:
                    if a not in ABLATIONS:
                        raise ConfigError(f"unknown ablation {a!r}")
                    kwargs[a] = True
                continue
            if name not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[name] = _coerce(name, types[name], raw)
        return cls(**kwargs)


def _coerce(name: str, typ: str, raw):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if typ == "bool":
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ == "int":
            return int(text)
        if typ == "float":
            return float(text)
        if typ.startswith("float |"):
            return None if text.lower() in ("", "none", "null") else float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {name}") from None


def read_config_file(path: str | os.PathLike) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            values[key.strip()] = value.strip()
    return values


def write_config_file(config: ModelConfig, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in config.as_dict().items():
            fh.write(f"{key} = {'none' if value is None else value}\n")


class CTCPModel(nn.Module):
    """Evolution learning, cascade representation and prediction heads."""

    def __init__(self, config: ModelConfig, train_users: Sequence[str], observation_window: float,
                 publish_span: tuple[float, float]):
        super().__init__()
        self.config = config
        self.observation_window = float(observation_window)
        self.publish_span = (float(publish_span[0]), float(publish_span[1]))
        self.train_users = list(train_users)
        torch.manual_seed(config.seed)
        self.evolution = None if config.without_evolution else EvolutionModule(config.d, config.n_f)
        self.representation = CascadeRepresentation(
            config.d, config.n_t, observation_window,
            users=None if config.without_static else self.train_users,
            publish_span=publish_span, n_g=config.n_g, structural=not config.without_structural,
        )
        self.heads = PredictionHeads(config.d, config.lam)
        self.to(config.torch_dtype)

    def embed(self, window: "Window", results) -> dict[str, Tensor]:
        node_orig = torch.cat([r.originator for r in results])
        node_recv = torch.cat([r.receiver for r in results])
        casc = torch.stack([r.cascade for r in results])
        return self.representation(window.batch, window.node_users, node_orig, node_recv, casc)

    def forward(self, window: "Window", results) -> tuple[Tensor, dict[str, Tensor]]:
        emb = self.embed(window, results)
        return self.heads(emb["static"], emb["dynamic"]), emb


def parameter_manifest(model: nn.Module) -> dict[str, list[int]]:
    return {name: list(p.shape) for name, p in model.named_parameters()}


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


@dataclass
class EventSchedule:
    """Merged stream of ("event", event index) and ("deadline", cascade id) items."""

    items: list[tuple[str, object]]
    deadline_positions: dict[str, int]

    def deadlines(self) -> list[str]:
        return [x for kind, x in self.items if kind == "deadline"]


def build_schedule(graph: DiffusionGraph, cascade_ids: Iterable[str]) -> EventSchedule:
    """Every observed event plus the deadline markers of ``cascade_ids``.

    A deadline is placed before any event carrying exactly its timestamp.
    """
    times = np.array([e.time for e in graph.events], dtype=np.float64)
    last_index: dict[str, int] = {}
    for i, e in enumerate(graph.events):
        last_index[e.cascade] = i
    deadlines = []
    for c in cascade_ids:
        if c not in graph.cascades:
            raise DataError(f"unknown cascade {c!r}")
        due = graph.cascades[c].publish_time + graph.observation_window
        pos = int(np.searchsorted(times, due, side="left"))
        if c not in last_index:
            raise DataError(f"cascade {c} has a deadline but no events")
        if last_index[c] >= pos:
            raise DataError(f"cascade {c} has an event at or after its deadline")
        deadlines.append((due, c, pos))
    deadlines.sort()
    items: list[tuple[str, object]] = []
    k = 0
    for i in range(len(graph.events) + 1):
        while k < len(deadlines) and deadlines[k][2] == i:
            items.append(("deadline", deadlines[k][1]))
            k += 1
        if i < len(graph.events):
            items.append(("event", i))
    return EventSchedule(items, {c: pos for _, c, pos in deadlines})


class PreparedData:
    """Integer-encoded events and per-cascade structures for one graph."""

    def __init__(self, graph: DiffusionGraph):
        self.graph = graph
        self.users = graph.users
        self.cascade_ids = graph.cascade_ids
        self.user_index = {u: i for i, u in enumerate(self.users)}
        self.cascade_index = {c: i for i, c in enumerate(self.cascade_ids)}
        ev = graph.events
        self.u = np.array([self.user_index[e.source_user] for e in ev], dtype=np.int64)
        self.v = np.array([self.user_index[e.target_user] for e in ev], dtype=np.int64)
        self.c = np.array([self.cascade_index[e.cascade] for e in ev], dtype=np.int64)
        self.t = np.array([e.time for e in ev], dtype=np.float64)
        self.inputs = {c: CascadeInputs.from_record(rec) for c, rec in graph.cascades.items()}
        self._programs: dict = {}

    def fresh_store(self, d: int, dtype) -> DynamicStateStore:
        return DynamicStateStore.zeros(self.users, self.cascade_ids, d, dtype)

    def users_of(self, cascade_ids: Iterable[str]) -> list[str]:
        seen = {}
        for c in cascade_ids:
            for u in self.inputs[c].dag.nodes:
                seen[u] = None
        return sorted(seen)

    def publish_span(self, cascade_ids: Iterable[str]) -> tuple[float, float]:
        t = [self.graph.cascades[c].publish_time for c in cascade_ids]
        return (min(t), max(t))

    def program(self, cascade_ids: Sequence[str], batch_size: int, model: CTCPModel) -> list["Window"]:
        slots = model.representation.slots
        key = (tuple(cascade_ids), batch_size, slots.n_t, slots.n_g, slots.observation_window, slots.publish_span)
        if key not in self._programs:
            self._programs[key] = compile_program(self, cascade_ids, batch_size, slots)
        return self._programs[key]


@dataclass
class Window:
    plan: object
    cascades: list[str]
    batch: CascadeBatch | None
    node_users: list[str]
    labels: Tensor


def compile_program(data: PreparedData, cascade_ids: Sequence[str], batch_size: int, slots) -> list[Window]:
    """Split the stream into replay windows ending at every ``batch_size``-th deadline."""
    if data.graph.observation_window != slots.observation_window:
        raise DataError(
            f"data observation window {data.graph.observation_window} does not match the model's "
            f"{slots.observation_window}"
        )
    schedule = build_schedule(data.graph, cascade_ids)
    order = schedule.deadlines()
    store = data.fresh_store(1, torch.float64)
    windows = []
    start = 0
    for b in range(0, len(order), batch_size):
        group = order[b:b + batch_size]
        end = schedule.deadline_positions[group[-1]]
        queries = [
            StateQuery(
                position=schedule.deadline_positions[c] - start,
                cascade=data.cascade_index[c],
                users=np.array([data.user_index[u] for u in data.inputs[c].dag.nodes], dtype=np.int64),
            )
            for c in group
        ]
        sl = slice(start, end)
        plan = plan_replay(store, data.u[sl], data.v[sl], data.c[sl], data.t[sl], queries)
        store, _ = run_replay(store, None, plan)
        items = [data.inputs[c] for c in group]
        node_users = [u for it in items for u in it.dag.nodes]
        labels = torch.tensor([data.graph.cascades[c].label for c in group], dtype=torch.float64)
        windows.append(Window(plan, list(group), CascadeBatch.build(items, slots), node_users, labels))
        start = end
    return windows


@dataclass
class EvalResult:
    cascades: list[str]
    predictions: np.ndarray
    labels: np.ndarray
    publish_times: np.ndarray
    report: MetricReport
    embeddings: dict[str, np.ndarray] | None = None

    def records(self) -> list[dict]:
        counts = to_count(torch.from_numpy(self.predictions)).numpy()
        return [
            {"cascade": c, "predicted_log": float(p), "predicted_count": float(n), "label": int(l)}
            for c, p, n, l in zip(self.cascades, self.predictions, counts, self.labels)
        ]


def _as_data(graph_or_data) -> PreparedData:
    return graph_or_data if isinstance(graph_or_data, PreparedData) else PreparedData(graph_or_data)


def evaluate(model: CTCPModel, graph, cascade_ids: Sequence[str], buckets: bool = False,
             embeddings: bool = False) -> EvalResult:
    """Replay from zero states and predict at every deadline of ``cascade_ids``."""
    data = _as_data(graph)
    cascade_ids = list(cascade_ids)
    if not cascade_ids:
        raise DataError("nothing to evaluate")
    program = data.program(cascade_ids, model.config.eval_batch_size, model)
    was_training = model.training
    model.eval()
    preds, names, h_s, h_d = [], [], [], []
    with torch.no_grad():
        store = data.fresh_store(model.config.d, model.config.torch_dtype)
        for w in program:
            store, results = run_replay(store, model.evolution, w.plan)
            pred, emb = model(w, results)
            preds.append(pred)
            names.extend(w.cascades)
            if embeddings:
                h_s.append(emb["static"])
                h_d.append(emb["dynamic"])
    model.train(was_training)
    predictions = torch.cat(preds).double().numpy()
    labels = np.array([data.graph.cascades[c].label for c in names], dtype=np.int64)
    publish = np.array([data.graph.cascades[c].publish_time for c in names], dtype=np.float64)
    report = compute_metrics(predictions, labels)
    if buckets:
        report.buckets = bucketed_metrics(predictions, labels, publish)
    emb_out = None
    if embeddings:
        emb_out = {"static": torch.cat(h_s).double().numpy(), "dynamic": torch.cat(h_d).double().numpy()}
    return EvalResult(names, predictions, labels, publish, report, emb_out)


@dataclass
class TrainResult:
    model: CTCPModel
    log: list[dict]
    best_epoch: int
    best_val_msle: float
    epochs_run: int
    stopped_early: bool = False
    state_dict: dict = field(default_factory=dict)


def build_model(config: ModelConfig, data: PreparedData, split: DatasetSplit) -> CTCPModel:
    model = CTCPModel(config, data.users_of(split.train), data.graph.observation_window,
                      data.publish_span(split.train))
    if config.init_output_bias:
        # a zero-centred head facing targets around log2(n) pushes the bounded
        # representations into saturation within the first few steps
        labels = torch.tensor([data.graph.cascades[c].label for c in split.train], dtype=torch.float64)
        model.heads.init_output_bias(log_popularity(labels).mean().item())
    return model


def train_epoch(model: CTCPModel, data: PreparedData, program: list[Window], optimizer) -> float:
    model.train()
    store = data.fresh_store(model.config.d, model.config.torch_dtype)
    total, count = 0.0, 0
    for w in program:
        store, results = run_replay(store, model.evolution, w.plan)
        pred, _ = model(w, results)
        loss = msle_loss(pred, w.labels)
        if not torch.isfinite(loss):
            raise TrainingDivergence(f"loss became {loss.item()} on a batch ending with cascade {w.cascades[-1]}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        total += loss.item() * len(w.cascades)
        count += len(w.cascades)
        store = store.detach()
    return total / count


def train(config: ModelConfig, graph, split: DatasetSplit,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Adam with early stopping on validation MSLE."""
    data = _as_data(graph)
    if not split.train:
        raise DataError("empty training split")
    model = build_model(config, data, split)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    program = data.program(list(split.train), config.batch_size, model)
    monitor = list(split.val)
    if not monitor:
        log.warning("empty validation split; early stopping monitors the training loss")

    best = math.inf
    best_epoch = 0
    best_state = None
    bad = 0
    history = []
    stopped = False
    started = time.perf_counter()
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        train_loss = train_epoch(model, data, program, optimizer)
        val = evaluate(model, data, monitor).report.msle if monitor else train_loss
        if not math.isfinite(val):
            raise TrainingDivergence(f"validation MSLE became {val} at epoch {epoch}")
        record = {"epoch": epoch, "train_loss": train_loss, "val_msle": val,
                  "elapsed": time.perf_counter() - started}
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if val < best:
            best, best_epoch, bad = val, epoch, 0
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        else:
            bad += 1
        if config.stop_train_loss is not None and train_loss < config.stop_train_loss:
            break
        if bad >= config.patience:
            stopped = True
            break
    if config.selection == "best_val" and best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(model, history, best_epoch, best, epoch, stopped, model.state_dict())


def save_checkpoint(out_dir: str | os.PathLike, model: CTCPModel, extra: dict | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), out / MODEL_FILE)
    with open(out / VOCAB_FILE, "w", encoding="utf-8", newline="\n") as fh:
        for u in model.train_users:
            fh.write(u + "\n")
    manifest = {
        "config": model.config.as_dict(),
        "ablations": model.config.ablations,
        "observation_window": model.observation_window,
        "publish_span": list(model.publish_span),
        "parameters": parameter_manifest(model),
        "parameter_count": parameter_count(model),
        "state_hash": state_hash(model),
    }
    manifest.update(extra or {})
    with open(out / MANIFEST_FILE, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return [out / MODEL_FILE, out / VOCAB_FILE, out / MANIFEST_FILE]


def load_checkpoint(in_dir: str | os.PathLike) -> tuple[CTCPModel, dict]:
    src = Path(in_dir)
    for name in (MODEL_FILE, MANIFEST_FILE, VOCAB_FILE):
        if not (src / name).is_file():
            raise DataError(f"checkpoint is missing {name}")
    with open(src / MANIFEST_FILE, encoding="utf-8") as fh:
        manifest = json.load(fh)
    with open(src / VOCAB_FILE, encoding="utf-8") as fh:
        users = [line.rstrip("\n") for line in fh if line.strip()]
    config = ModelConfig.from_mapping(manifest["config"])
    model = CTCPModel(config, users, manifest["observation_window"], tuple(manifest["publish_span"]))
    model.load_state_dict(torch.load(src / MODEL_FILE, weights_only=True))
    return model, manifest


def state_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
