"""Handcrafted-feature baseline: five cascade-graph features and an MLP regressor."""

from __future__ import annotations

import math
import warnings
from collections import deque
from dataclasses import astuple, dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .diffusion_data import CascadeRecord
from .prediction import msle_loss

FEATURE_NAMES = ("edge_count", "max_depth", "avg_depth", "breadth", "publish_time")


@dataclass(frozen=True)
class FeatureVector:
    edge_count: float
    max_depth: float
    avg_depth: float
    breadth: float
    publish_time: float

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)


def extract_features(record: CascadeRecord, publish_span: tuple[float, float] | None = None) -> FeatureVector:
    """Features of the observed cascade graph; depth is hop distance from the root."""
    children: dict[str, set] = {}
    for src, tgt in record.edges():
        children.setdefault(src, set()).add(tgt)
    depth = {record.root_user: 0}
    queue = deque([record.root_user])
    while queue:
        node = queue.popleft()
        for child in children.get(node, ()):
            if child not in depth:
                depth[child] = depth[node] + 1
                queue.append(child)
    levels = np.bincount(np.fromiter(depth.values(), dtype=np.int64))
    n_edges = sum(len(c) for c in children.values())

    pub = record.publish_time
    if publish_span is not None:
        lo, hi = publish_span
        pub = 0.0 if hi <= lo else min(max((pub - lo) / (hi - lo), 0.0), 1.0)
    return FeatureVector(
        edge_count=float(n_edges),
        max_depth=float(max(depth.values())),
        avg_depth=float(np.mean(list(depth.values()))),
        breadth=float(levels.max()),
        publish_time=float(pub),
    )


def feature_matrix(records: Sequence[CascadeRecord], publish_span=None) -> np.ndarray:
    return np.stack([extract_features(r, publish_span).as_array() for r in records])


def write_feature_table(path, cascade_ids: Sequence[str], features: np.ndarray, labels=None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        header = ["cascade", *FEATURE_NAMES] + (["label"] if labels is not None else [])
        fh.write("\t".join(header) + "\n")
        for i, c in enumerate(cascade_ids):
            row = [c] + [repr(float(x)) for x in features[i]]
            if labels is not None:
                row.append(str(int(labels[i])))
            fh.write("\t".join(row) + "\n")


class Standardizer:
    """Zero-mean, unit-variance columns; constant columns are dropped."""

    def fit(self, X: np.ndarray) -> "Standardizer":
        self.mean = X.mean(axis=0)
        self.scale = X.std(axis=0)
        self.keep = self.scale > 0
        if not self.keep.all():
            dropped = [FEATURE_NAMES[i] if X.shape[1] == len(FEATURE_NAMES) else str(i)
                       for i in np.nonzero(~self.keep)[0]]
            warnings.warn(f"dropping constant feature columns: {', '.join(dropped)}")
        return self

    def transform(self, X: np.ndarray) -> np.ndarray:
        return ((X - self.mean) / np.where(self.keep, self.scale, 1.0))[:, self.keep]


@dataclass
class BaselineConfig:
    hidden: int = 64
    learning_rate: float = 1e-3
    batch_size: int = 50
    patience: int = 15
    max_epochs: int = 500
    seed: int = 0


class FeatureMLP(nn.Module):
    def __init__(self, n_in: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(n_in, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, 1),
        )

    def forward(self, x):
        return self.net(x).squeeze(-1)


def baseline_fit_predict(train_X, train_y, test_X, val_X=None, val_y=None,
                         config: BaselineConfig = BaselineConfig()) -> np.ndarray:
    """Fit on standardized features with MSLE and early stopping, predict ``log2(y + 1)``."""
    train_X = np.asarray(train_X, dtype=np.float64)
    if len(train_X) < 1:
        raise ValueError("need at least one training example")
    scaler = Standardizer().fit(train_X)
    gen = torch.Generator().manual_seed(config.seed)
    torch.manual_seed(config.seed)
    Xtr = torch.from_numpy(scaler.transform(train_X))
    ytr = torch.as_tensor(np.asarray(train_y, dtype=np.float64))
    Xte = torch.from_numpy(scaler.transform(np.asarray(test_X, dtype=np.float64)))
    if val_X is not None and len(val_X):
        Xva = torch.from_numpy(scaler.transform(np.asarray(val_X, dtype=np.float64)))
        yva = torch.as_tensor(np.asarray(val_y, dtype=np.float64))
    else:
        Xva, yva = Xtr, ytr

    model = FeatureMLP(Xtr.shape[1], config.hidden).double()
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    best, best_state, bad = math.inf, None, 0
    for _ in range(config.max_epochs):
        model.train()
        perm = torch.randperm(len(Xtr), generator=gen)
        for b in range(0, len(perm), config.batch_size):
            idx = perm[b:b + config.batch_size]
            loss = msle_loss(model(Xtr[idx]), ytr[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        model.eval()
        with torch.no_grad():
            val = msle_loss(model(Xva), yva).item()
        if val < best:
            best, bad = val, 0
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
        else:
            bad += 1
            if bad >= config.patience:
                break
    model.load_state_dict(best_state)
    with torch.no_grad():
        return model(Xte).numpy()
