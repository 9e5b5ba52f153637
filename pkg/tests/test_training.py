import dataclasses
import json
import math

import numpy as np
import pytest
import torch

import ctcp.training as training
from ctcp.diffusion_data import ConfigError, DataError, RawCascade, generate_synthetic, preprocess, split
from ctcp.training import (
    ModelConfig, PreparedData, TrainingDivergence, build_model, build_schedule, evaluate, load_checkpoint,
    parameter_count, parameter_manifest, read_config_file, save_checkpoint, state_hash, train,
    write_config_file,
)

SMALL = dict(d=4, n_f=3, batch_size=8, max_epochs=2, learning_rate=1e-3)


@pytest.fixture(scope="module")
def fixture_data():
    g = preprocess(generate_synthetic(30, 120, 5), 86400.0)
    return PreparedData(g), split(g, 0)


def star(cid, root, publish, n, t_o=100.0, extra=0):
    parts = [(root, f"{cid}_{i}", float(5 * i)) for i in range(n)]
    parts += [(root, f"{cid}_late{i}", t_o + i) for i in range(extra)]
    return RawCascade(cid, root, publish, len(parts), parts)


# configuration

def test_defaults():
    c = ModelConfig()
    assert (c.d, c.n_t, c.n_f, c.lam, c.learning_rate, c.batch_size, c.patience) == (64, 20, 16, 0.1, 1e-4, 50, 15)
    assert c.ablations == []


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(lam=1.2)
    with pytest.raises(ConfigError):
        ModelConfig(d=0)
    with pytest.raises(ConfigError):
        ModelConfig.from_mapping({"nope": 1})
    with pytest.raises(ConfigError):
        ModelConfig.from_mapping({"d": "sixty"})
    with pytest.raises(ConfigError):
        ModelConfig.from_mapping({"ablation": "without_everything"})


def test_config_mapping_and_file(tmp_path):
    c = ModelConfig.from_mapping({"lambda": "0.5", "d": "8", "ablation": "without_static,without_structural",
                                  "stop_train_loss": "none"})
    assert (c.lam, c.d, c.without_static, c.without_structural, c.without_evolution) == (0.5, 8, True, True, False)
    path = tmp_path / "cfg.txt"
    write_config_file(c, path)
    assert ModelConfig.from_mapping(read_config_file(path)) == c
    path.write_text("# comment only\nd = 12  # trailing\n\n")
    assert ModelConfig.from_mapping(read_config_file(path)).d == 12
    path.write_text("d 12\n")
    with pytest.raises(ConfigError):
        read_config_file(path)


# schedule

def test_schedule_merges_in_time_order():
    g = preprocess([star("a", "r1", 0.0, 10), star("b", "r2", 80.0, 10)], t_o=100.0)
    s = build_schedule(g, ["a", "b"])
    assert s.deadlines() == ["a", "b"]
    assert sum(1 for k, _ in s.items if k == "event") == len(g.events)
    # each deadline follows all observed events of its cascade
    pos = {x: i for i, (k, x) in enumerate(s.items) if k == "deadline"}
    for i, (kind, x) in enumerate(s.items):
        if kind == "event":
            c = g.events[x].cascade
            assert i < pos[c]
    # events of b after a's deadline (t = 100) appear after the marker
    after = [g.events[x].cascade for k, x in s.items[pos["a"] + 1:] if k == "event"]
    assert after and set(after) == {"b"}
    assert build_schedule(g, ["a", "b"]) == s


def test_split_schedule_keeps_other_events():
    g = preprocess([star("a", "r1", 0.0, 10), star("b", "r2", 20.0, 10)], t_o=100.0)
    s = build_schedule(g, ["a"])
    assert s.deadlines() == ["a"]
    assert {g.events[x].cascade for k, x in s.items if k == "event"} == {"a", "b"}


def test_post_window_events_not_in_stream():
    g = preprocess([star("a", "r1", 0.0, 10, extra=5)], t_o=100.0)
    s = build_schedule(g, ["a"])
    assert sum(1 for k, _ in s.items if k == "event") == 10
    assert s.items[-1] == ("deadline", "a")


def test_deadline_sorts_before_event_at_same_time():
    # b's first event lands exactly on a's deadline at t = 100
    a = star("a", "r1", 0.0, 10)
    b = RawCascade("b", "r2", 90.0, 10, [("r2", f"b{i}", 10.0 + i) for i in range(10)])
    g = preprocess([a, b], t_o=100.0)
    s = build_schedule(g, ["a", "b"])
    i = s.items.index(("deadline", "a"))
    nxt = s.items[i + 1]
    assert nxt[0] == "event" and g.events[nxt[1]].time == 100.0


def test_schedule_errors():
    g = preprocess([star("a", "r1", 0.0, 10)], t_o=100.0)
    with pytest.raises(DataError):
        build_schedule(g, ["zzz"])


# ablations

def _model(data, sp, **kw):
    return build_model(ModelConfig(**{**SMALL, **kw}), data, sp)


def test_ablation_parameter_accounting(fixture_data):
    data, sp = fixture_data
    full = parameter_manifest(_model(data, sp))
    n_full = parameter_count(_model(data, sp))

    no_el = _model(data, sp, without_evolution=True)
    diff = set(full) - set(parameter_manifest(no_el))
    assert diff == {n for n in full if n.startswith("evolution.")}
    assert any("message_encoders" in n for n in diff) and any("updaters" in n for n in diff)
    assert set(parameter_manifest(no_el)) <= set(full)

    no_se = _model(data, sp, without_static=True)
    assert set(full) - set(parameter_manifest(no_se)) == {"representation.static_table.embedding.weight"}

    no_sl = parameter_manifest(_model(data, sp, without_structural=True))
    removed = set(full) - set(no_sl)
    assert removed == {n for n in full if n.split(".")[1] in (
        "static_dag_forward", "static_dag_reverse", "static_structure",
        "dynamic_dag_forward", "dynamic_dag_reverse", "dynamic_structure")}
    d = SMALL["d"]
    assert full["representation.static_fusion.hidden.weight"] == [d, 2 * d]
    assert no_sl["representation.static_fusion.hidden.weight"] == [d, d]
    assert full["representation.dynamic_fusion.merge.weight"] == [d, 3 * d]
    assert no_sl["representation.dynamic_fusion.merge.weight"] == [d, 2 * d]

    for kw in ("without_evolution", "without_static", "without_structural"):
        assert parameter_count(_model(data, sp, **{kw: True})) < n_full


def test_without_static_ignores_table_contents(fixture_data):
    data, sp = fixture_data
    model = _model(data, sp, without_static=True)
    assert model.representation.static_table is None
    a = evaluate(model, data, list(sp.test)).predictions
    # the full model does depend on its table
    full = _model(data, sp)
    before = evaluate(full, data, list(sp.test)).predictions
    with torch.no_grad():
        full.representation.static_table.embedding.weight.mul_(3.0)
    assert not np.allclose(before, evaluate(full, data, list(sp.test)).predictions)
    assert np.array_equal(a, evaluate(model, data, list(sp.test)).predictions)


def test_without_evolution_feeds_zero_states(fixture_data):
    data, sp = fixture_data
    model = _model(data, sp, without_evolution=True)
    res = evaluate(model, data, list(sp.val), embeddings=True)
    w = data.program(list(sp.val), model.config.eval_batch_size, model)[0]
    zeros = torch.zeros
    d = SMALL["d"]
    n = len(w.node_users)
    with torch.no_grad():
        emb = model.representation(w.batch, w.node_users, zeros(n, d), zeros(n, d), zeros(len(w.cascades), d))
    assert np.allclose(res.embeddings["dynamic"][:len(w.cascades)], emb["dynamic"].numpy(), atol=0)


# training and evaluation

def test_epoch_one_loss_deterministic(fixture_data):
    data, sp = fixture_data
    cfg = ModelConfig(**{**SMALL, "max_epochs": 1})
    a = train(cfg, data, sp)
    b = train(cfg, data, sp)
    assert a.log[0]["train_loss"] == b.log[0]["train_loss"]
    assert state_hash(a.model) == state_hash(b.model)


def test_training_log_fields(fixture_data):
    data, sp = fixture_data
    seen = []
    res = train(ModelConfig(**SMALL), data, sp, on_epoch=seen.append)
    assert [r["epoch"] for r in res.log] == [1, 2] and seen == res.log
    assert set(res.log[0]) == {"epoch", "train_loss", "val_msle", "elapsed"}
    assert res.best_val_msle == min(r["val_msle"] for r in res.log)


class _FakeEval:
    def __init__(self, msle):
        self.report = type("R", (), {"msle": msle})()


def _patched_train(monkeypatch, data, sp, vals, **kw):
    it = iter(vals)
    monkeypatch.setattr(training, "train_epoch", lambda *a, **k: 1.0)
    monkeypatch.setattr(training, "evaluate", lambda *a, **k: _FakeEval(next(it)))
    return train(ModelConfig(**{**SMALL, "max_epochs": 200, **kw}), data, sp)


def test_patience_strict_improvement(monkeypatch, fixture_data):
    data, sp = fixture_data
    res = _patched_train(monkeypatch, data, sp, [10.0 - 0.1 * k for k in range(30)] + [100.0] * 100,
                         patience=15)
    assert res.epochs_run == 45 and res.stopped_early
    assert res.best_epoch == 30


def test_plateau_counts_as_no_improvement(monkeypatch, fixture_data):
    data, sp = fixture_data
    res = _patched_train(monkeypatch, data, sp, [5.0] * 100, patience=3)
    assert res.epochs_run == 4 and res.best_epoch == 1


def test_divergence_raises(monkeypatch, fixture_data):
    data, sp = fixture_data
    monkeypatch.setattr(training, "msle_loss", lambda p, l: (p * math.nan).sum())
    with pytest.raises(TrainingDivergence):
        train(ModelConfig(**SMALL), data, sp)


def test_empty_train_split(fixture_data):
    data, sp = fixture_data
    with pytest.raises(DataError):
        train(ModelConfig(**SMALL), data, dataclasses.replace(sp, train=()))


def test_evaluate_twice_identical_and_pure(fixture_data):
    data, sp = fixture_data
    model = _model(data, sp)
    h = state_hash(model)
    a = evaluate(model, data, list(sp.test), buckets=True)
    b = evaluate(model, data, list(sp.test), buckets=True)
    assert json.dumps(a.report.as_dict()) == json.dumps(b.report.as_dict())
    assert state_hash(model) == h
    assert sum(x["n"] for x in a.report.buckets) == a.report.n == len(sp.test)


def test_eval_batch_size_does_not_change_predictions(fixture_data):
    data, sp = fixture_data
    ids = list(sp.train)
    model = _model(data, sp)
    a = evaluate(model, data, ids).predictions
    model.config = dataclasses.replace(model.config, eval_batch_size=3)
    b = evaluate(model, data, ids).predictions
    assert np.allclose(a, b, atol=1e-12)


def test_checkpoint_roundtrip(tmp_path, fixture_data):
    data, sp = fixture_data
    res = train(ModelConfig(**{**SMALL, "max_epochs": 1, "without_structural": True}), data, sp)
    save_checkpoint(tmp_path, res.model, {"best_val_msle": res.best_val_msle})
    model, manifest = load_checkpoint(tmp_path)
    assert manifest["ablations"] == ["without_structural"]
    assert manifest["state_hash"] == state_hash(model) == state_hash(res.model)
    assert manifest["parameter_count"] == parameter_count(model)
    before = evaluate(res.model, data, list(sp.test)).predictions
    assert np.array_equal(before, evaluate(model, data, list(sp.test)).predictions)
    evaluate(model, data, list(sp.test))
    assert state_hash(load_checkpoint(tmp_path)[0]) == manifest["state_hash"]


def test_checkpoint_missing_files(tmp_path):
    with pytest.raises(DataError):
        load_checkpoint(tmp_path)


def test_observation_window_mismatch(fixture_data):
    data, sp = fixture_data
    model = _model(data, sp)
    other = PreparedData(preprocess(generate_synthetic(10, 50, 1, observation_window=3600.0), 3600.0))
    with pytest.raises(DataError):
        evaluate(model, other, list(other.cascade_ids))


def test_output_bias_starts_at_mean_target(fixture_data):
    data, sp = fixture_data
    m = _model(data, sp)
    mean = float(np.mean([math.log2(data.graph.cascades[c].label + 1) for c in sp.train]))
    assert m.heads.f_static.out.bias.item() == pytest.approx(mean)
    assert _model(data, sp, init_output_bias=False).heads.f_static.out.bias.item() != pytest.approx(mean)
