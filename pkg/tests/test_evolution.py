import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ctcp.diffusion_data import DataError, DiffusionEvent
from ctcp.evolution import (
    ROLES, DynamicStateStore, EvolutionModule, MessageEncoder, StateQuery, StateUpdater, compute_messages,
    default_frequencies, encode_time, plan_replay, process_events, run_replay, update_states,
)


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def random_events(rng, n, n_users, n_casc, t_max=1000.0, integer_times=True):
    times = np.sort(rng.uniform(0, t_max, size=n))
    if integer_times:
        times = np.floor(times)
    events = []
    for t in times:
        u, v = rng.choice(n_users, size=2, replace=False)
        events.append(DiffusionEvent(float(t), f"c{rng.integers(n_casc)}", f"u{v}", f"u{u}"))
    events.sort(key=lambda e: e.sort_key)
    return events


def fresh(events, d, n_users=None, n_casc=None):
    users = sorted({e.source_user for e in events} | {e.target_user for e in events})
    cascades = sorted({e.cascade for e in events})
    return DynamicStateStore.zeros(users, cascades, d)


def max_diff(a, b):
    return max((getattr(a, r) - getattr(b, r)).abs().max().item() for r in ROLES)


# time encoding

def test_encode_time_examples():
    assert torch.equal(encode_time(0.0, torch.tensor([0.3, 5.0, 1e-9])), torch.ones(3))
    assert encode_time(1.0, torch.tensor([math.pi])).item() == pytest.approx(-1.0, abs=1e-15)
    assert abs(encode_time(0.5, torch.tensor([math.pi])).item()) < 1e-12


def test_encode_time_rejects_negative():
    with pytest.raises(ValueError):
        encode_time(-1e-3, torch.tensor([1.0]))
    with pytest.raises(ValueError):
        encode_time(torch.tensor([1.0, -2.0]), torch.tensor([1.0]))


def test_default_frequencies_span_nine_decades():
    w = default_frequencies(16)
    assert w[0] == 1.0
    assert w[-1] == pytest.approx(1e-9, rel=1e-12)
    ratios = w[1:] / w[:-1]
    assert np.allclose(ratios, 10 ** (-9 / 15))
    assert default_frequencies(1).tolist() == [1.0]


@given(st.floats(0, 1e8), st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8))
def test_time_features_bounded(dt, freqs):
    f = encode_time(dt, torch.tensor(freqs))
    assert f.shape == (len(freqs),)
    assert bool(((f >= -1) & (f <= 1)).all())


# messages

def _zero(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


def test_first_event_message_with_zero_weights():
    evo = EvolutionModule(d=3, n_f=4)
    for r in ROLES:
        _zero(evo.message_encoders[r])
    ev = DiffusionEvent(5.0, "c", "v", "u")
    store = DynamicStateStore.zeros(["u", "v"], ["c"], 3)
    for m in compute_messages(ev, store, evo):
        assert torch.equal(m, torch.full((3,), 0.5))


def test_message_hand_computed():
    # d = 1, n_f = 1: input [s_o, s_r, s_c, cos(w dt)]
    enc = MessageEncoder(1, 1)
    with torch.no_grad():
        enc.linear.weight.copy_(torch.tensor([[0.5, -1.0, 2.0, 0.25]]))
        enc.linear.bias.fill_(-0.1)
    s_o, s_r, s_c, w, dt = 0.3, 0.7, -0.2, 0.01, 40.0
    expected = _sigmoid(0.5 * s_o - 1.0 * s_r + 2.0 * s_c + 0.25 * math.cos(w * dt) - 0.1)
    f = encode_time(dt, torch.tensor([w]))
    got = enc(torch.tensor([s_o]), torch.tensor([s_r]), torch.tensor([s_c]), f)
    assert got.item() == pytest.approx(expected, abs=1e-14)


def test_message_uses_concat_order():
    d = 2
    enc = MessageEncoder(d, 1)
    with torch.no_grad():
        enc.linear.weight.zero_()
        enc.linear.bias.zero_()
        enc.linear.weight[0, 0] = 1.0  # first block: originator state
        enc.linear.weight[1, 2 * d] = 1.0  # third block: cascade state
    out = enc(torch.tensor([2.0, 0.0]), torch.tensor([5.0, 5.0]), torch.tensor([-3.0, 0.0]), torch.ones(1))
    assert out.tolist() == pytest.approx([_sigmoid(2.0), _sigmoid(-3.0)], abs=1e-15)


def test_each_message_uses_its_own_delta_t():
    evo = EvolutionModule(d=2, n_f=2)
    users, cascades = ["a", "b", "x"], ["c1", "c2"]
    store = DynamicStateStore.zeros(users, cascades, 2)
    # a originates at 10; b receives at 30; then a -> b in c2 at 100
    for ev in (DiffusionEvent(10.0, "c1", "x", "a"), DiffusionEvent(30.0, "c1", "b", "x"),):
        store = update_states(ev, store, compute_messages(ev, store, evo), evo)
    ev = DiffusionEvent(100.0, "c2", "b", "a")
    ui, vi, ci = store.user_index["a"], store.user_index["b"], store.cascade_index["c2"]
    assert store.delta_t("originator", ui, 100.0) == 90.0
    assert store.delta_t("receiver", vi, 100.0) == 70.0
    assert store.delta_t("cascade", ci, 100.0) == 0.0
    m = compute_messages(ev, store, evo)
    s = (store.originator[ui], store.receiver[vi], store.cascade[ci])
    for role, dt, got in zip(ROLES, (90.0, 70.0, 0.0), m):
        f = evo.time_encoders[role](torch.tensor(dt))
        assert torch.allclose(evo.message_encoders[role](*s, f), got, atol=0, rtol=0)


def test_same_timestamp_second_event_sees_zero_delta():
    evo = EvolutionModule(d=2, n_f=2)
    store = DynamicStateStore.zeros(["a", "b", "c"], ["k"], 2)
    ev1 = DiffusionEvent(50.0, "k", "b", "a")
    store = update_states(ev1, store, compute_messages(ev1, store, evo), evo)
    assert store.delta_t("originator", store.user_index["a"], 50.0) == 0.0
    assert store.delta_t("cascade", 0, 50.0) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=9, max_size=9), st.floats(0, 1e7))
def test_messages_bounded(values, dt):
    torch.manual_seed(0)
    evo = EvolutionModule(d=3, n_f=2)
    s = torch.tensor(values).view(3, 3)
    for m in evo.messages(s[0], s[1], s[2], [torch.tensor(dt)] * 3):
        assert bool(((m >= 0) & (m <= 1)).all())


# gated update

def test_zero_parameters_halve_the_state():
    cell = StateUpdater(4)
    _zero(cell)
    x = torch.tensor([1.0, -2.0, 0.5, 3.0])
    assert torch.equal(cell(x, torch.rand(4)), 0.5 * x)


def test_updater_hand_computed():
    cell = StateUpdater(1)
    vals = dict(weight_is=0.4, weight_im=-0.3, weight_fs=0.2, weight_fm=0.9, weight_m=-0.6, weight_s=1.1,
                bias_i=0.05, bias_f=-0.2, bias_s=0.3, bias=0.1)
    with torch.no_grad():
        for k, v in vals.items():
            getattr(cell, k).fill_(v)
    s, m = 0.6, 0.8
    g_i = _sigmoid(0.4 * s - 0.3 * m + 0.05)
    g_f = _sigmoid(0.2 * s + 0.9 * m - 0.2)
    cand = math.tanh(-0.6 * m + g_i * (1.1 * s + 0.3) + 0.1)
    expected = g_f * cand + (1 - g_f) * s
    assert cell(torch.tensor([s]), torch.tensor([m])).item() == pytest.approx(expected, abs=1e-14)


def test_role_parameters_are_independent():
    evo = EvolutionModule(d=2, n_f=2)
    ids = {id(p) for r in ROLES for p in evo.updaters[r].parameters()}
    assert len(ids) == 3 * len(list(evo.updaters["cascade"].parameters()))
    assert not torch.equal(evo.message_encoders["originator"].linear.weight,
                           evo.message_encoders["receiver"].linear.weight)


# store and processing

def test_zero_initialization():
    store = DynamicStateStore.zeros(["a", "b"], ["c"], 5)
    for role, ent in (("originator", "a"), ("receiver", "b"), ("cascade", "c")):
        assert torch.equal(store.state(role, ent), torch.zeros(5))


def test_update_is_local():
    rng = np.random.default_rng(0)
    torch.manual_seed(0)
    evo = EvolutionModule(d=3, n_f=3)
    events = random_events(rng, 20, 10, 3)
    store = process_events(events, fresh(events, 3), evo)
    ev = DiffusionEvent(2000.0, "c0", "u1", "u0")
    after = update_states(ev, store, compute_messages(ev, store, evo), evo)
    ui, vi, ci = store.user_index["u0"], store.user_index["u1"], store.cascade_index["c0"]
    for role, touched in (("originator", ui), ("receiver", vi), ("cascade", ci)):
        before_t, after_t = store.table(role), after.table(role)
        keep = [i for i in range(before_t.shape[0]) if i != touched]
        assert torch.equal(before_t[keep], after_t[keep])
        assert not torch.equal(before_t[touched], after_t[touched])
    # the receiver role of u0 is a different slot and stays put
    assert torch.equal(store.receiver[ui], after.receiver[ui])


def test_processing_is_deterministic():
    rng = np.random.default_rng(1)
    torch.manual_seed(0)
    evo = EvolutionModule(d=3, n_f=3)
    events = random_events(rng, 50, 12, 4)
    a = process_events(events, fresh(events, 3), evo)
    b = process_events(events, fresh(events, 3), evo)
    assert max_diff(a, b) == 0.0


def test_empty_event_list():
    evo = EvolutionModule(d=2, n_f=2)
    store = DynamicStateStore.zeros(["a", "b"], ["c"], 2)
    for batched in (True, False):
        out = process_events([], store, evo, batched=batched)
        assert max_diff(out, store) == 0.0 and out.cursor == 0


def test_disjoint_events_batched():
    torch.manual_seed(3)
    evo = EvolutionModule(d=4, n_f=3)
    events = [DiffusionEvent(1.0, "c1", "b", "a"), DiffusionEvent(1.0, "c2", "d", "c"),
              DiffusionEvent(1.0, "c3", "f", "e")]
    events.sort(key=lambda e: e.sort_key)
    store = fresh(events, 4)
    plan = plan_replay(store, *store.encode(events))
    assert len(plan.levels) == 1
    seq = process_events(events, store, evo, batched=False)
    bat = process_events(events, store, evo, batched=True)
    assert max_diff(seq, bat) < 1e-5


def test_shared_user_falls_back_to_sequential():
    torch.manual_seed(4)
    evo = EvolutionModule(d=4, n_f=3)
    events = [DiffusionEvent(1.0, "c1", "b", "a"), DiffusionEvent(1.0, "c2", "c", "a")]
    store = fresh(events, 4)
    plan = plan_replay(store, *store.encode(events))
    assert len(plan.levels) == 2
    seq = process_events(events, store, evo, batched=False)
    bat = process_events(events, store, evo, batched=True)
    assert max_diff(seq, bat) < 1e-12


def test_out_of_order_rejected():
    evo = EvolutionModule(d=2, n_f=2)
    events = [DiffusionEvent(5.0, "c", "b", "a"), DiffusionEvent(1.0, "c", "a", "b")]
    store = DynamicStateStore.zeros(["a", "b"], ["c"], 2)
    with pytest.raises(DataError):
        process_events(events, store, evo)
    later = process_events(events[:1], store, evo)
    with pytest.raises(DataError):
        process_events(events[1:], later, evo)


def test_dimension_mismatch():
    evo = EvolutionModule(d=3, n_f=2)
    store = DynamicStateStore.zeros(["a", "b"], ["c"], 2)
    with pytest.raises(ValueError):
        compute_messages(DiffusionEvent(1.0, "c", "b", "a"), store, evo)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 59))
def test_prefix_replay_causality(seed, k):
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    evo = EvolutionModule(d=3, n_f=2)
    events = random_events(rng, 60, 8, 3, t_max=200.0)
    store = fresh(events, 3)
    full_plan = plan_replay(store, *store.encode(events),
                            queries=[StateQuery(k, 0, np.arange(len(store.user_index)))])
    _, (res,) = run_replay(store, evo, full_plan)
    prefix = process_events(events[:k], store, evo, batched=False)
    assert torch.allclose(res.originator, prefix.originator, atol=1e-12, rtol=0)
    assert torch.allclose(res.receiver, prefix.receiver, atol=1e-12, rtol=0)
    assert torch.allclose(res.cascade, prefix.cascade[0], atol=1e-12, rtol=0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_last_update_never_decreases(seed):
    rng = np.random.default_rng(seed)
    evo = EvolutionModule(d=2, n_f=2)
    events = random_events(rng, 40, 6, 2, t_max=100.0)
    store = fresh(events, 2)
    prev = {r: store.last_update[r].copy() for r in ROLES}
    for i in range(0, 40, 7):
        store = process_events(events[i:i + 7], store, evo)
        for r in ROLES:
            old, new = prev[r], store.last_update[r]
            assert np.all(np.isnan(old) | (new >= old))
            prev[r] = new.copy()
    assert store.cursor == 40


def test_no_gradient_mode():
    evo = EvolutionModule(d=2, n_f=2)
    events = [DiffusionEvent(1.0, "c", "b", "a")]
    store = DynamicStateStore.zeros(["a", "b"], ["c"], 2)
    out = process_events(events, store, evo, update_gradients=False)
    assert not out.originator.requires_grad
    assert process_events(events, store, evo).originator.requires_grad


def test_without_evolution_states_stay_zero():
    rng = np.random.default_rng(2)
    events = random_events(rng, 30, 6, 2)
    store = fresh(events, 3)
    out, _ = run_replay(store, None, plan_replay(store, *store.encode(events)))
    assert max_diff(out, store) == 0.0
    assert out.clock == events[-1].time and out.cursor == 30


def test_store_save_load(tmp_path):
    rng = np.random.default_rng(5)
    evo = EvolutionModule(d=3, n_f=2)
    events = random_events(rng, 25, 7, 3)
    store = process_events(events, fresh(events, 3), evo, update_gradients=False)
    store.save(tmp_path)
    back = DynamicStateStore.load(tmp_path)
    assert max_diff(store, back) == 0.0
    assert back.cursor == 25 and back.clock == store.clock
    for r in ROLES:
        assert np.array_equal(back.last_update[r], store.last_update[r], equal_nan=True)
    # resuming mid-stream from the checkpoint matches an uninterrupted run
    more = [DiffusionEvent(5000.0, "c0", "u1", "u2")]
    a = process_events(more, store, evo, update_gradients=False)
    b = process_events(more, back, evo, update_gradients=False)
    assert max_diff(a, b) == 0.0
