"""Learning bidder: encoding, memory, triggers, FSP mixing, shots, handoffs."""

import numpy as np
import pytest

from edgemarket import nn
from edgemarket.agent import (
    MODE_ADAPTIVE,
    MODE_FROZEN,
    MODE_META,
    AgentHyper,
    AgentMemory,
    FspController,
    MemoryEntry,
    MoodyBidder,
    Observation,
    RetrainMonitor,
    StateEncoder,
    bid_dim,
    credit_in_dim,
    make_arch,
    state_dim,
)
from edgemarket.market import SERVICE_CLASSES, Request
from edgemarket.rewards import PreferenceVector

F1, F2 = SERVICE_CLASSES["F1"], SERVICE_CLASSES["F2"]
TYPES = [F1, F2]


def mk_obs(step, pipeline=(), budget=100.0, bidder_count=6, beta=0.5,
           clearing=None, prev_reward=0.0):
    return Observation(step=step, pipeline=list(pipeline), budget=budget,
                       valuations={"F1": 10.0, "F2": 8.0},
                       bidder_count=bidder_count, system_beta=beta,
                       clearing_prices=clearing or {}, prev_reward=prev_reward,
                       origin_step=step - 1)


def mk_bidder(seed=0, **hyper_kw) -> MoodyBidder:
    hp = AgentHyper(**hyper_kw)
    b = MoodyBidder(0, "moody", TYPES, hp,
                    explore_rng=np.random.default_rng(seed),
                    pref_rng=np.random.default_rng(seed + 1000),
                    budget_norm=100.0,
                    prefs=PreferenceVector(0.5, 0.5, 0.5, 0.5, 0.5, 0.5))
    b.init_params(np.random.default_rng(seed + 2000))
    return b


# -- state encoding --------------------------------------------------------------


def test_state_vector_hand_values():
    enc = StateEncoder(TYPES, AgentHyper(), budget_norm=100.0)
    reqs = [Request(0, 0, F1, 0, 150), Request(1, 0, F1, 0, 180)]
    s, phi = enc.encode(mk_obs(100, reqs, budget=100.0, bidder_count=8, beta=0.3,
                               clearing={"F1": 10.0}, prev_reward=-5.0))
    assert s.shape == (state_dim(2),)
    assert s[0] == pytest.approx(0.5)     # two F1 requests / 4
    assert s[1] == pytest.approx(0.5)     # nearest deadline 50 of 100
    assert s[2] == pytest.approx(1.0)     # 160 units / 160
    assert s[3] == 0.0 and s[4] == 1.0 and s[5] == 0.0  # empty F2 slot
    assert s[6] == pytest.approx(0.5)     # 8 bidders / 16
    assert s[7] == pytest.approx(0.3)     # system utilization passthrough
    assert s[8] == pytest.approx(1.0)     # budget / norm
    assert s[9] == pytest.approx(0.1)     # F1 clearing price / norm
    assert s[10] == 0.0
    assert s[11] == -3.0                  # reward clipped into [-3, 3]


def test_feature_stack_is_newest_first_zero_padded():
    enc = StateEncoder(TYPES, AgentHyper(stack_depth=3), budget_norm=100.0)
    s1, phi1 = enc.encode(mk_obs(0, beta=0.1))
    d = enc.dim
    assert np.array_equal(phi1[:d], s1)
    assert np.all(phi1[d:] == 0.0)        # cold start: no history yet
    s2, phi2 = enc.encode(mk_obs(1, beta=0.9))
    assert np.array_equal(phi2[:d], s2)
    assert np.array_equal(phi2[d:2 * d], s1)
    enc.reset()
    _, phi3 = enc.encode(mk_obs(2, beta=0.4))
    assert np.all(phi3[d:] == 0.0)        # reset drops temporal context


def test_bid_features_hand_values():
    enc = StateEncoder(TYPES, AgentHyper(), budget_norm=100.0)
    req = Request(0, 0, F1, 0, 150)
    req.rebid_count = 1
    f = enc.bid_features(req, now=100)
    assert f.tolist() == [1.0, 0.0, 0.5, 0.5, 1.0]
    g = enc.bid_features(Request(1, 0, F2, 0, 600), now=100)
    assert g.tolist() == [0.0, 1.0, 1.0, 0.5, 0.0]


def test_arch_dimensions_follow_type_count():
    arch = make_arch(2, AgentHyper(stack_depth=4, segments=50))
    assert arch.phi_dim == state_dim(2) * 4
    assert arch.bid_dim == bid_dim(2) == 5
    assert arch.credit_in_dim == credit_in_dim(2) == state_dim(2) + 6
    assert arch.segments == 50


# -- memory ---------------------------------------------------------------------


def entry(step, next_ok=True):
    return MemoryEntry(step=step, state=np.zeros(2), phi=np.zeros(4),
                       bid_feats=np.zeros((0, 3)), alpha=np.zeros(0, dtype=int),
                       level=np.zeros(0, dtype=int),
                       level_masks=np.zeros((0, 2), dtype=bool),
                       forced=np.zeros(0, dtype=bool), source_br=True,
                       action_summary=np.zeros(2),
                       phi_next=np.zeros(4) if next_ok else None, next_ok=next_ok)


def test_memory_capacity_is_bounded():
    mem = AgentMemory(capacity=3)
    for t in range(5):
        mem.add(entry(t))
    assert [e.step for e in mem.entries] == [2, 3, 4]
    assert mem.last().step == 4


def test_window_lookup_is_half_open():
    mem = AgentMemory(10)
    for t in range(6):
        mem.add(entry(t))
    assert [e.step for e in mem.in_window(1, 4)] == [1, 2, 3]


def test_completed_filter_excludes_dangling_transitions():
    mem = AgentMemory(10)
    mem.add(entry(0))
    mem.add(entry(1, next_ok=False))
    mem.add(entry(2))
    assert [e.step for e in mem.completed_since(0)] == [0, 2]
    assert [e.step for e in mem.completed_since(1)] == [2]


# -- retraining trigger ----------------------------------------------------------


@pytest.mark.parametrize("losses,want", [
    ([1.0, 2.0, 3.0], [True, True, True]),
    ([3.0, 2.0, 1.0], [True, False, False]),
    ([2.0, 2.0, 2.0], [True, False, False]),
    ([1.0, 1.0, 5.0, 1.0], [True, False, True, False]),
])
def test_trigger_patterns(losses, want):
    mon = RetrainMonitor(history=10)
    assert [mon.check_and_push(l) for l in losses] == want


def test_trigger_compares_against_the_mean_not_the_last():
    mon = RetrainMonitor(history=10)
    mon.check_and_push(5.0)
    mon.check_and_push(1.0)
    # mean(5, 1) = 3: a current loss of 2 is above the LAST loss but below
    # the mean, so the mean rule must stay quiet
    assert not mon.check_and_push(2.0)


def test_trigger_history_is_a_ring_of_n():
    mon = RetrainMonitor(history=10)
    for l in [100.0, 100.0] + [0.0] * 10:
        mon.check_and_push(l)
    # the two ancient spikes fell out of the ring; mean is now 0
    assert mon.check_and_push(0.5)


# -- fictitious self-play mixing ----------------------------------------------------


def test_eta_schedule_values_and_monotonicity():
    fsp = FspController(tau_steps=20000.0)
    assert fsp.eta() == pytest.approx(0.1)
    fsp.steps = 20000
    assert fsp.eta() == pytest.approx(1.0 - 0.9 / np.e)
    etas = []
    fsp.steps = 0
    for _ in range(50):
        etas.append(fsp.eta())
        fsp.steps += 1713
    assert all(b >= a for a, b in zip(etas, etas[1:]))
    assert etas[-1] > 0.98


def test_mixing_frequency_matches_eta(rng):
    fsp = FspController(tau_steps=20000.0, start_step=0)
    picks = sum(fsp.pick_best_response(rng) for _ in range(20000))
    assert picks / 20000 == pytest.approx(0.1, abs=0.01)
    fsp.steps = 200000
    picks = sum(fsp.pick_best_response(rng) for _ in range(2000))
    assert picks == 2000  # eta has saturated


# -- acting ---------------------------------------------------------------------------


def test_budget_masks_unaffordable_price_levels():
    b = mk_bidder(seed=3)
    reqs = [Request(0, 0, F1, 0, 150), Request(1, 0, F1, 0, 180)]
    for t in range(40):
        decisions = b.decide(mk_obs(t, reqs, budget=3.0))
        spent = sum(d.price for d in decisions)
        assert spent <= 3.0 + 1e-9
        for d in decisions:
            assert d.price <= 3.0 + 1e-9


def test_zero_budget_forces_backoff():
    b = mk_bidder(seed=4)
    decisions = b.decide(mk_obs(0, [Request(0, 0, F1, 0, 100)], budget=0.0))
    assert decisions[0].alpha == 0 and decisions[0].forced
    assert b.memory.last().forced.all()


def test_decisions_are_deterministic_across_twin_agents():
    tr1, tr2 = [], []
    for tr in (tr1, tr2):
        b = mk_bidder(seed=7)
        for t in range(30):
            reqs = [Request(t, 0, F1, t, t + 100)]
            decs = b.decide(mk_obs(t, reqs, budget=50.0))
            tr.append((decs[0].alpha, decs[0].level))
            b.finish_step(_facts(t))
    assert tr1 == tr2


def _facts(step, utility=1.0, beta=0.5):
    from edgemarket.agent import StepFacts
    return StepFacts(step, utility, beta)


# -- shots and cadence -------------------------------------------------------------


def drive(b, steps, budget=50.0, start=0):
    for t in range(start, start + steps):
        reqs = [Request(t, 0, F1, t, t + 100)]
        b.decide(mk_obs(t, reqs, budget=budget))
        b.finish_step(_facts(t))


def test_cadence_runs_one_shot_per_window_of_steps():
    b = mk_bidder(seed=1, shot_steps=10, tau_shots=3, mode=MODE_META)
    drive(b, 9)
    assert b.shots_done == 0
    drive(b, 1, start=9)
    assert b.shots_done == 1
    drive(b, 10, start=10)
    assert b.shots_done == 2


def test_meta_mode_hands_off_every_tau_shots():
    rows = []
    b = mk_bidder(seed=1, shot_steps=5, tau_shots=3, mode=MODE_META)
    b.on_handoff = rows.append
    drive(b, 5 * 3 * 2)
    assert b.shots_done == 6
    assert [r["epoch"] for r in rows] == [1, 2]
    assert all(np.isfinite(r["rl_reward"]) for r in rows)


def test_frozen_mode_never_trains():
    b = mk_bidder(seed=2, shot_steps=5, mode=MODE_FROZEN)
    before = b.snapshot()
    drive(b, 40)
    assert b.shots_done == 0
    for k in nn.MODULE_KEYS:
        assert np.array_equal(b.params[k], before[k])


def test_shot_updates_every_enabled_module():
    b = mk_bidder(seed=5, shot_steps=8, mode=MODE_META)
    before = b.snapshot()
    drive(b, 9)
    assert b.shots_done == 1
    for k in ("actor_critic", "supervised", "curiosity"):
        assert not np.array_equal(b.params[k], before[k]), k
    assert np.array_equal(b.params["credit"], before["credit"])  # window-driven


def test_empty_batch_is_a_noop():
    b = mk_bidder(seed=6)
    assert b.run_shot([]) is None
    assert b.shots_done == 0


def test_explicit_batches_do_not_disturb_the_cadence_floor():
    b = mk_bidder(seed=6, shot_steps=10, mode=MODE_META)
    drive(b, 5)
    floor = b._train_floor_step
    since = b.steps_since_update
    batch = b.memory.completed_since(0)
    assert batch
    b.run_shot(batch)
    assert b._train_floor_step == floor
    assert b.steps_since_update == since
    assert b.shots_done == 1


def test_handoff_bundle_is_rescaled_update_direction():
    captured = {}

    class Stub:
        def submit_gradient(self, agent_id, bundle):
            captured.update(bundle)
            return {k: np.zeros_like(v) for k, v in b.params.items()}

    b = mk_bidder(seed=8, shot_steps=5, tau_shots=1, mode=MODE_META)
    b.coordinator = Stub()
    drive(b, 5)
    grads = dict(b.last_grads)  # snapshot before hand_off clears them
    assert not grads  # cleared: handoff happened inside finish_step
    assert set(captured) == set(nn.MODULE_KEYS)
    assert not np.any(captured["credit"])  # no window yet -> zero segment
    # after the handoff the agent restarted from the coordinator's reply
    for k in nn.MODULE_KEYS:
        assert np.all(b.params[k] == 0.0)


def test_handoff_resamples_preferences():
    b = mk_bidder(seed=9, shot_steps=5, tau_shots=1, mode=MODE_META)

    class Identity:
        def submit_gradient(self, agent_id, bundle):
            return b.snapshot()

    b.coordinator = Identity()
    p0 = b.prefs
    drive(b, 5)
    assert b.prefs is not p0


def test_clip_bounds_gradient_norm():
    b = mk_bidder(seed=10, clip_norm=2.0)
    g = np.full(16, 10.0)
    clipped = b._clip(g)
    assert np.linalg.norm(clipped) == pytest.approx(2.0)
    small = np.full(16, 0.01)
    assert np.array_equal(b._clip(small), small)


# -- delayed objectives and retraining ------------------------------------------------


def window_bidder(**kw):
    defaults = dict(seed=11, shot_steps=3, window_steps=100, segments=5,
                    mode=MODE_ADAPTIVE, retrain_shots=2)
    defaults.update(kw)
    return mk_bidder(**defaults)


def test_window_prediction_loss_and_retro_labels():
    b = window_bidder()
    drive(b, 100)
    loss = b.on_window(100, neg_ofr=-0.2, fairness=0.9)
    y = b.prefs.w_neg_ofr * -0.2 + b.prefs.w_fairness * 0.9
    assert loss is not None and loss >= 0.0
    assert b.last_credit_loss == loss
    window = b.memory.in_window(0, 100)
    eps = np.array([e.eps for e in window])
    assert not np.allclose(eps, 1.0)          # retro-labeling happened
    segs = 5
    assert np.mean(eps) == pytest.approx(1.0, abs=0.35)  # weights sum to ~nseg
    for e in window:
        assert e.r_i == pytest.approx(e.eps * e.reward + e.lf)


def test_window_without_entries_is_ignored():
    b = window_bidder()
    assert b.on_window(100, -0.1, 0.9) is None
    assert b.retrain_events == 0


def test_cold_start_triggers_burst_of_shot_slices():
    b = window_bidder()          # retrain_shots=2, shot_steps=3
    drive(b, 100)
    shots_before = b.shots_done
    b.on_window(100, -0.2, 0.9)
    assert b.retrain_events == 1
    # burst = last 6 completed entries in two 3-step slices
    assert b.shots_done == shots_before + 2


def test_improving_losses_stop_triggering():
    b = window_bidder(retrain_shots=1)
    drive(b, 100)
    triggers = []
    for i, (no, fa) in enumerate([(-0.5, 0.5), (-0.4, 0.6), (-0.3, 0.7)]):
        before = b.retrain_events
        b.on_window(100, no, fa)
        triggers.append(b.retrain_events > before)
    assert triggers[0]           # cold start always retrains


def test_credit_training_reduces_prediction_loss_on_repeat():
    b = window_bidder(retrain_shots=0)
    drive(b, 100)
    first = b.on_window(100, -0.2, 0.9)
    losses = [b.on_window(100, -0.2, 0.9) for _ in range(20)]
    assert losses[-1] < first


def test_segment_features_carry_preference_weights():
    b = window_bidder()
    drive(b, 100)
    window = b.memory.in_window(0, 100)
    X, seg_of = b._segment_window(window, 100)
    assert X.shape == (5, b.arch.credit_in_dim)
    sdim = b.encoder.dim
    assert np.all(X[:, sdim + 3] == b.prefs.w_neg_ofr)
    assert np.all(X[:, sdim + 4] == b.prefs.w_fairness)
    # every step of the window landed in a segment: activity fraction is 1
    assert np.allclose(X[:, -1], 1.0)
    assert len(seg_of) == len(window)
    assert sorted(set(seg_of)) == [0, 1, 2, 3, 4]


def test_disabled_credit_skips_labels_but_reports_loss():
    b = window_bidder(credit_enabled=False, adaptive_retrain=False)
    drive(b, 100)
    before = b.params["credit"].copy()
    loss = b.on_window(100, -0.2, 0.9)
    assert loss is not None
    assert np.array_equal(b.params["credit"], before)
    assert all(e.eps == 1.0 for e in b.memory.in_window(0, 100))
