"""The marketplace world: a deterministic event loop joining mobility,
request generation, per-type uniform-price auctions, seller execution, and
the learning bidders.

Step anatomy (every millisecond tick):

1. due events fire (window deliveries, vehicle spawns/exits, request
   arrivals, execution results, preference resampling);
2. every embodied bidder observes (broadcast fields are one step stale) and
   decides submit/backoff plus a price for each pipeline request;
3. one auction round per commodity type clears; winners are placed with the
   cheapest feasible seller, losers rebid once or become final losses;
4. backoff costs accrue and requests whose deadline passed expire;
5. sellers execute FIFO work within their per-step capacity and post
   next-step prices from their backlog;
6. each bidder's step utility settles into its wealth (ruin resets to the
   initial endowment and abandons the pipeline) and into its learning signal.

Everything random flows through named substreams of one master seed, so a
run is a pure function of its configuration.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .agent import (AgentHyper, MoodyBidder, Observation, StepFacts, make_arch,
                    MODE_ADAPTIVE, MODE_CONTINUOUS, MODE_META)
from .baselines import (ALGO_DRACO2, ALGO_MOODY, ALGO_RANDOM, ALGOS,
                        PRETRAINABLE, PopulationModel, make_bidder)
from .market import (SERVICE_CLASSES, Bid, CommodityType, Request, Seller,
                     assign_to_seller, available_slots, rebid_allowed,
                     run_auction, update_seller_prices)
from .meta import Coordinator
from .rewards import (SYSTEM_BIDDER, BidderAccount, MetricsWriter, PreferenceVector,
                      extrinsic_reward, jain_fairness, offloading_failure_rate,
                      sample_preferences, update_budget, utilization_beta)
from .simcore import (COVERAGE_RADIUS_M, EventQueue, RngStreams, SimClock,
                      TrafficLight, VehicleTrack, spawn_vehicles, transmission_delay)

log = logging.getLogger(__name__)

# event kinds
EV_WINDOW = "window-delivery"
EV_SPAWN = "vehicle-spawn"
EV_EXIT = "vehicle-exit"
EV_ARRIVAL = "request-arrival"
EV_RESULT = "execution-result"
EV_PREFS = "preference-resample"

PHASE_TRAIN = "train"
PHASE_TEST = "test"


@dataclass
class WorldConfig:
    """Everything a run depends on. Two runs with equal configs are identical."""

    seed: int = 0
    phase: str = PHASE_TEST
    horizon_steps: int = 20000
    algos: tuple[str, ...] = ("moody", "moody", "moody", "moody", "moody", "moody")
    type_names: tuple[str, ...] = ("F1", "F2")
    seller_capacities: tuple[float, ...] = (5.0, 5.0)
    seller_extra_delay: tuple[int, ...] = (0, 0)
    seller_base_price: float = 1.0
    vehicle_mean_interarrival_ms: float = 1000.0
    vehicle_speed_mps: float = 30.0 / 3.6
    light_green_ms: int = 15000
    initial_wealth: float = 100.0
    kappa_range: tuple[float, float] = (0.5, 1.2)
    unit_jitter: tuple[float, float] = (1.0, 1.2)
    arrival_jitter: tuple[float, float] = (0.9, 1.1)
    pref_resample_mean_steps: float = 5000.0
    fixed_prefs: Optional[tuple[float, float, float, float, float, float]] = None
    max_rebids: int = 1
    window_steps: int = 2000
    v_scale: float = 1.0
    q_scale: float = 1.0
    audit: bool = True
    hyper: AgentHyper = field(default_factory=AgentHyper)

    def __post_init__(self):
        if self.phase not in (PHASE_TRAIN, PHASE_TEST):
            raise ValueError(f"unknown phase {self.phase!r}")
        for a in self.algos:
            if a not in ALGOS:
                raise ValueError(f"unknown bidder kind {a!r}")
        if len(self.seller_capacities) != len(self.seller_extra_delay):
            raise ValueError("seller capacity/delay lists differ in length")
        for name in self.type_names:
            if name not in SERVICE_CLASSES:
                raise ValueError(f"unknown commodity type {name!r}")
        if self.horizon_steps <= 0:
            raise ValueError("horizon must be positive")


@dataclass
class BidderState:
    """World-side ledger for one bidder."""

    bidder: Any
    account: BidderAccount
    pipeline: list[Request] = field(default_factory=list)
    track: Optional[VehicleTrack] = None
    binding_gen: int = 0
    # window accumulators
    w_success: int = 0
    w_final_loss: int = 0
    w_wins: int = 0
    w_rebids: int = 0
    w_payment: float = 0.0
    w_utility: float = 0.0
    w_re_sum: float = 0.0
    w_re_n: int = 0
    # run totals
    created: int = 0
    successes: int = 0
    final_losses: int = 0
    wins: int = 0
    rebids: int = 0
    last_ofr: float = 0.0

    def reset_window(self) -> None:
        self.w_success = self.w_final_loss = self.w_wins = self.w_rebids = 0
        self.w_payment = self.w_utility = self.w_re_sum = 0.0
        self.w_re_n = 0


@dataclass
class RunResult:
    config: WorldConfig
    metrics: MetricsWriter
    training_rows: list[dict]
    report: dict
    checkpoint_params: Optional[dict[str, np.ndarray]]
    steps_trained: int
    # per-agent snapshots from a baseline pretraining run (no coordinator)
    population_params: Optional[list[dict[str, np.ndarray]]] = None


class World:
    def __init__(self, config: WorldConfig,
                 generic_params: Optional[dict[str, np.ndarray]] = None,
                 generic_steps_trained: int = 0,
                 baseline_models: Optional[dict[str, PopulationModel]] = None):
        self.cfg = config
        self.rng = RngStreams(config.seed)
        self.clock = SimClock()
        self.trace: list[tuple[int, int, str]] = []
        self.queue = EventQueue(self.clock, trace=self._trace_event if config.audit else None)
        self.types: list[CommodityType] = [SERVICE_CLASSES[n] for n in config.type_names]
        self.sellers = [Seller(i, cap, config.seller_base_price, delay)
                        for i, (cap, delay) in enumerate(zip(config.seller_capacities,
                                                             config.seller_extra_delay))]
        self.light = TrafficLight(config.light_green_ms)
        self.tracks = spawn_vehicles(self.rng.stream("mobility"),
                                     config.vehicle_mean_interarrival_ms,
                                     config.vehicle_speed_mps, self.light,
                                     config.horizon_steps)
        self.rng_requests = self.rng.stream("requests")
        self.rng_ties = self.rng.stream("auction-ties")

        self.coordinator: Optional[Coordinator] = None
        self.training_rows: list[dict] = []
        self.baseline_models = baseline_models or {}
        for kind, model in self.baseline_models.items():
            if kind not in PRETRAINABLE:
                raise ValueError(f"bidder kind {kind!r} takes no pretrained model")
            if model.algo != kind:
                raise ValueError(f"pretrained model for {kind!r} was trained as "
                                 f"{model.algo!r}")
            if not model.params_by_agent:
                raise ValueError(f"pretrained model for {kind!r} is empty")
        self.pretraining = False
        algos = config.algos
        if config.phase == PHASE_TRAIN:
            if ALGO_MOODY in algos:
                # meta-training of the shared generic model: every seat learns
                # the full stack under the coordinator
                algos = tuple(ALGO_MOODY for _ in config.algos)
                hyper = config.hyper.replace(mode=MODE_META,
                                             window_steps=config.window_steps)
                arch = make_arch(len(self.types), hyper)
                init = self.rng.child("learning-init", 0)
                from . import nn
                theta0 = nn.init_module_params(arch, init)
                self.coordinator = Coordinator(arch, theta0)
            else:
                # baseline pretraining: each seat learns for itself over the
                # whole horizon, no coordinator, no shared model
                self.pretraining = True
                hyper = config.hyper.replace(mode=MODE_CONTINUOUS,
                                             window_steps=config.window_steps,
                                             continuous_until=config.horizon_steps)
        else:
            hyper = config.hyper.replace(mode=MODE_ADAPTIVE, window_steps=config.window_steps)

        self.states: list[BidderState] = []
        for agent_id, algo in enumerate(algos):
            kappa = float(self.rng.child("learning-init", 1000 + agent_id)
                          .uniform(*config.kappa_range))
            valuations = {ct.name: kappa * ct.resource_units * config.v_scale
                          for ct in self.types}
            prefs = (PreferenceVector(*config.fixed_prefs)
                     if config.fixed_prefs is not None else None)
            # parameter provenance: moody seats share the generic model,
            # baseline seats load their own pretrained cohort when one is
            # given and otherwise start from scratch
            if algo == ALGO_MOODY:
                initial = (self.coordinator.share() if self.coordinator is not None
                           else generic_params)
                start_steps = generic_steps_trained
            elif algo in self.baseline_models:
                model = self.baseline_models[algo]
                initial = model.params_for(agent_id)
                start_steps = model.steps_trained
            else:
                initial = None
                start_steps = 0
            bidder = make_bidder(
                algo, agent_id, self.types, self.rng, config.initial_wealth,
                hyper=hyper,
                initial_params=initial,
                start_steps_trained=start_steps,
                prefs=prefs,
                coordinator=self.coordinator,
                on_handoff=self.training_rows.append)
            account = BidderAccount(agent_id, config.initial_wealth, valuations)
            self.states.append(BidderState(bidder, account))

        # binding and request bookkeeping
        self.waiting: deque[int] = deque(range(len(self.states)))
        self.active_tracks: dict[int, VehicleTrack] = {}
        self.agent_of_track: dict[int, int] = {}
        self.next_request_id = 0
        # admitted work awaiting a result: request_id -> (agent, type name, valuation, deadline)
        self.pending_exec: dict[int, tuple[int, str, float, int]] = {}

        # broadcast snapshot seen by bidders (always one step stale)
        self.snap_origin = -1
        self.snap_beta = 0.0
        self.snap_bound = 0
        self.snap_clearing = {ct.name: 0.0 for ct in self.types}

        # window + audit accumulators
        self.w_beta_sum = 0.0
        self.w_loadvar_sum = 0.0
        self.w_vehicles_sum = 0.0
        self.w_bound_sum = 0.0
        self.w_bids = 0
        self.w_clearing_sum = {ct.name: 0.0 for ct in self.types}
        self.w_clearing_n = {ct.name: 0 for ct in self.types}
        self.audit = {"capacity_violations": 0, "causality_violations": 0,
                      "overbids": 0, "late_pipeline": 0, "win_rejected": 0}
        self.step_util = np.zeros(len(self.states))
        self.pending_window: dict[int, tuple[Optional[float], float]] = {}

        for idx, tr in enumerate(self.tracks):
            self.queue.schedule(tr.spawn_step, EV_SPAWN, idx)
            self.queue.schedule(tr.exit_step, EV_EXIT, idx)
        if config.window_steps < config.horizon_steps:
            self.queue.schedule(config.window_steps, EV_WINDOW, None)
        # preferences drift at deployment and during baseline pretraining
        # (meta-training resamples at inner-loop handoffs instead); the
        # single-objective baseline keeps its fixed scalarization throughout
        if ((config.phase == PHASE_TEST or self.pretraining)
                and config.pref_resample_mean_steps > 0
                and config.fixed_prefs is None):
            for st in self.states:
                if st.bidder.algo != ALGO_DRACO2:
                    first = 1 + int(st.bidder.pref_rng.exponential(
                        config.pref_resample_mean_steps))
                    self.queue.schedule(first, EV_PREFS, st.bidder.agent_id)

    # -- helpers --------------------------------------------------------------

    @property
    def bidders(self):
        return [st.bidder for st in self.states]

    def _trace_event(self, event) -> None:
        self.trace.append((event.step, event.seq, event.kind))

    def _bind(self, agent_id: int, track_idx: int) -> None:
        st = self.states[agent_id]
        st.track = self.active_tracks[track_idx]
        st.binding_gen += 1
        self.agent_of_track[track_idx] = agent_id
        st.bidder.on_bind()
        now = self.clock.now
        for ct in self.types:
            phase = 1 + int(self.rng_requests.integers(0, ct.period_steps))
            self.queue.schedule(now + phase, EV_ARRIVAL,
                                (agent_id, ct.name, st.binding_gen))

    def _unbind(self, agent_id: int) -> None:
        st = self.states[agent_id]
        if st.track is not None:
            self.agent_of_track.pop(st.track.vehicle_id, None)
        st.track = None
        self.waiting.append(agent_id)

    def _try_bind_waiting(self) -> None:
        if not self.waiting:
            return
        for idx in sorted(self.active_tracks):
            if idx not in self.agent_of_track:
                self._bind(self.waiting.popleft(), idx)
                if not self.waiting:
                    return

    def _final_loss(self, st: BidderState, req: Request, remove: bool = True) -> None:
        """A request leaves the system unserved: charge c and settle counters."""
        cost = self.states[req.bidder_id].account.valuation(req.ctype.name)
        self.step_util[req.bidder_id] -= st.bidder.prefs.w_bid_loss * cost
        st.w_final_loss += 1
        st.final_losses += 1
        if remove and req in st.pipeline:
            st.pipeline.remove(req)

    def _distance(self, st: BidderState) -> float:
        if st.track is not None and st.track.in_system(self.clock.now):
            return st.track.distance_m(self.clock.now)
        return COVERAGE_RADIUS_M

    # -- event dispatch ---------------------------------------------------------

    def _dispatch(self, ev) -> None:
        t = self.clock.now
        if ev.kind == EV_SPAWN:
            self.active_tracks[ev.payload] = self.tracks[ev.payload]
            self._try_bind_waiting()
        elif ev.kind == EV_EXIT:
            idx = ev.payload
            agent_id = self.agent_of_track.get(idx)
            self.active_tracks.pop(idx, None)
            if agent_id is not None:
                st = self.states[agent_id]
                for req in list(st.pipeline):
                    self._final_loss(st, req)
                st.pipeline.clear()
                self._unbind(agent_id)
                self._try_bind_waiting()
        elif ev.kind == EV_ARRIVAL:
            agent_id, type_name, gen = ev.payload
            st = self.states[agent_id]
            if st.track is None or st.binding_gen != gen:
                return  # the embodiment that requested this cadence is gone
            ct = SERVICE_CLASSES[type_name]
            req = Request(self.next_request_id, agent_id, ct, t, t + ct.deadline_steps)
            self.next_request_id += 1
            st.pipeline.append(req)
            st.created += 1
            lo, hi = self.cfg.arrival_jitter
            gap = max(1, int(round(ct.period_steps * self.rng_requests.uniform(lo, hi))))
            self.queue.schedule(t + gap, EV_ARRIVAL, (agent_id, type_name, gen))
        elif ev.kind == EV_RESULT:
            agent_id, request_id, success, type_name, valuation = ev.payload
            st = self.states[agent_id]
            self.pending_exec.pop(request_id, None)
            if success:
                st.w_success += 1
                st.successes += 1
            else:
                self.step_util[agent_id] -= st.bidder.prefs.w_bid_loss * valuation
                st.w_final_loss += 1
                st.final_losses += 1
        elif ev.kind == EV_PREFS:
            st = self.states[ev.payload]
            st.bidder.prefs = sample_preferences(st.bidder.pref_rng)
            gap = max(1, int(round(st.bidder.pref_rng.exponential(
                self.cfg.pref_resample_mean_steps))))
            self.queue.schedule(t + gap, EV_PREFS, ev.payload)
        elif ev.kind == EV_WINDOW:
            self._deliver_window(t)
            if t + self.cfg.window_steps <= self.cfg.horizon_steps:
                self.queue.schedule(t + self.cfg.window_steps, EV_WINDOW, None)
        else:  # pragma: no cover - defensive
            raise RuntimeError(f"unknown event kind {ev.kind!r}")

    # -- window delivery --------------------------------------------------------

    def _deliver_window(self, t: int) -> None:
        W = self.cfg.window_steps
        widx = t // W
        payments = [st.w_payment for st in self.states]
        fairness = jain_fairness(payments)
        m = self.metrics
        agg_losses = sum(st.w_final_loss for st in self.states)
        agg_resolved = agg_losses + sum(st.w_success for st in self.states)

        for st in self.states:
            b = st.bidder
            resolved = st.w_success + st.w_final_loss
            ofr = offloading_failure_rate(st.w_final_loss, resolved)
            fresh = ofr is not None
            if fresh:
                st.last_ofr = ofr
            pred_loss = b.on_window(t, -st.last_ofr, fairness)
            if st.track is not None:
                self.pending_window[b.agent_id] = (-st.last_ofr, fairness)
            bid_label = str(b.agent_id)
            if fresh:
                m.add(t, widx, bid_label, b.algo, "ofr", ofr)
            m.add(t, widx, bid_label, b.algo, "wins", st.w_wins)
            m.add(t, widx, bid_label, b.algo, "losses", st.w_final_loss)
            m.add(t, widx, bid_label, b.algo, "resolved", resolved)
            m.add(t, widx, bid_label, b.algo, "rebids", st.w_rebids)
            m.add(t, widx, bid_label, b.algo, "utility", st.w_utility)
            if st.w_re_n:
                m.add(t, widx, bid_label, b.algo, "re_mean", st.w_re_sum / st.w_re_n)
            m.add(t, widx, bid_label, b.algo, "budget", st.account.budget)
            m.add(t, widx, bid_label, b.algo, "payments", st.w_payment)
            m.add(t, widx, bid_label, b.algo, "budget_resets", st.account.resets)
            m.add(t, widx, bid_label, b.algo, "retrain_events", b.retrain_events)
            if pred_loss is not None:
                m.add(t, widx, bid_label, b.algo, "credit_loss", pred_loss)
            st.reset_window()

        m.add(t, widx, SYSTEM_BIDDER, "system", "fairness", fairness)
        m.add(t, widx, SYSTEM_BIDDER, "system", "beta_mean", self.w_beta_sum / W)
        m.add(t, widx, SYSTEM_BIDDER, "system", "load_balance_var", self.w_loadvar_sum / W)
        m.add(t, widx, SYSTEM_BIDDER, "system", "vehicles_mean", self.w_vehicles_sum / W)
        m.add(t, widx, SYSTEM_BIDDER, "system", "bound_mean", self.w_bound_sum / W)
        m.add(t, widx, SYSTEM_BIDDER, "system", "bids_mean", self.w_bids / W)
        if agg_resolved:
            m.add(t, widx, SYSTEM_BIDDER, "system", "ofr", agg_losses / agg_resolved)
        for ct in self.types:
            if self.w_clearing_n[ct.name]:
                m.add(t, widx, SYSTEM_BIDDER, "system", f"clearing_{ct.name}_mean",
                      self.w_clearing_sum[ct.name] / self.w_clearing_n[ct.name])
        self.w_beta_sum = self.w_loadvar_sum = 0.0
        self.w_vehicles_sum = self.w_bound_sum = 0.0
        self.w_bids = 0
        self.w_clearing_sum = {ct.name: 0.0 for ct in self.types}
        self.w_clearing_n = {ct.name: 0 for ct in self.types}

    # -- the step ----------------------------------------------------------------

    def _step(self) -> None:
        t = self.clock.now
        cfg = self.cfg
        self.step_util[:] = 0.0
        self.pending_window.clear()

        for ev in self.queue.pop_due(t):
            self._dispatch(ev)

        # observation + decision for every embodied bidder
        if cfg.audit and self.snap_origin != t - 1:
            self.audit["causality_violations"] += 1
        decisions_by_agent: dict[int, list] = {}
        bids_by_type: dict[str, list[Bid]] = {ct.name: [] for ct in self.types}
        submitted_ids: set[int] = set()
        for st in self.states:
            if st.track is None:
                continue
            b = st.bidder
            if cfg.audit:
                for req in st.pipeline:
                    if req.deadline_step < t:
                        self.audit["late_pipeline"] += 1
            obs = Observation(step=t, pipeline=list(st.pipeline),
                              budget=st.account.budget,
                              valuations=dict(st.account.valuations),
                              bidder_count=self.snap_bound,
                              system_beta=self.snap_beta,
                              clearing_prices=dict(self.snap_clearing),
                              prev_reward=b.last_reward,
                              origin_step=self.snap_origin)
            decisions = b.decide(obs)
            decisions_by_agent[b.agent_id] = decisions
            spent = 0.0
            for d in decisions:
                if d.alpha == 1:
                    spent += d.price
                    bids_by_type[d.request.ctype.name].append(Bid(d.request, d.price))
                    submitted_ids.add(d.request.request_id)
            if cfg.audit and spent > st.account.budget + 1e-6:
                self.audit["overbids"] += 1

        # one uniform-price round per type
        clearing_now = {}
        for ct in self.types:
            bids = bids_by_type[ct.name]
            n = available_slots(self.sellers, ct)
            result = run_auction(bids, n, tie_rng=self.rng_ties)
            clearing_now[ct.name] = result.clearing_price
            self.w_bids += len(bids)
            if bids:
                self.w_clearing_sum[ct.name] += result.clearing_price
                self.w_clearing_n[ct.name] += 1
            for bid in result.winners:
                req = bid.request
                st = self.states[req.bidder_id]
                lo, hi = cfg.unit_jitter
                units = req.ctype.resource_units * self.rng_requests.uniform(lo, hi)
                up_delay = transmission_delay(req.ctype.uplink_mbit, self._distance(st))
                seller = assign_to_seller(self.sellers, req, units, up_delay, t)
                if seller is None:
                    self.audit["win_rejected"] += 1
                    self._lost_round(st, req, t)
                    continue
                seller.admit(req, units, up_delay, t)
                pay = result.clearing_price
                v = st.account.valuation(req.ctype.name)
                self.step_util[req.bidder_id] += v - pay
                st.w_payment += pay
                st.w_wins += 1
                st.wins += 1
                st.pipeline.remove(req)
                self.pending_exec[req.request_id] = (req.bidder_id, req.ctype.name, v,
                                                     req.deadline_step)
            for bid in result.losers:
                self._lost_round(self.states[bid.request.bidder_id], bid.request, t)

        # backoff costs, then deadline expiry
        for st in self.states:
            if st.track is None:
                continue
            for req in list(st.pipeline):
                if req.request_id not in submitted_ids:
                    ttd = max(1, req.steps_to_deadline(t))
                    q = st.account.valuation(req.ctype.name) / ttd * cfg.q_scale
                    self.step_util[req.bidder_id] -= st.bidder.prefs.w_backoff * q
                if req.deadline_step <= t:
                    self._final_loss(st, req)

        # sellers execute and post tomorrow's prices
        for seller in self.sellers:
            completed, dropped = seller.execute_step(t)
            for job in completed:
                rid = job.request.request_id
                if rid not in self.pending_exec:
                    continue
                agent_id, tname, v, deadline = self.pending_exec[rid]
                ct = SERVICE_CLASSES[tname]
                down = transmission_delay(ct.downlink_mbit,
                                          self._distance(self.states[agent_id]))
                at = t + max(1, down + seller.extra_delay_steps)
                self.queue.schedule(at, EV_RESULT, (agent_id, rid, True, tname, v))
            for job in dropped:
                rid = job.request.request_id
                if rid not in self.pending_exec:
                    continue
                agent_id, tname, v, deadline = self.pending_exec[rid]
                at = t + 1 + seller.extra_delay_steps
                self.queue.schedule(at, EV_RESULT, (agent_id, rid, False, tname, v))
        update_seller_prices(self.sellers)
        total_cap = sum(s.capacity for s in self.sellers)
        beta = utilization_beta(sum(s.last_inservice for s in self.sellers), total_cap)
        utils = [s.last_inservice / s.capacity for s in self.sellers]
        self.w_beta_sum += beta
        self.w_loadvar_sum += float(np.var(utils))
        self.w_vehicles_sum += len(self.active_tracks)
        bound = sum(1 for st in self.states if st.track is not None)
        self.w_bound_sum += bound

        # settle wealth + learning for the step
        for st in self.states:
            u = float(self.step_util[st.bidder.agent_id])
            st.w_utility += u
            reward_u = u
            if st.track is None:
                if u:
                    update_budget(st.account, u)
                continue
            reset = update_budget(st.account, u)
            if reset:
                for req in list(st.pipeline):
                    cost = st.account.valuation(req.ctype.name)
                    reward_u -= st.bidder.prefs.w_bid_loss * cost
                    st.w_final_loss += 1
                    st.final_losses += 1
                st.pipeline.clear()
            neg_ofr, fairness = self.pending_window.get(st.bidder.agent_id, (None, None))
            st.bidder.finish_step(StepFacts(t, reward_u, beta, neg_ofr, fairness))
            st.w_re_sum += extrinsic_reward(st.bidder.prefs, reward_u, beta,
                                            neg_ofr, fairness)
            st.w_re_n += 1

        # broadcast snapshot for step t+1
        self.snap_origin = t
        self.snap_beta = beta
        self.snap_bound = bound
        self.snap_clearing = clearing_now

    def _lost_round(self, st: BidderState, req: Request, t: int) -> None:
        if rebid_allowed(req, t, self.cfg.max_rebids):
            req.rebid_count += 1
            st.w_rebids += 1
            st.rebids += 1
        else:
            self._final_loss(st, req)

    # -- run ----------------------------------------------------------------------

    def run(self, stop_after_epochs: Optional[int] = None) -> RunResult:
        self.metrics = MetricsWriter()
        cfg = self.cfg
        if stop_after_epochs == 0:
            return self._result()
        learners = [st.bidder for st in self.states if isinstance(st.bidder, MoodyBidder)]
        stopped_early = False
        while self.clock.now < cfg.horizon_steps:
            self._step()
            self.clock.advance()
            if (stop_after_epochs is not None and learners
                    and min(b.inner_loops for b in learners) >= stop_after_epochs):
                stopped_early = True
                break
        # the boundary that coincides with the horizon still gets reported
        if (not stopped_early and cfg.horizon_steps >= cfg.window_steps
                and cfg.horizon_steps % cfg.window_steps == 0):
            self._deliver_window(cfg.horizon_steps)
        return self._result()

    def _result(self) -> RunResult:
        pending = sum(len(st.pipeline) for st in self.states) + len(self.pending_exec)
        per_bidder = []
        for st in self.states:
            per_bidder.append({
                "agent": st.bidder.agent_id,
                "algo": st.bidder.algo,
                "created": st.created,
                "successes": st.successes,
                "final_losses": st.final_losses,
                "wins": st.wins,
                "rebids": st.rebids,
                "budget": st.account.budget,
                "budget_resets": st.account.resets,
                "retrain_events": st.bidder.retrain_events,
            })
        created = sum(st.created for st in self.states)
        resolved = sum(st.successes + st.final_losses for st in self.states)
        self.audit["capacity_violations"] = sum(s.capacity_violations for s in self.sellers)
        report = {
            "seed": self.cfg.seed,
            "phase": self.cfg.phase,
            "steps": self.clock.now,
            "created": created,
            "resolved": resolved,
            "pending_at_end": pending,
            "conservation_ok": created == resolved + pending,
            "vehicles_total": len(self.tracks),
            "audit": dict(self.audit),
            "per_bidder": per_bidder,
        }
        checkpoint = self.coordinator.share() if self.coordinator is not None else None
        learners = [st.bidder for st in self.states if isinstance(st.bidder, MoodyBidder)]
        steps_trained = int(np.mean([b.fsp.steps for b in learners])) if learners else 0
        population = [b.snapshot() for b in learners] if self.pretraining else None
        return RunResult(self.cfg, self.metrics, self.training_rows, report,
                         checkpoint, steps_trained, population)
