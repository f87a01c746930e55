"""Learning bidder: observation encoding, mixed-policy acting, and local training.

One agent drives one bidder. Per step it encodes the five observation groups
(own pipeline summary, auctioneer broadcasts, previous wealth, previous
clearing prices, previous reward) into a stacked feature vector, picks per-bid
submit/backoff and price-level actions from either its best-response policy or
its behavioral clone (fictitious self-play mixing), and stores the transition.
Training happens in shots: one batched update over the transitions gathered
since the previous update. Every `tau` shots the accumulated last-shot
gradients can be handed to a meta coordinator, which returns a refreshed
shared initialization.

Delayed objectives arrive at window boundaries; a recurrent-attention credit
net redistributes the window's rewards over its steps and its prediction loss
drives the adaptive retraining trigger at deployment time.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import nn
from .market import CommodityType, Request
from .rewards import PreferenceVector, extrinsic_reward, sample_preferences

log = logging.getLogger(__name__)

# learning modes
MODE_META = "meta"              # offline training under a coordinator
MODE_ADAPTIVE = "adaptive"      # deployed; retrains only on trigger
MODE_CONTINUOUS = "continuous"  # deployed; trains every shot until a step limit
MODE_FROZEN = "frozen"          # deployed; never trains


@dataclass
class Observation:
    """Everything a bidder may legally see at the top of a step.

    Broadcast fields originate from the previous step (control messages carry a
    one-step delay); `origin_step` records that for the causality audit.
    """

    step: int
    pipeline: list[Request]
    budget: float
    valuations: dict[str, float]
    bidder_count: int
    system_beta: float
    clearing_prices: dict[str, float]
    prev_reward: float
    origin_step: int


@dataclass
class BidDecision:
    request: Request
    alpha: int
    level: int
    price: float
    forced: bool


@dataclass
class StepFacts:
    """End-of-step reward ingredients handed back by the marketplace."""

    step: int
    utility_raw: float
    beta: float
    neg_ofr: Optional[float] = None
    fairness: Optional[float] = None


@dataclass
class MemoryEntry:
    step: int
    state: np.ndarray
    phi: np.ndarray
    bid_feats: np.ndarray
    alpha: np.ndarray
    level: np.ndarray
    level_masks: np.ndarray
    forced: np.ndarray
    source_br: bool
    action_summary: np.ndarray
    reward: float = 0.0       # scaled extrinsic reward
    lf: float = 0.0           # curiosity bonus of the outgoing transition
    eps: float = 1.0          # credit weight (neutral until retro-labeled)
    r_i: float = 0.0
    phi_next: Optional[np.ndarray] = None
    next_ok: bool = False     # true when phi_next is the strictly next step

    @property
    def has_bids(self) -> bool:
        return self.bid_feats.shape[0] > 0


class AgentMemory:
    """Bounded transition store with window lookup for retro-labeling."""

    def __init__(self, capacity: int):
        self.entries: deque[MemoryEntry] = deque(maxlen=capacity)

    def add(self, e: MemoryEntry) -> None:
        self.entries.append(e)

    def last(self) -> Optional[MemoryEntry]:
        return self.entries[-1] if self.entries else None

    def in_window(self, start: int, end: int) -> list[MemoryEntry]:
        return [e for e in self.entries if start <= e.step < end]

    def completed_since(self, step: int) -> list[MemoryEntry]:
        return [e for e in self.entries if e.step >= step and e.next_ok]


class FspController:
    """Anticipatory mixing: act from the best response with rising probability."""

    def __init__(self, tau_steps: float = 20000.0, depth: float = 0.9, start_step: int = 0):
        self.tau_steps = float(tau_steps)
        self.depth = float(depth)
        self.steps = int(start_step)

    def eta(self) -> float:
        return 1.0 - self.depth * math.exp(-self.steps / self.tau_steps)

    def tick(self) -> None:
        self.steps += 1

    def pick_best_response(self, rng: np.random.Generator) -> bool:
        return bool(rng.random() < self.eta())


class RetrainMonitor:
    """Trigger when the current prediction loss exceeds the recent mean.

    An empty history always triggers (cold start). The current loss is pushed
    after the comparison, so a strictly improving loss sequence settles into
    never triggering again.
    """

    def __init__(self, history: int = 10):
        self.losses: deque[float] = deque(maxlen=history)

    def check_and_push(self, loss: float) -> bool:
        trigger = not self.losses or loss > float(np.mean(self.losses))
        self.losses.append(float(loss))
        return trigger


@dataclass
class AgentHyper:
    lr_actor: float = 0.05
    lr_critic: float = 0.02
    lr_sl: float = 0.05
    lr_curiosity: float = 0.005
    lr_credit: float = 0.005
    gamma: float = 0.95
    tau_shots: int = 3
    shot_steps: int = 50
    window_steps: int = 2000
    segments: int = 50
    stack_depth: int = 4
    memory_capacity: int = 4096
    fsp_tau: float = 20000.0
    retrain_history: int = 10
    retrain_shots: int = 1
    reward_scale: float = 0.01   # 1 / initial wealth
    clip_norm: float = 5.0       # global-norm gradient clip (BPTT can explode)
    loss_ceiling: float = 1e6
    curiosity_enabled: bool = True
    credit_enabled: bool = True
    adaptive_retrain: bool = True
    mode: str = MODE_META
    continuous_until: int = 10000

    def replace(self, **changes) -> "AgentHyper":
        return dataclasses.replace(self, **changes)


def state_dim(n_types: int) -> int:
    return 4 * n_types + 4


def bid_dim(n_types: int) -> int:
    return n_types + 3


def credit_in_dim(n_types: int) -> int:
    # mean state + mean action summary + mean reward + the two delayed-objective
    # preference weights (the prediction target is scalarized with them, so the
    # net must see them) + activity fraction
    return state_dim(n_types) + 2 + 1 + 2 + 1


def make_arch(n_types: int, hyper: AgentHyper) -> nn.ArchConfig:
    return nn.ArchConfig(
        phi_dim=state_dim(n_types) * hyper.stack_depth,
        bid_dim=bid_dim(n_types),
        credit_in_dim=credit_in_dim(n_types),
        segments=hyper.segments,
    )


class StateEncoder:
    """Five observation groups -> fixed state vector; last D states -> phi."""

    def __init__(self, type_order: list[CommodityType], hyper: AgentHyper,
                 budget_norm: float):
        self.types = type_order
        self.depth = hyper.stack_depth
        self.budget_norm = budget_norm
        self.dim = state_dim(len(type_order))
        self.stack: deque[np.ndarray] = deque(maxlen=self.depth)

    def reset(self) -> None:
        self.stack.clear()

    def encode(self, obs: Observation) -> tuple[np.ndarray, np.ndarray]:
        K = len(self.types)
        s = np.zeros(self.dim)
        i = 0
        for k, ct in enumerate(self.types):
            mine = [r for r in obs.pipeline if r.ctype.name == ct.name]
            s[i + 0] = min(len(mine), 8) / 4.0
            if mine:
                ttd = min(r.steps_to_deadline(obs.step) for r in mine)
                s[i + 1] = max(0.0, ttd) / ct.deadline_steps
                s[i + 2] = min(sum(r.ctype.resource_units for r in mine) / (2 * ct.resource_units), 2.0)
            else:
                s[i + 1] = 1.0
            i += 3
        s[i] = min(obs.bidder_count, 32) / 16.0
        s[i + 1] = obs.system_beta
        s[i + 2] = min(max(obs.budget / self.budget_norm, 0.0), 3.0)
        i += 3
        for ct in self.types:
            s[i] = min(obs.clearing_prices.get(ct.name, 0.0) / self.budget_norm, 3.0)
            i += 1
        s[i] = float(np.clip(obs.prev_reward, -3.0, 3.0))
        self.stack.append(s)
        phi = np.zeros(self.dim * self.depth)
        for d, past in enumerate(reversed(self.stack)):  # newest first
            phi[d * self.dim:(d + 1) * self.dim] = past
        return s, phi

    def bid_features(self, req: Request, now: int) -> np.ndarray:
        K = len(self.types)
        f = np.zeros(K + 3)
        for k, ct in enumerate(self.types):
            if ct.name == req.ctype.name:
                f[k] = 1.0
        f[K] = max(0, req.steps_to_deadline(now)) / req.ctype.deadline_steps
        f[K + 1] = req.ctype.resource_units / 160.0
        f[K + 2] = float(req.rebid_count)
        return f


class MoodyBidder:
    """Full learning stack: FSP actor-critic + curiosity + credit + retraining.

    Baseline variants reuse this class with modules disabled through
    `AgentHyper`; with everything re-enabled the behavior is bit-identical to
    the full agent, which the test suite checks.
    """

    def __init__(self, agent_id: int, algo: str, type_order: list[CommodityType],
                 hyper: AgentHyper, explore_rng: np.random.Generator,
                 pref_rng: np.random.Generator, budget_norm: float,
                 prefs: Optional[PreferenceVector] = None, start_steps_trained: int = 0):
        self.agent_id = agent_id
        self.algo = algo
        self.hyper = hyper
        self.arch = make_arch(len(type_order), hyper)
        self.policy = nn.PolicyValueNet(self.arch)
        self.behavior = nn.PolicyValueNet(self.arch)
        self.curiosity = nn.CuriosityNet(self.arch)
        self.credit = nn.CreditNet(self.arch)
        self.params: dict[str, np.ndarray] = {}
        self.encoder = StateEncoder(type_order, hyper, budget_norm)
        self.memory = AgentMemory(hyper.memory_capacity)
        self.fsp = FspController(hyper.fsp_tau, start_step=start_steps_trained)
        self.monitor = RetrainMonitor(hyper.retrain_history)
        self.rng = explore_rng
        self.pref_rng = pref_rng
        self.prefs = prefs if prefs is not None else sample_preferences(pref_rng)
        self.coordinator = None          # set by the offline harness
        self.on_handoff: Optional[Callable[[dict], None]] = None

        self.last_reward = 0.0
        self.active_steps = 0
        self.steps_since_update = 0
        self.shots_done = 0
        self.shots_in_loop = 0
        self.inner_loops = 0
        self.retrain_events = 0
        self.updates_rejected = 0
        self.last_grads: dict[str, np.ndarray] = {}
        self.last_credit_loss: Optional[float] = None
        self.loop_rewards: list[float] = []
        self.loop_fwd: list[float] = []
        self.loop_inv: list[float] = []
        self._train_floor_step = 0       # first memory step eligible for the next shot

    # -- parameters ---------------------------------------------------------

    def init_params(self, rng: np.random.Generator) -> None:
        self.params = nn.init_module_params(self.arch, rng)

    def reset_to(self, shared: dict[str, np.ndarray]) -> None:
        self.params = {k: v.copy() for k, v in shared.items()}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def on_bind(self) -> None:
        """A fresh embodiment: temporal context does not carry across the gap."""
        self.encoder.reset()
        self.last_reward = 0.0

    # -- acting ---------------------------------------------------------------

    def price_grid(self, valuation: float) -> np.ndarray:
        L = self.arch.price_levels
        return np.arange(L) * valuation / (L - 1)

    def decide(self, obs: Observation) -> list[BidDecision]:
        state, phi = self.encoder.encode(obs)
        J = len(obs.pipeline)
        bid_feats = np.zeros((J, self.arch.bid_dim))
        masks = np.ones((J, self.arch.price_levels), dtype=bool)
        forced = np.zeros(J, dtype=bool)
        alpha = np.zeros(J, dtype=int)
        level = np.full(J, -1, dtype=int)
        decisions: list[BidDecision] = []

        source_br = True
        if J:
            source_br = self.fsp.pick_best_response(self.rng)
            net = self.policy if source_br else self.behavior
            theta = self.params["actor_critic" if source_br else "supervised"]
            remaining = obs.budget
            for j, req in enumerate(obs.pipeline):
                bid_feats[j] = self.encoder.bid_features(req, obs.step)
                grid = self.price_grid(obs.valuations[req.ctype.name])
                if remaining <= 0.0:
                    forced[j] = True
                    masks[j] = grid <= max(remaining, 0.0)
                    masks[j, 0] = True  # keep the distribution well-formed
                    decisions.append(BidDecision(req, 0, -1, 0.0, True))
                    continue
                masks[j] = grid <= remaining + 1e-9
                a, l = net.sample_actions(theta, phi, bid_feats[j:j + 1],
                                          masks[j:j + 1], forced[j:j + 1], self.rng)
                alpha[j], level[j] = int(a[0]), int(l[0])
                price = float(grid[level[j]]) if alpha[j] == 1 else 0.0
                if alpha[j] == 1:
                    remaining -= price
                decisions.append(BidDecision(req, alpha[j], level[j], price, False))

        submitted = alpha == 1
        summary = np.array([
            float(alpha[~forced].mean()) if np.any(~forced) else 0.0,
            float(level[submitted].mean()) / (self.arch.price_levels - 1) if np.any(submitted) else 0.0,
        ])
        self.memory.add(MemoryEntry(obs.step, state, phi, bid_feats, alpha, level,
                                    masks, forced, source_br, summary))
        return decisions

    # -- per-step learning bookkeeping ---------------------------------------

    def finish_step(self, facts: StepFacts) -> None:
        """Close the step: reward the newest entry, finish the previous
        transition, and run the training cadence for the current mode."""
        entries = self.memory.entries
        cur = entries[-1] if entries and entries[-1].step == facts.step else None
        if cur is not None:
            r = extrinsic_reward(self.prefs, facts.utility_raw * self.hyper.reward_scale,
                                 facts.beta, facts.neg_ofr, facts.fairness)
            cur.reward = r
            cur.r_i = cur.eps * cur.reward + cur.lf
            self.last_reward = r
            if len(entries) >= 2:
                prev = entries[-2]
                if prev.step == facts.step - 1:
                    prev.phi_next = cur.phi
                    prev.next_ok = True
                    if self.hyper.curiosity_enabled:
                        prev.lf = self.curiosity.forward_loss(
                            self.params["curiosity"], prev.phi, prev.action_summary, cur.phi)
                    prev.r_i = prev.eps * prev.reward + prev.lf
        self.fsp.tick()
        self.active_steps += 1
        self.steps_since_update += 1
        if self._training_now(facts.step) and self.steps_since_update >= self.hyper.shot_steps:
            self.run_shot()
            if self.hyper.mode == MODE_META and self.shots_in_loop >= self.hyper.tau_shots:
                self.hand_off()

    def _training_now(self, step: int) -> bool:
        mode = self.hyper.mode
        if mode == MODE_META:
            return True
        if mode == MODE_CONTINUOUS:
            return step < self.hyper.continuous_until
        return False  # adaptive retrains only on trigger; frozen never

    # -- shots ---------------------------------------------------------------

    def run_shot(self, batch: Optional[list[MemoryEntry]] = None) -> Optional[np.ndarray]:
        """One batched update over the transitions gathered since the last shot.

        Cadence shots (no explicit batch) consume the transitions accumulated
        since the previous shot; triggered retrains pass their own slices of
        recent memory.  Returns the clipped batch-mean actor gradient, or None
        when the batch was empty.
        """
        if batch is None:
            batch = self.memory.completed_since(self._train_floor_step)
            # a shot is bounded: at most the newest shot-window of transitions,
            # so every shot takes a step of the same magnitude
            batch = batch[-self.hyper.shot_steps:]
            last = self.memory.last()
            if last is not None:
                # the newest entry still lacks phi_next; it belongs to the next batch
                self._train_floor_step = last.step if not last.next_ok else last.step + 1
            self.steps_since_update = 0
        if not batch:
            return None
        theta = self.params["actor_critic"]
        g_actor = self.policy.layout.zeros()
        g_critic = self.policy.layout.zeros()
        for e in batch:
            v_now, gv = self.policy.grad_value(theta, e.phi)
            v_next = self.policy.value(theta, e.phi_next)
            delta = e.r_i + self.hyper.gamma * v_next - v_now
            g_critic += delta * gv
            if e.source_br and e.has_bids and not e.forced.all():
                _, glp = self.policy.grad_log_prob(theta, e.phi, e.bid_feats, e.alpha,
                                                   e.level, e.level_masks, e.forced)
                g_actor += delta * glp
            self.loop_rewards.append(e.reward)
        g_actor = self._clip(g_actor / len(batch))
        g_critic = self._clip(g_critic / len(batch))
        step_ac = self.hyper.lr_actor * g_actor + self.hyper.lr_critic * g_critic
        stepped = nn.sgd_step(theta, step_ac, 1.0)
        if stepped is theta:
            self.updates_rejected += 1
        self.params["actor_critic"] = stepped
        self.last_grads["actor_critic"] = step_ac

        g_sl = self.behavior.layout.zeros()
        cloned = 0
        for e in batch:
            if e.has_bids and not e.forced.all():
                _, g = self.behavior.grad_log_prob(self.params["supervised"], e.phi,
                                                   e.bid_feats, e.alpha, e.level,
                                                   e.level_masks, e.forced)
                g_sl += g
                cloned += 1
        if cloned:
            g_sl = self._clip(g_sl / cloned)
            self.params["supervised"] = nn.sgd_step(self.params["supervised"],
                                                    g_sl, self.hyper.lr_sl)
            self.last_grads["supervised"] = self.hyper.lr_sl * g_sl

        if self.hyper.curiosity_enabled:
            g_cur = self.curiosity.layout.zeros()
            fwd, inv = 0.0, 0.0
            for e in batch:
                lf, gf = self.curiosity.grad_forward_loss(self.params["curiosity"],
                                                          e.phi, e.action_summary, e.phi_next)
                li, gi = self.curiosity.grad_inverse_loss(self.params["curiosity"],
                                                          e.phi, e.phi_next, e.action_summary)
                g_cur -= gf + gi
                fwd += lf
                inv += li
            g_cur = self._clip(g_cur / len(batch))
            self.loop_fwd.append(fwd / len(batch))
            self.loop_inv.append(inv / len(batch))
            self._check_divergence(fwd / len(batch))
            self.params["curiosity"] = nn.sgd_step(self.params["curiosity"], g_cur,
                                                   self.hyper.lr_curiosity)
            self.last_grads["curiosity"] = self.hyper.lr_curiosity * g_cur

        self.shots_done += 1
        self.shots_in_loop += 1
        return g_actor

    def hand_off(self) -> None:
        """Ship last-shot gradients to the coordinator, restart from theta0.

        Submissions are the locally applied update directions rescaled by
        1/META_LR, so the coordinator's uniform step reproduces one locally
        sized (per-module learning rate, clipped) step per submission.  This
        keeps the shared model inside the stability region of the stiffest
        modules, which a raw-gradient submission at the coordinator's larger
        step size would not.
        """
        self.inner_loops += 1
        layouts = nn.build_modules(self.arch)
        bundle = {k: self.last_grads[k] / nn.META_LR if k in self.last_grads
                  else layouts[k].zeros() for k in nn.MODULE_KEYS}
        row = {
            "epoch": self.inner_loops,
            "agent": self.agent_id,
            "shot": self.shots_done,
            "rl_reward": float(np.mean(self.loop_rewards)) if self.loop_rewards else float("nan"),
            "credit_loss": self.last_credit_loss if self.last_credit_loss is not None else float("nan"),
            "forward_loss": float(np.mean(self.loop_fwd)) if self.loop_fwd else float("nan"),
            "inverse_loss": float(np.mean(self.loop_inv)) if self.loop_inv else float("nan"),
        }
        if self.on_handoff:
            self.on_handoff(row)
        if self.coordinator is not None:
            refreshed = self.coordinator.submit_gradient(self.agent_id, bundle)
            self.reset_to(refreshed)
            self.prefs = sample_preferences(self.pref_rng)
        self.shots_in_loop = 0
        self.loop_rewards.clear()
        self.loop_fwd.clear()
        self.loop_inv.clear()
        self.last_grads = {}

    def _clip(self, g: np.ndarray) -> np.ndarray:
        norm = float(np.linalg.norm(g))
        if norm > self.hyper.clip_norm:
            return g * (self.hyper.clip_norm / norm)
        return g

    def _check_divergence(self, loss: float) -> None:
        if loss > self.hyper.loss_ceiling:
            raise RuntimeError(
                f"agent {self.agent_id}: loss {loss:.3g} exceeded ceiling "
                f"{self.hyper.loss_ceiling:.3g}; training halted")

    # -- delayed objectives ----------------------------------------------------

    def on_window(self, boundary_step: int, neg_ofr: float, fairness: float) -> Optional[float]:
        """Handle a long-term reward delivery: predict it, retro-label the
        window, train the credit net, and maybe trigger a retrain shot."""
        window = self.memory.in_window(boundary_step - self.hyper.window_steps, boundary_step)
        if not window:
            return None
        y = self.prefs.w_neg_ofr * neg_ofr + self.prefs.w_fairness * fairness
        X, seg_of = self._segment_window(window, boundary_step)
        theta = self.params["credit"]
        _, eps_seg, y_hat = self.credit.recurrent_forward(theta, X)
        pred_loss = float((y_hat - y) ** 2)
        self.last_credit_loss = pred_loss

        if self.hyper.credit_enabled:
            nseg = X.shape[0]
            for e, s in zip(window, seg_of):
                e.eps = float(eps_seg[s]) * nseg
                e.r_i = e.eps * e.reward + e.lf
            _, grad = self.credit.grad_loss(theta, X, y)
            self._check_divergence(pred_loss)
            g_credit = self._clip(-grad)
            self.params["credit"] = nn.sgd_step(theta, g_credit, self.hyper.lr_credit)
            self.last_grads["credit"] = self.hyper.lr_credit * g_credit

        if self.hyper.adaptive_retrain and self.hyper.mode == MODE_ADAPTIVE:
            if self.monitor.check_and_push(pred_loss):
                self.retrain_events += 1
                # a retrain burst walks back over the freshest completed
                # transitions (just retro-labeled) in shot-sized slices,
                # oldest slice first
                s = self.hyper.shot_steps
                recent = self.memory.completed_since(0)[-s * self.hyper.retrain_shots:]
                for i in range(0, len(recent), s):
                    self.run_shot(recent[i:i + s])
        return pred_loss

    def _segment_window(self, window: list[MemoryEntry],
                        boundary_step: int) -> tuple[np.ndarray, list[int]]:
        """Aggregate window entries into fixed equal-width step segments."""
        nseg = self.hyper.segments
        seg_len = self.hyper.window_steps / nseg
        start = boundary_step - self.hyper.window_steps
        dim = self.arch.credit_in_dim
        X = np.zeros((nseg, dim))
        counts = np.zeros(nseg)
        seg_of = []
        sdim = self.encoder.dim
        for e in window:
            s = min(int((e.step - start) / seg_len), nseg - 1)
            seg_of.append(s)
            X[s, :sdim] += e.state
            X[s, sdim:sdim + 2] += e.action_summary
            X[s, sdim + 2] += e.reward
            counts[s] += 1
        nz = counts > 0
        X[nz] /= counts[nz][:, None]
        X[:, sdim + 3] = self.prefs.w_neg_ofr
        X[:, sdim + 4] = self.prefs.w_fairness
        X[:, -1] = counts / max(1.0, seg_len)  # activity fraction
        return X, seg_of
