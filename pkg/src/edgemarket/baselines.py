"""Bidder zoo: the full learning bidder plus ablations and a random baseline.

All bidders speak the same protocol the world expects:

- ``decide(obs) -> list[BidDecision]``
- ``finish_step(facts)``
- ``on_window(step, neg_ofr, fairness) -> float | None``
- ``on_bind()`` when an embodiment is (re)assigned
- attributes ``agent_id``, ``algo``, ``prefs``, ``last_reward``,
  ``retrain_events``
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .agent import (AgentHyper, BidDecision, MoodyBidder, Observation, StepFacts,
                    MODE_ADAPTIVE, MODE_CONTINUOUS, MODE_FROZEN, MODE_META)
from .market import CommodityType
from .rewards import PreferenceVector
from .simcore import RngStreams

ALGO_MOODY = "moody"
ALGO_AC = "ac"
ALGO_DRACO2 = "draco2like"
ALGO_RANDOM = "random"
ALGOS = (ALGO_MOODY, ALGO_AC, ALGO_DRACO2, ALGO_RANDOM)

# baseline kinds that learn and can therefore carry a pretrained population
PRETRAINABLE = (ALGO_AC, ALGO_DRACO2)


@dataclass
class PopulationModel:
    """Per-agent parameter snapshots from one baseline pretraining run.

    A deployment with more seats than snapshots cycles through them, so any
    population size can reuse one pretrained cohort.
    """

    algo: str
    params_by_agent: list[dict[str, np.ndarray]] = field(default_factory=list)
    steps_trained: int = 0

    def params_for(self, agent_id: int) -> dict[str, np.ndarray]:
        return self.params_by_agent[agent_id % len(self.params_by_agent)]


class RandomBidder:
    """Uniformly random legal actions; no state, no learning."""

    def __init__(self, agent_id: int, types: list[CommodityType], rng: np.random.Generator,
                 pref_rng: np.random.Generator, prefs: PreferenceVector,
                 initial_wealth: float, price_levels: int = 11):
        self.agent_id = agent_id
        self.algo = ALGO_RANDOM
        self.types = {ct.name: ct for ct in types}
        self.rng = rng
        self.pref_rng = pref_rng
        self.prefs = prefs
        self.initial_wealth = float(initial_wealth)
        self.price_levels = int(price_levels)
        self.last_reward = 0.0
        self.retrain_events = 0

    def on_bind(self) -> None:
        pass

    def decide(self, obs: Observation) -> list[BidDecision]:
        decisions: list[BidDecision] = []
        remaining = obs.budget
        for req in obs.pipeline:
            valuation = obs.valuations[req.ctype.name]
            grid = np.arange(self.price_levels) * valuation / (self.price_levels - 1)
            legal = np.flatnonzero(grid <= remaining + 1e-9)
            if remaining <= 0.0 or legal.size == 0:
                decisions.append(BidDecision(req, 0, -1, 0.0, True))
                continue
            alpha = int(self.rng.integers(0, 2))
            level = int(legal[self.rng.integers(0, legal.size)])
            price = float(grid[level]) if alpha else 0.0
            if alpha:
                remaining -= price
            decisions.append(BidDecision(req, alpha, level, price, False))
        return decisions

    def finish_step(self, facts: StepFacts) -> None:
        self.last_reward = 0.0

    def on_window(self, step: int, neg_ofr: Optional[float], fairness: float) -> Optional[float]:
        return None


def make_bidder(algo: str, agent_id: int, types: list[CommodityType], streams: RngStreams,
                initial_wealth: float,
                hyper: Optional[AgentHyper] = None,
                initial_params: Optional[dict[str, np.ndarray]] = None,
                start_steps_trained: int = 0,
                prefs: Optional[PreferenceVector] = None,
                coordinator=None, on_handoff=None):
    """Build a bidder of the requested kind.

    - ``moody``: full stack (curiosity + credit + adaptive retraining).
    - ``ac``: actor-critic ablation; curiosity, credit assignment and
      retraining disabled; never trains once deployed.
    - ``draco2like``: same network family, constant preferences, continuous
      learning over its burn-in horizon.
    - ``random``: uniform legal actions.

    ``initial_params`` (with its matching ``start_steps_trained``) is adopted
    verbatim when given; otherwise the bidder starts from a per-agent random
    initialization.  Which snapshot a seat receives — the shared generic
    model for ``moody``, its own pretrained cohort for a baseline — is the
    caller's decision, not the factory's.

    The per-agent preference generator is created exactly once, here; every
    later preference draw (initial vector, inner-loop resampling, deployment
    resampling) pulls from that same stream.
    """
    explore = streams.child("exploration", agent_id)
    pref_rng = streams.child("preference-resampling", agent_id)
    if algo == ALGO_RANDOM:
        from .rewards import sample_preferences
        p = prefs if prefs is not None else sample_preferences(pref_rng)
        return RandomBidder(agent_id, types, explore, pref_rng, p, initial_wealth)

    base = hyper or AgentHyper()
    if algo == ALGO_MOODY:
        hp = base
    elif algo == ALGO_AC:
        hp = base.replace(curiosity_enabled=False, credit_enabled=False,
                          adaptive_retrain=False,
                          mode=MODE_FROZEN if base.mode == MODE_ADAPTIVE else base.mode)
    elif algo == ALGO_DRACO2:
        hp = base.replace(adaptive_retrain=False,
                          mode=MODE_CONTINUOUS if base.mode == MODE_ADAPTIVE else base.mode)
    else:
        raise ValueError(f"unknown bidder kind {algo!r}")

    bidder = MoodyBidder(agent_id, algo, types, hp, explore, pref_rng,
                         budget_norm=initial_wealth, prefs=prefs,
                         start_steps_trained=start_steps_trained)
    if initial_params is not None:
        bidder.reset_to(initial_params)
    else:
        bidder.init_params(streams.child("learning-init", 10 + agent_id))
    bidder.coordinator = coordinator
    bidder.on_handoff = on_handoff
    return bidder
