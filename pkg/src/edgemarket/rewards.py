"""Multi-objective reward shaping, fairness and failure metrics, budget accounting.

Per-round bid utility combines three short-term terms: the payoff of a won bid,
the (weighted) cost of a lost bid, and the (weighted) cost of backing off. The
per-step extrinsic reward then mixes the summed bid utility with system
utilization immediately, and with the two long-term objectives (negated failure
rate, payment fairness) whenever a measurement window closes.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

WINDOW_STEPS = 2000  # long-term objectives are measured and delivered per window


@dataclass(frozen=True)
class PreferenceVector:
    """Bidder preference weights over objectives.

    Three couplings, each summing to one: short-vs-long within the auction
    objective pipeline (w_utility + w_beta = 1), failure-rate vs fairness
    (w_neg_ofr + w_fairness = 1), and lost-bid vs backoff cost inside the bid
    utility (w_bid_loss + w_backoff = 1).
    """

    w_utility: float
    w_neg_ofr: float
    w_beta: float
    w_fairness: float
    w_bid_loss: float
    w_backoff: float

    def __post_init__(self):
        for v in (self.w_utility, self.w_neg_ofr, self.w_beta, self.w_fairness,
                  self.w_bid_loss, self.w_backoff):
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"preference weight {v} outside [0, 1]")
        for a, b in ((self.w_utility, self.w_beta),
                     (self.w_neg_ofr, self.w_fairness),
                     (self.w_bid_loss, self.w_backoff)):
            if abs(a + b - 1.0) > 1e-9:
                raise ValueError("coupled preference weights must sum to 1")


def sample_preferences(rng: np.random.Generator) -> PreferenceVector:
    """Three independent U(0,1) draws fix all six coupled weights."""
    u1, u2, u3 = rng.random(3)
    return PreferenceVector(u1, u2, 1.0 - u1, 1.0 - u2, u3, 1.0 - u3)


def auction_utility(alpha: int, z: int, valuation: float, payment: float,
                    loss_cost: float, backoff_cost: float,
                    w_bid_loss: float, w_backoff: float) -> float:
    """Per-round utility of one pipeline bid.

    alpha: 1 if the bid was submitted this round, 0 if backed off.
    z: 1 if the submitted bid won and was admitted, else 0.
    payment: the uniform clearing price actually charged to winners.
    """
    won = alpha * z * (valuation - payment)
    lost = -w_bid_loss * alpha * (1 - z) * loss_cost
    backoff = -w_backoff * (1 - alpha) * backoff_cost
    return won + lost + backoff


def extrinsic_reward(prefs: PreferenceVector, bid_utility_sum: float, beta: float,
                     neg_ofr: Optional[float] = None,
                     fairness: Optional[float] = None) -> float:
    """Scalarized per-step reward; long-term terms only on their delivery step."""
    r = prefs.w_utility * bid_utility_sum + prefs.w_beta * beta
    if neg_ofr is not None:
        r += prefs.w_neg_ofr * neg_ofr
    if fairness is not None:
        r += prefs.w_fairness * fairness
    return r


def jain_fairness(payments: Sequence[float]) -> float:
    """Jain index of per-bidder payment totals; an idle market counts as fair."""
    p = np.asarray(payments, dtype=float)
    if p.size == 0:
        return 1.0
    if np.any(p < 0):
        raise ValueError("negative payment total")
    sq = float(np.sum(p * p))
    if sq == 0.0:
        return 1.0
    total = float(np.sum(p))
    return (total * total) / (p.size * sq)


def offloading_failure_rate(final_losses: int, resolved: int) -> Optional[float]:
    """Share of resolved requests that ended in failure; None when nothing resolved."""
    if final_losses < 0 or resolved < 0 or final_losses > resolved:
        raise ValueError("inconsistent failure counters")
    if resolved == 0:
        return None
    return final_losses / resolved


def utilization_beta(inservice_units: float, total_capacity: float) -> float:
    """System utilization: units actually processed this step over total capacity."""
    if total_capacity <= 0:
        raise ValueError("capacity must be positive")
    beta = inservice_units / total_capacity
    if beta < -1e-9 or beta > 1.0 + 1e-9:
        raise ValueError(f"utilization {beta} outside [0, 1]")
    return min(1.0, max(0.0, beta))


@dataclass
class BidderAccount:
    """Wealth ledger of one bidder. Valuations are per commodity type."""

    bidder_id: int
    initial_wealth: float
    valuations: dict[str, float]
    budget: float = field(init=False)
    resets: int = 0

    def __post_init__(self):
        if self.initial_wealth <= 0:
            raise ValueError("initial wealth must be positive")
        self.budget = self.initial_wealth

    def valuation(self, type_name: str) -> float:
        return self.valuations[type_name]


def update_budget(account: BidderAccount, utility: float) -> bool:
    """Apply one step's utility; on ruin, reset wealth and report it.

    The caller is responsible for flushing the bidder's pipeline as final
    losses when True is returned: a reset bidder abandons its open bids.
    """
    account.budget += utility
    if account.budget <= 0.0:
        account.budget = account.initial_wealth
        account.resets += 1
        return True
    return False


# ---------------------------------------------------------------------------
# Metrics persistence: the frozen CSV contract shared with the plotting layer.

METRICS_COLUMNS = ("step", "window", "bidder", "algo", "metric", "value")
SYSTEM_BIDDER = "SYSTEM"


def format_value(v: float) -> str:
    return f"{float(v):.10g}"


@dataclass(frozen=True)
class MetricsRecord:
    step: int
    window: int
    bidder: str
    algo: str
    metric: str
    value: float

    def as_line(self) -> str:
        return (f"{self.step},{self.window},{self.bidder},{self.algo},"
                f"{self.metric},{format_value(self.value)}")


class MetricsWriter:
    """Append-only metric rows with byte-stable formatting."""

    def __init__(self):
        self.rows: list[MetricsRecord] = []

    def add(self, step: int, window: int, bidder: str, algo: str, metric: str, value: float):
        self.rows.append(MetricsRecord(int(step), int(window), str(bidder), str(algo),
                                       str(metric), float(value)))

    def dump(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(METRICS_COLUMNS) + "\n")
        for r in self.rows:
            buf.write(r.as_line() + "\n")
        return buf.getvalue()

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.dump())
