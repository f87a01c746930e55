"""Auction mechanism and commodity sellers.

One auction round per step and commodity type: the `n` highest-priced bids win
and every winner pays the same clearing price, the (n+1)-th highest bid when one
exists and the reserve price 0 otherwise. Ties in price are broken uniformly at
random from a dedicated substream so rounds replay exactly under a fixed seed.

Sellers are work-conserving FIFO queues with a per-step processing budget.
Each seller posts a unit price proportional to its queued backlog, and admitted
requests always go to the cheapest seller that can still meet the deadline,
which drains load toward underused sites.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class CommodityType:
    """A service class: how much compute a request needs and how urgent it is."""

    name: str
    resource_units: float
    deadline_steps: int
    period_steps: int  # mean inter-arrival per bidder
    uplink_mbit: float
    downlink_mbit: float


# The two service classes used by the shipped presets: a small periodic planning
# task with a tight deadline, and a bulk perception task with a loose one.
SERVICE_CLASSES = {
    "F1": CommodityType("F1", 80.0, 100, 100, 0.4, 0.0),
    "F2": CommodityType("F2", 80.0, 500, 500, 4.0, 0.4),
}


@dataclass
class Request:
    """A bidder-side offloading request moving through the bidding pipeline."""

    request_id: int
    bidder_id: int
    ctype: CommodityType
    created_step: int
    deadline_step: int
    rebid_count: int = 0

    def steps_to_deadline(self, now: int) -> int:
        return self.deadline_step - now


@dataclass
class Bid:
    request: Request
    price: float

    @property
    def bidder_id(self) -> int:
        return self.request.bidder_id


@dataclass
class AuctionRoundResult:
    type_name: str
    n_slots: int
    winners: list[Bid]
    losers: list[Bid]
    clearing_price: float


def _clearing_price(sorted_prices: Sequence[float], n_slots: int) -> float:
    """Uniform clearing price of a round whose bids are sorted descending."""
    if len(sorted_prices) > n_slots:
        return float(sorted_prices[n_slots])
    return 0.0


def run_auction(bids: list[Bid], n_slots: int,
                tie_rng: Optional[np.random.Generator] = None,
                tie_ranks: Optional[Sequence[float]] = None) -> AuctionRoundResult:
    """One uniform-price round for a single commodity type.

    `tie_ranks` (one float per bid, lower ranks first among equal prices) can be
    injected for oracle comparison; otherwise ranks are drawn from `tie_rng`.
    """
    if n_slots < 0:
        raise ValueError("negative slot count")
    for b in bids:
        if b.price < 0:
            raise ValueError(f"negative bid price {b.price}")
    type_name = bids[0].request.ctype.name if bids else ""
    if n_slots == 0 or not bids:
        return AuctionRoundResult(type_name, n_slots, [], list(bids), 0.0)
    if tie_ranks is None:
        if tie_rng is None:
            raise ValueError("need tie_rng or tie_ranks")
        tie_ranks = tie_rng.random(len(bids))
    order = sorted(range(len(bids)), key=lambda i: (-bids[i].price, tie_ranks[i]))
    winners = [bids[i] for i in order[:n_slots]]
    losers = [bids[i] for i in order[n_slots:]]
    price = _clearing_price([bids[i].price for i in order], n_slots)
    return AuctionRoundResult(type_name, n_slots, winners, losers, price)


@dataclass
class Job:
    """An admitted request executing at a seller."""

    request: Request
    units_total: float  # jittered actual work
    remaining: float
    data_ready_step: int  # admission + uplink transmission
    admit_step: int


class Seller:
    """A computing site: FIFO queue, fixed per-step capacity, load-linear price.

    `utilization` (backlog fraction of what the site could process over a
    normalization window) drives the posted price; `last_inservice` (units
    actually processed this step) feeds the system utilization objective.
    """

    def __init__(self, seller_id: int, capacity_per_step: float, base_price: float = 1.0,
                 extra_delay_steps: int = 0, norm_window_steps: int = 500):
        if capacity_per_step <= 0:
            raise ValueError("capacity must be positive")
        self.seller_id = seller_id
        self.capacity = float(capacity_per_step)
        self.base_price = float(base_price)
        self.extra_delay_steps = int(extra_delay_steps)
        self.norm_window_steps = int(norm_window_steps)
        self.queue: list[Job] = []
        self.price = 0.0
        self.capacity_violations = 0
        self.last_inservice = 0.0

    # -- load bookkeeping -------------------------------------------------

    def backlog_units(self) -> float:
        return sum(j.remaining for j in self.queue)

    @property
    def utilization(self) -> float:
        return min(1.0, self.backlog_units() / (self.capacity * self.norm_window_steps))

    def update_price(self) -> float:
        self.price = self.base_price * self.utilization
        return self.price

    # -- admission ---------------------------------------------------------

    def finish_estimate(self, units: float, uplink_delay: int, now: int) -> int:
        """Earliest completion step if admitted now (FIFO behind current backlog)."""
        qdelay = math.ceil(self.backlog_units() / self.capacity)
        start = now + max(int(uplink_delay), qdelay)
        return start + math.ceil(units / self.capacity)

    def can_meet(self, units: float, uplink_delay: int, now: int, deadline_step: int) -> bool:
        return self.finish_estimate(units, uplink_delay, now) <= deadline_step

    def admit(self, request: Request, units: float, uplink_delay: int, now: int) -> Job:
        job = Job(request, units, units, now + int(uplink_delay), now)
        self.queue.append(job)
        return job

    def slot_estimate(self, ctype: CommodityType) -> int:
        """How many more requests of this type the site could plausibly absorb."""
        spare = self.capacity * ctype.deadline_steps - self.backlog_units()
        return max(0, int(spare // ctype.resource_units))

    # -- execution ---------------------------------------------------------

    def execute_step(self, now: int) -> tuple[list[Job], list[Job]]:
        """Process up to `capacity` units; return (completed, dropped) jobs.

        Jobs past their deadline are dropped before processing; a completion on
        its exact deadline step still counts as on time.
        """
        dropped = [j for j in self.queue if j.request.deadline_step < now]
        if dropped:
            self.queue = [j for j in self.queue if j.request.deadline_step >= now]
        completed = []
        budget = self.capacity
        used = 0.0
        for job in self.queue:
            if budget <= 1e-12:
                break
            if job.data_ready_step > now:
                continue
            work = min(budget, job.remaining)
            job.remaining -= work
            budget -= work
            used += work
            if job.remaining <= 1e-12:
                completed.append(job)
        if used > self.capacity + 1e-9:
            self.capacity_violations += 1
        self.last_inservice = used
        if completed:
            done = {id(j) for j in completed}
            self.queue = [j for j in self.queue if id(j) not in done]
        return completed, dropped


def update_seller_prices(sellers: Sequence[Seller]) -> None:
    for s in sellers:
        s.update_price()


def available_slots(sellers: Sequence[Seller], ctype: CommodityType) -> int:
    """Round availability n for a type: summed per-site slack estimates."""
    return sum(s.slot_estimate(ctype) for s in sellers)


def assign_to_seller(sellers: Sequence[Seller], request: Request, units: float,
                     uplink_delay: int, now: int) -> Optional[Seller]:
    """Cheapest seller that can still meet the deadline; price ties to lowest id."""
    feasible = [s for s in sellers if s.can_meet(units, uplink_delay, now, request.deadline_step)]
    if not feasible:
        return None
    return min(feasible, key=lambda s: (s.price, s.seller_id))


def rebid_allowed(request: Request, now: int, max_rebids: int = 1) -> bool:
    """A lost bid may return to the pipeline once, and only before its deadline."""
    return request.rebid_count < max_rebids and now + 1 <= request.deadline_step
