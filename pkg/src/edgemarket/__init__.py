"""Deterministic edge-offloading marketplace with multi-objective learning bidders.

Vehicles crossing a signalized intersection offload compute tasks through
repeated uniform-price auctions; bidders learn mixed bidding policies against
moving preference targets, train locally in shots, and share gradients through
a first-order meta coordinator. Everything is reproducible: one master seed
drives named substreams and equal configurations yield byte-identical metrics.
"""

from .simcore import (COVERAGE_RADIUS_M, EventQueue, OutOfRangeError, RngStreams,
                      SimClock, TrafficLight, throughput_mbps, transmission_delay)
from .market import SERVICE_CLASSES, Bid, CommodityType, Request, Seller, run_auction
from .rewards import (PreferenceVector, auction_utility, extrinsic_reward,
                      jain_fairness, offloading_failure_rate, sample_preferences)
from .baselines import PopulationModel
from .simulation import RunResult, World, WorldConfig
from .scenarios import load_config, preset, pretrain_population

__version__ = "0.1.0"

__all__ = [
    "COVERAGE_RADIUS_M", "EventQueue", "OutOfRangeError", "RngStreams", "SimClock",
    "TrafficLight", "throughput_mbps", "transmission_delay",
    "SERVICE_CLASSES", "Bid", "CommodityType", "Request", "Seller", "run_auction",
    "PreferenceVector", "auction_utility", "extrinsic_reward", "jain_fairness",
    "offloading_failure_rate", "sample_preferences",
    "PopulationModel", "RunResult", "World", "WorldConfig", "load_config",
    "preset", "pretrain_population",
    "__version__",
]
