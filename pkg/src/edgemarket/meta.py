"""First-order meta layer: a coordinator that folds local gradients into a
shared initialization.

Agents train locally for `tau` shots, ship their last-shot gradients, and
restart from the refreshed shared parameters. The coordinator applies each
arriving bundle immediately (no barrier across agents) with the plain rule
theta0 <- theta0 + lr * g per module, so its state always equals the initial
parameters plus lr times the running gradient sum, which `equivalence_check`
verifies directly.
"""

from __future__ import annotations

import logging
from typing import Optional

import numpy as np

from . import nn

log = logging.getLogger(__name__)

META_LR = nn.META_LR


class Coordinator:
    """Asynchronous aggregator for the shared generic model."""

    def __init__(self, arch: nn.ArchConfig, params: dict[str, np.ndarray],
                 lr: float = META_LR):
        self.arch = arch
        self.lr = float(lr)
        self.layouts = nn.build_modules(arch)
        for key in nn.MODULE_KEYS:
            if key not in params or params[key].size != self.layouts[key].size:
                raise ValueError(f"bad initial parameters for module {key!r}")
        self.params = {k: np.asarray(v, dtype=float).copy() for k, v in params.items()}
        self._init = {k: v.copy() for k, v in self.params.items()}
        self._grad_sums = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.submissions = 0
        self.rejections = 0

    def submit_gradient(self, agent_id: int, bundle: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Apply one agent's gradient bundle; returns the refreshed shared model.

        Layout mismatches and non-finite entries reject the whole bundle: the
        shared model must never absorb a corrupt update.
        """
        for key, g in bundle.items():
            if key not in self.layouts:
                self.rejections += 1
                log.warning("agent %s submitted unknown module %r; bundle rejected", agent_id, key)
                return self.share()
            if np.asarray(g).shape != (self.layouts[key].size,):
                self.rejections += 1
                log.warning("agent %s gradient for %r has wrong layout; bundle rejected",
                            agent_id, key)
                return self.share()
            if not np.all(np.isfinite(g)):
                self.rejections += 1
                log.warning("agent %s gradient for %r is not finite; bundle rejected",
                            agent_id, key)
                return self.share()
        for key, g in bundle.items():
            self.params[key] = self.params[key] + self.lr * g
            self._grad_sums[key] += g
        self.submissions += 1
        return self.share()

    def share(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def equivalence_check(self, rel_tol: float = 1e-10) -> tuple[bool, float]:
        """Coordinator state must equal theta0_init + lr * sum(g) per module."""
        worst = 0.0
        for key in nn.MODULE_KEYS:
            expect = self._init[key] + self.lr * self._grad_sums[key]
            got = self.params[key]
            denom = np.maximum(1e-12, np.maximum(np.abs(expect), np.abs(got)))
            worst = max(worst, float(np.max(np.abs(expect - got) / denom)))
        return worst <= rel_tol, worst


def run_offline_training(config, out_dir=None, epochs: Optional[int] = None):
    """Train the generic model on the offline marketplace (lazy world import)."""
    from .simulation import World

    world = World(config)
    result = world.run(stop_after_epochs=epochs)
    # Incremental application and the closed form drift apart by float
    # roundoff that grows with the submission count; a corrupt update would
    # miss by many orders of magnitude more than this guard allows.
    ok, err = world.coordinator.equivalence_check(rel_tol=1e-8)
    if not ok:
        raise RuntimeError(f"meta-update equivalence violated: rel err {err:.3e}")
    return result
