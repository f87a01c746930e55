"""Independent correctness oracles, shared by the test suite and the CLI.

Each check re-derives an answer through a second, dumber route (brute force,
finite differences, exhaustive enumeration, closed-form identities) and
compares it against the production code path.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import nn
from .agent import RetrainMonitor
from .market import SERVICE_CLASSES, Bid, Request, run_auction
from .meta import Coordinator
from .rewards import jain_fairness


# -- auction: brute-force reference ---------------------------------------------


def auction_oracle(prices: Sequence[float], n_slots: int,
                   tie_ranks: Sequence[float]) -> tuple[list[int], float]:
    """Reference uniform-price outcome by exhaustive sort.

    Winners: top `n_slots` prices (ties broken by lower rank). Clearing price:
    highest losing price when demand exceeds supply, else zero.
    """
    order = sorted(range(len(prices)), key=lambda i: (-prices[i], tie_ranks[i]))
    if n_slots == 0 or not prices:
        return [], 0.0
    winners = order[:n_slots]
    clearing = prices[order[n_slots]] if len(prices) > n_slots else 0.0
    return winners, clearing


def _mk_bids(prices: Sequence[float]) -> list[Bid]:
    ct = SERVICE_CLASSES["F1"]
    return [Bid(Request(i, i, ct, 0, 100), float(p)) for i, p in enumerate(prices)]


def check_auction(seed: int = 0, rounds: int = 300) -> tuple[bool, str]:
    """Randomized instances with heavy tie mass, shared tie ranks on both routes."""
    rng = np.random.default_rng(seed)
    for k in range(rounds):
        n_bids = int(rng.integers(0, 9))
        prices = list(rng.choice([0.0, 1.0, 1.0, 2.0, 3.5, 3.5], size=n_bids))
        n_slots = int(rng.integers(0, n_bids + 3))
        ranks = list(rng.random(n_bids))
        want_winners, want_price = auction_oracle(prices, n_slots, ranks)
        res = run_auction(_mk_bids(prices), n_slots, tie_ranks=ranks)
        got_winners = [b.request.request_id for b in res.winners]
        if got_winners != want_winners or abs(res.clearing_price - want_price) > 1e-12:
            return False, (f"round {k}: prices={prices} n={n_slots} "
                           f"got {got_winners}@{res.clearing_price}, "
                           f"want {want_winners}@{want_price}")
    return True, f"{rounds} randomized rounds matched the brute-force reference"


# -- networks: analytic gradients vs central differences --------------------------


def _small_arch() -> nn.ArchConfig:
    return nn.ArchConfig(phi_dim=6, bid_dim=4, credit_in_dim=5,
                         hidden1=5, hidden2=4, price_levels=5,
                         curiosity_hidden=4, credit_hidden=3, credit_attn=3,
                         segments=4)


def check_gradients(seed: int = 0, tol: float = 1e-4) -> tuple[bool, str]:
    cfg = _small_arch()
    rng = np.random.default_rng(seed)
    pol = nn.PolicyValueNet(cfg)
    cur = nn.CuriosityNet(cfg)
    cred = nn.CreditNet(cfg)
    errs = {}

    theta = pol.layout.init(rng)
    phi = rng.normal(size=cfg.phi_dim)
    feats = rng.normal(size=(3, cfg.bid_dim))
    masks = np.ones((3, cfg.price_levels), dtype=bool)
    masks[1, 3:] = False
    forced = np.array([False, False, True])
    alpha = np.array([1, 0, 0])
    level = np.array([2, 1, -1])
    _, g = pol.grad_log_prob(theta, phi, feats, alpha, level, masks, forced)
    fd = nn.finite_diff_grad(
        lambda th: pol.log_prob(th, phi, feats, alpha, level, masks, forced), theta)
    errs["policy_log_prob"] = nn.max_rel_error(g, fd)

    _, gv = pol.grad_value(theta, phi)
    fdv = nn.finite_diff_grad(lambda th: pol.value(th, phi), theta)
    errs["critic_value"] = nn.max_rel_error(gv, fdv)

    tc = cur.layout.init(rng)
    act = rng.normal(size=2)
    phi2 = rng.normal(size=cfg.phi_dim)
    _, gf = cur.grad_forward_loss(tc, phi, act, phi2)
    fdf = nn.finite_diff_grad(lambda th: cur.forward_loss(th, phi, act, phi2), tc)
    errs["curiosity_forward"] = nn.max_rel_error(gf, fdf)
    _, gi = cur.grad_inverse_loss(tc, phi, phi2, act)
    fdi = nn.finite_diff_grad(lambda th: cur.inverse_loss(th, phi, phi2, act), tc)
    errs["curiosity_inverse"] = nn.max_rel_error(gi, fdi)

    tr = cred.layout.init(rng)
    X = rng.normal(size=(cfg.segments, cfg.credit_in_dim))
    y = 0.7
    _, gc = cred.grad_loss(tr, X, y)
    fdc = nn.finite_diff_grad(lambda th: cred.loss(th, X, y), tr)
    errs["credit_loss"] = nn.max_rel_error(gc, fdc)

    worst = max(errs.values())
    detail = ", ".join(f"{k}={v:.2e}" for k, v in errs.items())
    return worst <= tol, f"max rel err {worst:.2e} (tol {tol:.0e}): {detail}"


def check_score_identity(seed: int = 0, tol: float = 1e-8) -> tuple[bool, str]:
    """Exhaustively: sum over all actions of prob * grad(log prob) must vanish."""
    cfg = _small_arch()
    rng = np.random.default_rng(seed)
    pol = nn.PolicyValueNet(cfg)
    theta = pol.layout.init(rng)
    phi = rng.normal(size=cfg.phi_dim)
    feats = rng.normal(size=(1, cfg.bid_dim))
    masks = np.ones((1, cfg.price_levels), dtype=bool)
    masks[0, 4] = False
    forced = np.array([False])
    total = pol.layout.zeros()
    psum = 0.0
    actions = [(0, 0)] + [(1, l) for l in range(cfg.price_levels) if masks[0, l]]
    for a, l in actions:
        lp, g = pol.grad_log_prob(theta, phi, feats, np.array([a]), np.array([l]),
                                  masks, forced)
        p = float(np.exp(lp))
        total += p * g
        psum += p
    err = float(np.max(np.abs(total)))
    ok = err <= tol and abs(psum - 1.0) <= 1e-9
    return ok, f"|sum p*dlogp|_max={err:.2e}, total prob={psum:.12f}"


# -- meta updates: closed-form equivalence ------------------------------------------


def check_meta_equivalence(seed: int = 0, submissions: int = 40) -> tuple[bool, str]:
    cfg = _small_arch()
    rng = np.random.default_rng(seed)
    params = nn.init_module_params(cfg, rng)
    coord = Coordinator(cfg, params)
    for k in range(submissions):
        bundle = {key: rng.normal(size=coord.layouts[key].size) * 0.1
                  for key in nn.MODULE_KEYS}
        coord.submit_gradient(k % 5, bundle)
    ok, err = coord.equivalence_check()
    return ok, f"{submissions} submissions, max rel deviation {err:.2e}"


# -- fairness bounds ------------------------------------------------------------------


def check_fairness_bounds(seed: int = 0, rounds: int = 200) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    for _ in range(rounds):
        n = int(rng.integers(1, 12))
        x = rng.exponential(size=n)
        f = jain_fairness(x)
        if not (1.0 / n - 1e-12 <= f <= 1.0 + 1e-12):
            return False, f"fairness {f} outside [1/{n}, 1] for {x}"
        if jain_fairness(np.full(n, float(rng.uniform(0.1, 5)))) < 1.0 - 1e-12:
            return False, "equal allocations must score 1"
    return True, f"{rounds} random allocations stayed within [1/n, 1]"


# -- retraining trigger ---------------------------------------------------------------


def check_retrain_patterns() -> tuple[bool, str]:
    """Hand-derived trigger patterns for the loss-above-running-mean rule."""
    cases = [
        ([1.0, 2.0, 3.0], [True, True, True]),      # worsening: always retrain
        ([3.0, 2.0, 1.0], [True, False, False]),    # improving: only the cold start
        ([2.0, 2.0, 2.0], [True, False, False]),    # flat: never above the mean
        ([1.0, 1.0, 5.0, 1.0], [True, False, True, False]),  # spike triggers once
    ]
    for losses, want in cases:
        mon = RetrainMonitor(history=10)
        got = [mon.check_and_push(l) for l in losses]
        if got != want:
            return False, f"losses {losses}: got {got}, want {want}"
    return True, f"{len(cases)} scripted loss sequences produced the derived patterns"


# -- umbrella --------------------------------------------------------------------------


def run_all(seed: int = 0) -> dict[str, tuple[bool, str]]:
    return {
        "auction-brute-force": check_auction(seed),
        "gradient-finite-difference": check_gradients(seed),
        "policy-score-identity": check_score_identity(seed),
        "meta-update-equivalence": check_meta_equivalence(seed),
        "fairness-bounds": check_fairness_bounds(seed),
        "retrain-trigger-patterns": check_retrain_patterns(),
    }
