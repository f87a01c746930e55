"""Minimal exact-gradient neural toolkit (numpy only).

Four fixed architectures cover the whole learning stack:

* policy/value net: shared 2-layer tanh trunk over the stacked observation,
  per-bid heads (Bernoulli submit/backoff + categorical price level) and a
  scalar critic head;
* behavioral net: same container as the policy net, trained by cloning;
* curiosity: one-hidden-layer forward model (next observation) and inverse
  model (action summary), both squared-error;
* credit: vanilla recurrent cell plus additive attention over a downsampled
  reward window, with a scalar long-term-reward head.

There is no general autodiff: every gradient is hand-derived for its
architecture and validated against central finite differences in the test
suite. Parameters live in flat vectors with a shared layout descriptor so
local learners and the meta coordinator exchange raw arrays.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, asdict
from typing import Callable, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

MODULE_KEYS = ("actor_critic", "supervised", "curiosity", "credit")

# Coordinator step size for folding submitted gradients into the shared
# initialization.  Agents pre-scale their submissions by (local lr / META_LR)
# so one submission moves the shared model by exactly one locally sized step.
META_LR = 0.1


# ---------------------------------------------------------------------------
# Flat parameter storage


class ParamLayout:
    """Ordered (name, shape) entries mapped onto one flat float64 vector."""

    def __init__(self, entries: Sequence[tuple[str, tuple[int, ...]]]):
        self.entries = [(name, tuple(shape)) for name, shape in entries]
        self.offsets = {}
        off = 0
        for name, shape in self.entries:
            size = int(np.prod(shape)) if shape else 1
            self.offsets[name] = (off, off + size, shape)
            off += size
        self.size = off

    def view(self, theta: np.ndarray, name: str) -> np.ndarray:
        lo, hi, shape = self.offsets[name]
        return theta[lo:hi].reshape(shape)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.size)

    def init(self, rng: np.random.Generator) -> np.ndarray:
        """Fan-in scaled normal weights, zero biases."""
        theta = self.zeros()
        for name, shape in self.entries:
            if len(shape) == 2:
                self.view(theta, name)[:] = rng.normal(0.0, 1.0 / np.sqrt(shape[1]), shape)
            elif name.startswith("w"):  # vector weights feeding a scalar head
                fan = shape[0] if shape else 1
                self.view(theta, name)[:] = rng.normal(0.0, 1.0 / np.sqrt(fan), shape)
            # biases stay zero
        return theta

    def fingerprint(self) -> str:
        return json.dumps(self.entries)


def sgd_step(theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    """Plain ascent step theta + lr * grad; non-finite gradients are rejected."""
    if theta.shape != grad.shape:
        raise ValueError("gradient shape does not match parameters")
    if not np.all(np.isfinite(grad)):
        log.warning("non-finite gradient rejected; step skipped")
        return theta
    return theta + lr * grad


# ---------------------------------------------------------------------------
# Numerics


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise softmax restricted to mask==True entries (rows need >= 1 allowed)."""
    logits = np.asarray(logits, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if not np.all(mask.any(axis=-1)):
        raise ValueError("softmax mask leaves no allowed entry")
    shifted = np.where(mask, logits, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted) * mask
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Architecture description


@dataclass(frozen=True)
class ArchConfig:
    phi_dim: int            # stacked observation fed to trunk and curiosity
    bid_dim: int            # per-bid feature vector appended to the trunk output
    credit_in_dim: int      # per-segment aggregate fed to the recurrent cell
    hidden1: int = 32
    hidden2: int = 32
    price_levels: int = 11
    action_dim: int = 2     # curiosity/credit action summary
    curiosity_hidden: int = 32
    credit_hidden: int = 16
    credit_attn: int = 16
    segments: int = 50

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @staticmethod
    def from_json(s: str) -> "ArchConfig":
        return ArchConfig(**json.loads(s))


# ---------------------------------------------------------------------------
# Policy / value network


@dataclass
class PolicyOutput:
    submit_prob: np.ndarray   # (J,) Bernoulli parameter per pipeline bid
    level_probs: np.ndarray   # (J, L) categorical over the price grid
    value: float


class PolicyValueNet:
    """Shared-trunk actor-critic; also serves as the behavioral-clone container."""

    def __init__(self, cfg: ArchConfig):
        self.cfg = cfg
        head_in = cfg.hidden2 + cfg.bid_dim
        self.layout = ParamLayout([
            ("W1", (cfg.hidden1, cfg.phi_dim)),
            ("b1", (cfg.hidden1,)),
            ("W2", (cfg.hidden2, cfg.hidden1)),
            ("b2", (cfg.hidden2,)),
            ("wb", (head_in,)),
            ("bb", (1,)),
            ("Wp", (cfg.price_levels, head_in)),
            ("bp", (cfg.price_levels,)),
            ("wv", (cfg.hidden2,)),
            ("bv", (1,)),
        ])

    # -- forward ------------------------------------------------------------

    def _trunk(self, theta, phi):
        v = self.layout.view
        h1 = np.tanh(v(theta, "W1") @ phi + v(theta, "b1"))
        h2 = np.tanh(v(theta, "W2") @ h1 + v(theta, "b2"))
        return h1, h2

    def forward(self, theta: np.ndarray, phi: np.ndarray, bid_feats: np.ndarray,
                level_masks: Optional[np.ndarray] = None) -> PolicyOutput:
        """Distributions for every pipeline bid plus the state value."""
        v = self.layout.view
        _, h2 = self._trunk(theta, phi)
        J = bid_feats.shape[0]
        if level_masks is None:
            level_masks = np.ones((J, self.cfg.price_levels), dtype=bool)
        if J:
            X = np.concatenate([np.repeat(h2[None, :], J, axis=0), bid_feats], axis=1)
            submit = sigmoid(X @ v(theta, "wb") + v(theta, "bb")[0])
            levels = masked_softmax(X @ v(theta, "Wp").T + v(theta, "bp"), level_masks)
        else:
            submit = np.zeros(0)
            levels = np.zeros((0, self.cfg.price_levels))
        value = float(v(theta, "wv") @ h2 + v(theta, "bv")[0])
        return PolicyOutput(submit, levels, value)

    def value(self, theta: np.ndarray, phi: np.ndarray) -> float:
        v = self.layout.view
        _, h2 = self._trunk(theta, phi)
        return float(v(theta, "wv") @ h2 + v(theta, "bv")[0])

    # -- sampling -----------------------------------------------------------

    def sample_actions(self, theta, phi, bid_feats, level_masks, forced_backoff,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Draw (alpha, level) per bid; forced bids back off with probability one."""
        out = self.forward(theta, phi, bid_feats, level_masks)
        J = bid_feats.shape[0]
        alpha = np.zeros(J, dtype=int)
        level = np.full(J, -1, dtype=int)
        for j in range(J):
            if forced_backoff[j]:
                continue
            if rng.random() < out.submit_prob[j]:
                alpha[j] = 1
                cdf = np.cumsum(out.level_probs[j])
                u = rng.random() * cdf[-1]
                k = int(np.searchsorted(cdf, u, side="right"))
                k = min(k, self.cfg.price_levels - 1)
                while not level_masks[j, k]:  # guard against float dust on masked entries
                    k = (k + 1) % self.cfg.price_levels
                level[j] = k
        return alpha, level

    # -- exact gradients ------------------------------------------------------

    def log_prob(self, theta, phi, bid_feats, alpha, level, level_masks, forced_backoff) -> float:
        lp, _ = self._log_prob_impl(theta, phi, bid_feats, alpha, level,
                                    level_masks, forced_backoff, want_grad=False)
        return lp

    def grad_log_prob(self, theta, phi, bid_feats, alpha, level, level_masks,
                      forced_backoff) -> tuple[float, np.ndarray]:
        return self._log_prob_impl(theta, phi, bid_feats, alpha, level,
                                   level_masks, forced_backoff, want_grad=True)

    def _log_prob_impl(self, theta, phi, bid_feats, alpha, level, level_masks,
                       forced_backoff, want_grad):
        v = self.layout.view
        cfg = self.cfg
        J = bid_feats.shape[0]
        h1, h2 = self._trunk(theta, phi)
        grad = self.layout.zeros() if want_grad else None
        if J == 0:
            return 0.0, grad
        X = np.concatenate([np.repeat(h2[None, :], J, axis=0), bid_feats], axis=1)
        bo = X @ v(theta, "wb") + v(theta, "bb")[0]
        p = sigmoid(bo)
        probs = masked_softmax(X @ v(theta, "Wp").T + v(theta, "bp"), level_masks)

        free = ~np.asarray(forced_backoff, dtype=bool)
        alpha = np.asarray(alpha, dtype=int)
        lp = 0.0
        dbo = np.zeros(J)
        dY = np.zeros((J, cfg.price_levels))
        for j in range(J):
            if not free[j]:
                if alpha[j] != 0:
                    raise ValueError("submitted action recorded for a forced backoff")
                continue
            pj = p[j]
            prob_alpha = pj if alpha[j] == 1 else 1.0 - pj
            if prob_alpha <= 0.0:
                raise ValueError("zero-probability backoff action")
            lp += np.log(prob_alpha)
            dbo[j] = alpha[j] - pj
            if alpha[j] == 1:
                lj = int(level[j])
                if lj < 0 or not level_masks[j, lj] or probs[j, lj] <= 0.0:
                    raise ValueError("zero-probability price level")
                lp += np.log(probs[j, lj])
                dY[j] = -probs[j]
                dY[j, lj] += 1.0
        if not want_grad:
            return float(lp), None

        g = self.layout.view
        g(grad, "wb")[:] = X.T @ dbo
        g(grad, "bb")[0] = dbo.sum()
        g(grad, "Wp")[:] = dY.T @ X
        g(grad, "bp")[:] = dY.sum(axis=0)
        dX = dbo[:, None] * v(theta, "wb")[None, :] + dY @ v(theta, "Wp")
        dh2 = dX[:, :cfg.hidden2].sum(axis=0)
        self._trunk_backward(theta, grad, phi, h1, h2, dh2)
        return float(lp), grad

    def grad_value(self, theta, phi) -> tuple[float, np.ndarray]:
        v = self.layout.view
        h1, h2 = self._trunk(theta, phi)
        val = float(v(theta, "wv") @ h2 + v(theta, "bv")[0])
        grad = self.layout.zeros()
        g = self.layout.view
        g(grad, "wv")[:] = h2
        g(grad, "bv")[0] = 1.0
        self._trunk_backward(theta, grad, phi, h1, h2, v(theta, "wv").copy())
        return val, grad

    def _trunk_backward(self, theta, grad, phi, h1, h2, dh2):
        v, g = self.layout.view, self.layout.view
        da2 = dh2 * (1.0 - h2 * h2)
        g(grad, "W2")[:] += np.outer(da2, h1)
        g(grad, "b2")[:] += da2
        dh1 = v(theta, "W2").T @ da2
        da1 = dh1 * (1.0 - h1 * h1)
        g(grad, "W1")[:] += np.outer(da1, phi)
        g(grad, "b1")[:] += da1


# ---------------------------------------------------------------------------
# Curiosity (forward + inverse models)


class CuriosityNet:
    def __init__(self, cfg: ArchConfig):
        self.cfg = cfg
        H = cfg.curiosity_hidden
        self.layout = ParamLayout([
            ("Wf1", (H, cfg.phi_dim + cfg.action_dim)),
            ("bf1", (H,)),
            ("Wf2", (cfg.phi_dim, H)),
            ("bf2", (cfg.phi_dim,)),
            ("Wi1", (H, 2 * cfg.phi_dim)),
            ("bi1", (H,)),
            ("Wi2", (cfg.action_dim, H)),
            ("bi2", (cfg.action_dim,)),
        ])

    def forward_loss(self, theta, phi, action, phi_next) -> float:
        loss, _ = self._forward_impl(theta, phi, action, phi_next, want_grad=False)
        return loss

    def grad_forward_loss(self, theta, phi, action, phi_next) -> tuple[float, np.ndarray]:
        return self._forward_impl(theta, phi, action, phi_next, want_grad=True)

    def _forward_impl(self, theta, phi, action, phi_next, want_grad):
        v = self.layout.view
        u = np.concatenate([phi, action])
        h = np.tanh(v(theta, "Wf1") @ u + v(theta, "bf1"))
        pred = v(theta, "Wf2") @ h + v(theta, "bf2")
        d = pred - phi_next
        loss = float(d @ d) / self.cfg.phi_dim
        if not want_grad:
            return loss, None
        grad = self.layout.zeros()
        g = self.layout.view
        dpred = 2.0 * d / self.cfg.phi_dim
        g(grad, "Wf2")[:] = np.outer(dpred, h)
        g(grad, "bf2")[:] = dpred
        dh = v(theta, "Wf2").T @ dpred
        dz = dh * (1.0 - h * h)
        g(grad, "Wf1")[:] = np.outer(dz, u)
        g(grad, "bf1")[:] = dz
        return loss, grad

    def inverse_loss(self, theta, phi, phi_next, action) -> float:
        loss, _ = self._inverse_impl(theta, phi, phi_next, action, want_grad=False)
        return loss

    def grad_inverse_loss(self, theta, phi, phi_next, action) -> tuple[float, np.ndarray]:
        return self._inverse_impl(theta, phi, phi_next, action, want_grad=True)

    def _inverse_impl(self, theta, phi, phi_next, action, want_grad):
        v = self.layout.view
        u = np.concatenate([phi, phi_next])
        h = np.tanh(v(theta, "Wi1") @ u + v(theta, "bi1"))
        pred = v(theta, "Wi2") @ h + v(theta, "bi2")
        d = pred - action
        loss = float(d @ d) / self.cfg.action_dim
        if not want_grad:
            return loss, None
        grad = self.layout.zeros()
        g = self.layout.view
        dpred = 2.0 * d / self.cfg.action_dim
        g(grad, "Wi2")[:] = np.outer(dpred, h)
        g(grad, "bi2")[:] = dpred
        dh = v(theta, "Wi2").T @ dpred
        dz = dh * (1.0 - h * h)
        g(grad, "Wi1")[:] = np.outer(dz, u)
        g(grad, "bi1")[:] = dz
        return loss, grad


# ---------------------------------------------------------------------------
# Credit assignment (recurrent cell + additive attention)


class CreditNet:
    """Reads a window of segment aggregates; emits attention weights that
    redistribute a delayed reward plus a scalar prediction of that reward."""

    def __init__(self, cfg: ArchConfig):
        self.cfg = cfg
        Hr, Ha = cfg.credit_hidden, cfg.credit_attn
        self.layout = ParamLayout([
            ("Wx", (Hr, cfg.credit_in_dim)),
            ("Wh", (Hr, Hr)),
            ("bh", (Hr,)),
            ("Wa", (Ha, Hr)),
            ("ba", (Ha,)),
            ("wa", (Ha,)),
            ("wy", (Hr,)),
            ("by", (1,)),
        ])

    def recurrent_forward(self, theta, X) -> tuple[np.ndarray, np.ndarray, float]:
        """Returns (hidden states (T,Hr), attention weights (T,), prediction)."""
        v = self.layout.view
        X = np.atleast_2d(np.asarray(X, dtype=float))
        T = X.shape[0]
        if T == 0:
            raise ValueError("empty sequence")
        Hr = self.cfg.credit_hidden
        H = np.zeros((T, Hr))
        h = np.zeros(Hr)
        Wx, Wh, bh = v(theta, "Wx"), v(theta, "Wh"), v(theta, "bh")
        for t in range(T):
            h = np.tanh(Wx @ X[t] + Wh @ h + bh)
            H[t] = h
        U = np.tanh(H @ v(theta, "Wa").T + v(theta, "ba"))
        scores = U @ v(theta, "wa")
        scores = scores - scores.max()
        e = np.exp(scores)
        eps = e / e.sum()
        ctx = eps @ H
        y_hat = float(v(theta, "wy") @ ctx + v(theta, "by")[0])
        return H, eps, y_hat

    def predict(self, theta, X) -> float:
        return self.recurrent_forward(theta, X)[2]

    def loss(self, theta, X, y) -> float:
        return float((self.predict(theta, X) - y) ** 2)

    def grad_loss(self, theta, X, y) -> tuple[float, np.ndarray]:
        """Squared prediction error and its exact gradient (BPTT + attention)."""
        v = self.layout.view
        X = np.atleast_2d(np.asarray(X, dtype=float))
        T = X.shape[0]
        H, eps, y_hat = self.recurrent_forward(theta, X)
        U = np.tanh(H @ v(theta, "Wa").T + v(theta, "ba"))
        loss = float((y_hat - y) ** 2)

        grad = self.layout.zeros()
        g = self.layout.view
        dy = 2.0 * (y_hat - y)
        ctx = eps @ H
        g(grad, "wy")[:] = dy * ctx
        g(grad, "by")[0] = dy
        dctx = dy * v(theta, "wy")

        dH = eps[:, None] * dctx[None, :]          # from the context sum
        deps = H @ dctx                            # (T,)
        ds = eps * (deps - float(eps @ deps))      # softmax backward
        # attention scorer: s_t = wa . tanh(Wa h_t + ba)
        g(grad, "wa")[:] = U.T @ ds
        dU = ds[:, None] * v(theta, "wa")[None, :]
        dA = dU * (1.0 - U * U)                    # (T, Ha)
        g(grad, "Wa")[:] = dA.T @ H
        g(grad, "ba")[:] = dA.sum(axis=0)
        dH += dA @ v(theta, "Wa")

        Wh = v(theta, "Wh")
        dWx, dWh, dbh = g(grad, "Wx"), g(grad, "Wh"), g(grad, "bh")
        carry = np.zeros(self.cfg.credit_hidden)
        for t in range(T - 1, -1, -1):
            dh = dH[t] + carry
            dz = dh * (1.0 - H[t] * H[t])
            dWx += np.outer(dz, X[t])
            if t > 0:
                dWh += np.outer(dz, H[t - 1])
            dbh += dz
            carry = Wh.T @ dz
        return loss, grad


# ---------------------------------------------------------------------------
# Finite differences (the independent gradient route used by tests/oracle)


def finite_diff_grad(f: Callable[[np.ndarray], float], theta: np.ndarray,
                     step: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        tp = theta.copy()
        tm = theta.copy()
        tp[i] += step
        tm[i] -= step
        grad[i] = (f(tp) - f(tm)) / (2.0 * step)
    return grad


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))


# ---------------------------------------------------------------------------
# Checkpoints

CHECKPOINT_VERSION = 1


def build_modules(cfg: ArchConfig) -> dict[str, ParamLayout]:
    policy = PolicyValueNet(cfg)
    return {
        "actor_critic": policy.layout,
        "supervised": PolicyValueNet(cfg).layout,
        "curiosity": CuriosityNet(cfg).layout,
        "credit": CreditNet(cfg).layout,
    }


def init_module_params(cfg: ArchConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {key: layout.init(rng) for key, layout in build_modules(cfg).items()}


def save_checkpoint(path, cfg: ArchConfig, params: dict[str, np.ndarray],
                    meta: Optional[dict] = None) -> None:
    header = {
        "version": CHECKPOINT_VERSION,
        "arch": json.loads(cfg.to_json()),
        "meta": meta or {},
    }
    np.savez(path, header=np.array(json.dumps(header)), **params)


def load_checkpoint(path) -> tuple[ArchConfig, dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        cfg = ArchConfig(**header["arch"])
        layouts = build_modules(cfg)
        params = {}
        for key in MODULE_KEYS:
            if key not in data:
                raise ValueError(f"checkpoint missing module {key!r}")
            arr = np.asarray(data[key], dtype=float)
            if arr.size != layouts[key].size:
                raise ValueError(
                    f"checkpoint/architecture mismatch for {key!r}: "
                    f"{arr.size} params vs layout {layouts[key].size}")
            params[key] = arr
    return cfg, params, header["meta"]


def save_population(path, cfg: ArchConfig, params_list: Sequence[dict[str, np.ndarray]],
                    meta: Optional[dict] = None) -> None:
    """One file holding every agent's snapshot from a pretraining cohort."""
    if not params_list:
        raise ValueError("population checkpoint needs at least one agent")
    header = {
        "version": CHECKPOINT_VERSION,
        "arch": json.loads(cfg.to_json()),
        "count": len(params_list),
        "meta": meta or {},
    }
    arrays = {f"agent{i}_{key}": params[key]
              for i, params in enumerate(params_list) for key in params}
    np.savez(path, header=np.array(json.dumps(header)), **arrays)


def load_population(path) -> tuple[ArchConfig, list[dict[str, np.ndarray]], dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        cfg = ArchConfig(**header["arch"])
        layouts = build_modules(cfg)
        params_list = []
        for i in range(int(header["count"])):
            params = {}
            for key in MODULE_KEYS:
                name = f"agent{i}_{key}"
                if name not in data:
                    raise ValueError(f"population checkpoint missing {name!r}")
                arr = np.asarray(data[name], dtype=float)
                if arr.size != layouts[key].size:
                    raise ValueError(
                        f"checkpoint/architecture mismatch for {name!r}: "
                        f"{arr.size} params vs layout {layouts[key].size}")
                params[key] = arr
            params_list.append(params)
    return cfg, params_list, header["meta"]
