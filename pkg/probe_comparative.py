"""Scratch probe: comparative OFR/fairness between pure populations at varying counts."""

import dataclasses
import json
import sys
import time

import numpy as np

from edgemarket import nn
from edgemarket.baselines import PopulationModel
from edgemarket.scenarios import preset, run_world

N_BIDDERS = int(sys.argv[1]) if len(sys.argv) > 1 else 8
WEALTH = float(sys.argv[2]) if len(sys.argv) > 2 else 100.0
ARRIVAL = float(sys.argv[3]) if len(sys.argv) > 3 else None
WINDOW = int(sys.argv[4]) if len(sys.argv) > 4 else None
SEEDS = [101, 102, 103, 104, 105]
CKPT = "/tmp/probe_ckpt.npz"
AC_COHORT = "/tmp/cohort_ac.npz"


def load_ckpt():
    data = np.load(CKPT, allow_pickle=False)
    steps = int(data["__steps"])
    params = {k: data[k] for k in data.files if k != "__steps"}
    return params, steps


def jain(xs):
    xs = np.asarray(xs, dtype=float)
    s = float(np.sum(xs))
    q = float(np.sum(xs * xs))
    if q <= 0:
        return 1.0
    return s * s / (len(xs) * q)


def extract(res):
    wins = {}
    for r in res.metrics.rows:
        w = int(r.window)
        rec = wins.setdefault(w, {"loss": 0.0, "res": 0.0, "fair": None,
                                  "pay": {}, "lb": {}, "rb": {}})
        if r.bidder == "SYSTEM" and r.metric == "fairness":
            rec["fair"] = float(r.value)
        elif r.bidder != "SYSTEM" and r.metric == "losses":
            rec["loss"] += float(r.value)
            rec["lb"][r.bidder] = float(r.value)
        elif r.bidder != "SYSTEM" and r.metric == "resolved":
            rec["res"] += float(r.value)
            rec["rb"][r.bidder] = float(r.value)
        elif r.bidder != "SYSTEM" and r.metric == "payments":
            rec["pay"][r.bidder] = float(r.value)
    out = []
    for w in sorted(wins):
        rec = wins[w]
        for f in ("pay", "lb", "rb"):
            rec[f] = [rec[f][k] for k in sorted(rec[f], key=int)]
        out.append(rec)
    pbs = res.report["per_bidder"]
    resets = sum(pb["budget_resets"] for pb in pbs)
    fl = sum(pb["final_losses"] for pb in pbs)
    rv = sum(pb["successes"] + pb["final_losses"] for pb in pbs)
    return out, resets, fl, rv


def main():
    params, steps = load_ckpt()
    arch, cohort, meta = nn.load_population(AC_COHORT)
    ac_model = PopulationModel("ac", cohort, int(meta["steps_trained"]))
    base = preset("test")
    t0 = time.time()
    data = {}
    for algo in ("moody", "ac"):
        for seed in SEEDS:
            kw = {"algos": (algo,) * N_BIDDERS, "seed": seed,
                  "initial_wealth": WEALTH}
            if ARRIVAL is not None:
                kw["vehicle_mean_interarrival_ms"] = ARRIVAL
            if WINDOW is not None:
                kw["window_steps"] = WINDOW
            cfg = dataclasses.replace(base, **kw)
            res = run_world(cfg, generic_params=params, generic_steps_trained=steps,
                            baseline_models={"ac": ac_model})
            series, resets, fl, rv = extract(res)
            data[f"{algo}_{seed}"] = {"series": series, "resets": resets,
                                      "ofr_total": fl / max(rv, 1)}
            print(f"{algo} s{seed}: done ({time.time()-t0:.0f}s) resets={resets} "
                  f"ofr_total={fl/max(rv,1):.5f}", flush=True)

    suffix = f"_{int(ARRIVAL)}" if ARRIVAL is not None else ""
    if WINDOW is not None:
        suffix += f"_w{WINDOW}"
    with open(f"/tmp/probe_full_{N_BIDDERS}_{int(WEALTH)}{suffix}.json", "w") as f:
        json.dump(data, f)

    n_win = len(data[f"moody_{SEEDS[0]}"]["series"])
    for frac in (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8):
        cut = int(n_win * frac)
        fm, cm, om = [], [], []
        for seed in SEEDS:
            pair = []
            for algo in ("moody", "ac"):
                s = data[f"{algo}_{seed}"]["series"][cut:]
                fair = np.mean([w["fair"] for w in s if w["fair"] is not None])
                cum = jain(np.sum([w["pay"] for w in s], axis=0))
                loss = sum(w["loss"] for w in s)
                resv = sum(w["res"] for w in s)
                pair.append((fair, cum, loss / max(resv, 1.0)))
            fm.append(pair[0][0] - pair[1][0])
            cm.append(pair[0][1] - pair[1][1])
            om.append(pair[0][2] - pair[1][2])
        fsign = sum(1 for d in fm if d > 0)
        csign = sum(1 for d in cm if d > 0)
        osign = sum(1 for d in om if d < 0)
        print(f"== cut {cut:2d}: fair {fsign}/5 {['%+.4f' % d for d in fm]}  "
              f"cum {csign}/5 {['%+.4f' % d for d in cm]}  "
              f"ofr {osign}/5 {['%+.5f' % d for d in om]}", flush=True)
    print(f"total {time.time()-t0:.0f}s")


if __name__ == "__main__":
    main()
