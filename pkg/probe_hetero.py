"""Scratch probe: per-kind OFR in a mixed population vs pure populations."""

import dataclasses
import json
import sys
import time

import numpy as np

from edgemarket.scenarios import preset, run_world

N_BIDDERS = int(sys.argv[1]) if len(sys.argv) > 1 else 11
WEALTH = float(sys.argv[2]) if len(sys.argv) > 2 else 100.0
SEEDS = [101, 102, 103, 104, 105]
CKPT = "/tmp/probe_ckpt.npz"

if N_BIDDERS == 11:
    MIX = ("moody",) * 5 + ("ac",) * 2 + ("draco2like",) * 2 + ("random",) * 2
elif N_BIDDERS == 12:
    MIX = ("moody",) * 6 + ("ac",) * 2 + ("draco2like",) * 2 + ("random",) * 2
else:
    raise SystemExit(f"no mix defined for {N_BIDDERS}")


def load_ckpt():
    data = np.load(CKPT, allow_pickle=False)
    steps = int(data["__steps"])
    params = {k: data[k] for k in data.files if k != "__steps"}
    return params, steps


def kind_ofr(res, kind):
    fl = rv = 0.0
    for pb in res.report["per_bidder"]:
        if pb["algo"] == kind:
            fl += pb["final_losses"]
            rv += pb["successes"] + pb["final_losses"]
    return fl / max(rv, 1.0)


def main():
    params, steps = load_ckpt()
    base = preset("test")
    t0 = time.time()
    out = {}
    pops = {"mix": MIX,
            "pure_draco2like": ("draco2like",) * N_BIDDERS,
            "pure_random": ("random",) * N_BIDDERS}
    for name, algos in pops.items():
        for seed in SEEDS:
            cfg = dataclasses.replace(base, algos=algos, seed=seed,
                                      initial_wealth=WEALTH)
            res = run_world(cfg, generic_params=params, generic_steps_trained=steps)
            rec = {k: kind_ofr(res, k) for k in ("moody", "ac", "draco2like", "random")}
            out[f"{name}_{seed}"] = rec
            print(f"{name} s{seed}: done ({time.time()-t0:.0f}s) {rec}", flush=True)

    with open(f"/tmp/probe_hetero_{N_BIDDERS}_{int(WEALTH)}.json", "w") as f:
        json.dump(out, f)

    # pure ac/moody OFR per seed from the comparative probe JSON if present
    try:
        comp = json.load(open(f"/tmp/probe_windows_{N_BIDDERS}_{int(WEALTH)}.json"))
    except OSError:
        comp = None
        print("no comparative JSON for pure moody/ac; run probe_comparative first")

    for kind, pure in (("ac", None), ("draco2like", "pure_draco2like"),
                       ("random", "pure_random")):
        diffs = []
        for seed in SEEDS:
            mix_v = out[f"mix_{seed}"][kind]
            if pure is None:
                if comp is None:
                    break
                pure_v = comp[f"ac_{seed}"]["ofr_total"]
            else:
                pure_v = out[f"{pure}_{seed}"][kind]
            diffs.append(mix_v - pure_v)
        if diffs:
            sgn = sum(1 for d in diffs if d < 0)
            print(f"{kind}: mix-pure {sgn}/5 {['%+.5f' % d for d in diffs]} "
                  f"mean {np.mean(diffs):+.5f}", flush=True)
    print(f"total {time.time()-t0:.0f}s")


if __name__ == "__main__":
    main()
