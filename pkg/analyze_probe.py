"""Scratch analysis: OFR/fairness aggregation variants over a full probe dump."""

import json
import sys

import numpy as np

PATH = sys.argv[1] if len(sys.argv) > 1 else "/tmp/probe_full_11_100.json"
SEEDS = [101, 102, 103, 104, 105]


def jain(xs):
    xs = np.asarray(xs, float)
    s = xs.sum()
    q = (xs * xs).sum()
    return 1.0 if q <= 0 else float(s * s / (len(xs) * q))


def main():
    d = json.load(open(PATH))
    series = {k: v["series"] for k, v in d.items()}

    for cut in (0, 5, 10, 15, 20, 25):
        rows = {}
        for seed in SEEDS:
            per = {}
            for algo in ("moody", "ac"):
                s = series[f"{algo}_{seed}"][cut:]
                lb = np.sum([w["lb"] for w in s], axis=0)
                rb = np.sum([w["rb"] for w in s], axis=0)
                pooled = lb.sum() / max(rb.sum(), 1.0)
                with np.errstate(invalid="ignore", divide="ignore"):
                    ratios = np.where(rb > 0, lb / np.maximum(rb, 1e-12), np.nan)
                indiv = float(np.nanmean(ratios))
                fair = np.mean([w["fair"] for w in s if w["fair"] is not None])
                per[algo] = (pooled, indiv, fair)
            rows[seed] = per
        pooled_d = [rows[s]["moody"][0] - rows[s]["ac"][0] for s in SEEDS]
        indiv_d = [rows[s]["moody"][1] - rows[s]["ac"][1] for s in SEEDS]
        fair_d = [rows[s]["moody"][2] - rows[s]["ac"][2] for s in SEEDS]
        print(f"cut {cut:2d}: pooled {sum(1 for x in pooled_d if x < 0)}/5 "
              f"{['%+.5f' % x for x in pooled_d]}")
        print(f"        indiv  {sum(1 for x in indiv_d if x < 0)}/5 "
              f"{['%+.5f' % x for x in indiv_d]}")
        print(f"        fair   {sum(1 for x in fair_d if x > 0)}/5 "
              f"{['%+.4f' % x for x in fair_d]}")
        print()


if __name__ == "__main__":
    main()
