"""Rollback rate of PEARL against SpecBranch with a trained predictor and with the oracle.

    python scripts/rollback_comparison.py [--seeds 50] [--alphas 0.3,0.5]
"""
import argparse

import numpy as np
from scipy.stats import binomtest

from specbranch import hrad, toylm
from specbranch.engines import metrics, run_pearl, run_specbranch
from specbranch.hrad import PolicyConfig


def compare(alpha, seeds, max_len=65, gamma=4, k_max=6):
    pair = toylm.make_pair(32, 1, alpha, 4.0, 0, sharpness=12, easy_fraction=0.25)
    clf = hrad.train_mlp(hrad.generate_examples(pair, 300, gamma, np.random.default_rng(5)), seed=0)
    hyb = PolicyConfig(policy_kind="hybrid", gamma_max=gamma)
    orc = PolicyConfig(policy_kind="oracle", gamma_max=gamma)
    rb = {"pearl": [], "hybrid": [], "oracle": []}
    for s in range(seeds):
        rng = lambda: np.random.default_rng(s)  # noqa: E731
        rb["pearl"].append(metrics(run_pearl(pair, [0], max_len, gamma, rng()))["RB"])
        rb["hybrid"].append(metrics(run_specbranch(pair, [0], max_len, hyb, clf, k_max, rng()))["RB"])
        rb["oracle"].append(metrics(run_specbranch(pair, [0], max_len, orc, None, k_max, rng()))["RB"])
    wins = sum(h < p for h, p in zip(rb["hybrid"], rb["pearl"]))
    losses = sum(h > p for h, p in zip(rb["hybrid"], rb["pearl"]))
    pval = binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue if wins + losses else 1.0
    return {k: float(np.median(v)) for k, v in rb.items()}, pval


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=50)
    ap.add_argument("--alphas", default="0.3,0.5")
    args = ap.parse_args()
    print("alpha,RB_pearl,RB_hybrid,RB_oracle,sign_test_p")
    for a in (float(v) for v in args.alphas.split(",")):
        med, p = compare(a, args.seeds)
        print(f"{a},{med['pearl']:.4f},{med['hybrid']:.4f},{med['oracle']:.4f},{p:.2e}")


if __name__ == "__main__":
    main()
