"""Simulated speedup of every engine against autoregressive decoding.

    python scripts/speedup_table.py [--alpha 0.9] [--c 4] [--seeds 50]
"""
import argparse

import numpy as np

from specbranch import pipesim, toylm
from specbranch.engines import run_adaedl, run_autoregressive, run_pearl, run_sps, run_specbranch
from specbranch.hrad import PolicyConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--alpha", type=float, default=0.9)
    ap.add_argument("--c", type=float, default=4.0)
    ap.add_argument("--gamma", type=int, default=4)
    ap.add_argument("--seeds", type=int, default=50)
    ap.add_argument("--max-len", type=int, default=128)
    args = ap.parse_args()
    pair = toylm.make_pair(8, 1, args.alpha, args.c, 0)
    g = args.gamma
    ent = PolicyConfig(epsilon=0.2, gamma_max=g, policy_kind="entropy")
    orc = PolicyConfig(gamma_max=g, policy_kind="oracle")
    fixed = PolicyConfig(gamma_max=g, policy_kind="fixed")
    engines = {
        "ar": lambda rng: run_autoregressive(pair, [0], args.max_len, rng),
        "sps": lambda rng: run_sps(pair, [0], args.max_len, g, rng),
        "adaedl": lambda rng: run_adaedl(pair, [0], args.max_len, ent, rng),
        "pearl": lambda rng: run_pearl(pair, [0], args.max_len, g, rng),
        "specbranch": lambda rng: run_specbranch(pair, [0], args.max_len, orc, None, 6, rng),
        "specbranch_fixed": lambda rng: run_specbranch(pair, [0], args.max_len, fixed, None, 6, rng),
    }
    runs = {name: [fn(np.random.default_rng(s)) for s in range(args.seeds)] for name, fn in engines.items()}
    cost = pipesim.CostModel(1.0, args.c)
    print("engine,M,RB,tokens_per_time,speedup")
    for r in pipesim.speedup_report(runs, cost):
        print(f"{r['engine']},{r['M']:.3f},{r['RB']:.3f},{r['tokens_per_time']:.4f},{r['speedup']:.3f}")


if __name__ == "__main__":
    main()
