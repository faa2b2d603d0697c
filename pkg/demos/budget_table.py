"""Print CBP, step counts and i.i.d. epochs for the shipped presets.

Usage: python demos/budget_table.py [N ...]
"""

import sys

from ocssl.budget import BudgetSpec, cbp, iid_epochs, iid_slack, n_steps

SETTINGS = [
    ("high: replay b_s+b_r, n_p=3", dict(b=138, n_p=3, b_r=128, composition="b_s+b_r")),
    ("low: replay b_s+b_r, n_p=1", dict(b=30, n_p=1, b_r=20, composition="b_s+b_r")),
    ("low: stream only, n_p=3", dict(b=10, n_p=3)),
]


def main(sizes):
    print(f"{'setting':32s} {'N':>7s} {'steps':>7s} {'cbp':>11s} {'iid ep':>7s} {'slack':>6s}")
    for N in sizes:
        for label, kw in SETTINGS:
            spec = BudgetSpec(n_v=2, b_s=10, N=N, label=label, **kw)
            print(f"{label:32s} {N:7d} {n_steps(spec):7d} {cbp(spec):11,d} {iid_epochs(spec):7d} {iid_slack(spec):6d}")


if __name__ == "__main__":
    main([int(a) for a in sys.argv[1:]] or [45_000, 1_800])
