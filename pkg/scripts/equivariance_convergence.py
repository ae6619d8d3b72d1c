#!/usr/bin/env python3
"""Interpolation-regime equivariance error against resolution.

Prints max and median relative RMSE of rotate(H x) vs H(rotate x) for a
filter and a 3-layer network over random rotations, one row per resolution.
"""
import argparse
import statistics

import numpy as np

from so3stab.ingest import synth_signal
from so3stab.metrics import FilterOperator, NetworkOperator, equivariance_report
from so3stab.scnn import random_filter, random_network
from so3stab.so3 import default_quadrature, random_rotations
from so3stab.sphere import EquiangularGrid


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--resolutions", default="16,32,64")
    p.add_argument("--rotations", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--features", default="1,4,4,8")
    a = p.parse_args()

    rots = random_rotations(a.rotations, a.seed)
    h = random_filter(np.random.default_rng(a.seed), 1.0)
    net = random_network([int(f) for f in a.features.split(",")], seed=a.seed)
    print(f"{'res':>7} {'filter max':>11} {'filter med':>11} {'net max':>11} {'net med':>11}")
    for n in (int(r) for r in a.resolutions.split(",")):
        g = EquiangularGrid(n, n)
        q = default_quadrature(g)
        x = synth_signal("gaussian_mixture", g, seed=a.seed)
        ef = [equivariance_report(FilterOperator(h, q), x, r).relative_rmse for r in rots]
        en = [equivariance_report(NetworkOperator(net, q), x, r).relative_rmse for r in rots]
        print(f"{n:>3}x{n:<3} {max(ef):11.3e} {statistics.median(ef):11.3e} {max(en):11.3e} {statistics.median(en):11.3e}")


if __name__ == "__main__":
    main()
