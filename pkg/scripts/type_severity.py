#!/usr/bin/env python3
"""Mean output relative RMSE of a random network under the four typed fields.

Two protocols: a fixed input for every field seed (as check-stability does)
and an input that changes with the field seed.  The ordering of types 2 and 4
is input dependent for random ReLU networks, so both are shown.
"""
import argparse
import statistics

from so3stab.ingest import synth_signal
from so3stab.metrics import relative_rmse
from so3stab.perturb import apply_diffeo, make_type
from so3stab.scnn import forward, random_network
from so3stab.so3 import default_quadrature
from so3stab.sphere import EquiangularGrid


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--features", default="1,4,4,8")
    p.add_argument("--network-seed", type=int, default=0)
    a = p.parse_args()

    g = EquiangularGrid(a.resolution, a.resolution)
    q = default_quadrature(g)
    net = random_network([int(f) for f in a.features.split(",")], seed=a.network_seed)
    for label, input_seed in (("fixed input", lambda s: 0), ("input per seed", lambda s: s)):
        err = {k: [] for k in (1, 2, 3, 4)}
        for s in range(a.seeds):
            x = synth_signal("gaussian_mixture", g, seed=input_seed(s))
            y = forward(net, x, q)
            for k in err:
                err[k].append(relative_rmse(y, forward(net, apply_diffeo(x, make_type(k, s, g)), q)))
        print(label + ": " + ", ".join(f"type{k} {statistics.fmean(v):.3e}" for k, v in err.items()))


if __name__ == "__main__":
    main()
