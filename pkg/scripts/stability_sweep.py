#!/usr/bin/env python3
"""Run check-stability for one or more config files.

    python3 scripts/stability_sweep.py scripts/configs/desk.json scripts/configs/proof_topology.json

Output paths in the configs are relative to the working directory; missing
directories are created.
"""
import os
import sys

from so3stab.cli import load_config, main as cli


def main(paths):
    status = 0
    for path in paths:
        cfg = load_config(path, [])
        for out in (cfg.out_csv, cfg.out_json):
            if out and os.path.dirname(out):
                os.makedirs(os.path.dirname(out), exist_ok=True)
        print(f"== {path}")
        status = max(status, cli(["check-stability", "--config", path]))
    return status


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:] or ["scripts/configs/smoke.json"]))
