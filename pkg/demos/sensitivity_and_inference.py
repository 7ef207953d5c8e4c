"""Exact versus lossless voltage sensitivities, then grid-edge voltage inference.

    python3 demos/sensitivity_and_inference.py
"""
import numpy as np

from gridswarm import analysis, powerflow
from gridswarm.scenario import load_scenario, parse_feeder, resolve
from gridswarm.sensitivity import exact_sensitivity_matrices, lossless_sensitivity


def sensitivity_gap():
    f = parse_feeder(resolve("tree40"))
    net = f.network
    p, q = f.load_injections()
    ll = lossless_sensitivity(net)
    print("loading  max|dV/dQ exact - lossless| / max|lossless|")
    for scale in (0.001, 0.1, 0.5, 1.0, 2.0):
        sol = powerflow.solve(net, scale * p, scale * q)
        ex = exact_sensitivity_matrices(net, sol)
        gap = np.max(np.abs(ex.dv_dq - ll.dv_dq)) / np.max(np.abs(ll.dv_dq))
        print(f"{scale:7.3f}  {gap:.3e}")


def inference():
    cfg = load_scenario("ieee123_scenario")
    for reading in ("difference", "verbatim", "l_increment"):
        rows, _ = analysis.inference_demo(cfg, reading=reading)
        worst = max(r[3] for r in rows)
        print(f"inference reading {reading:<12} max error {100 * worst:.3f}% over {len(rows)} buses")


if __name__ == "__main__":
    sensitivity_gap()
    inference()
