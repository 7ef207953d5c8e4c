"""Reactive-only versus coordinated reactive + curtailment control on the 8500-analog feeder.

Runs the bundled scenario twice and prints how the voltage extremes and the
curtailment evolve.  Takes about 45 s.

    python3 demos/q_vs_qp.py [OUT_DIR]
"""
import sys

from gridswarm import analysis, engine
from gridswarm.scenario import load_scenario


def trace(result, every=50):
    lg = result.log
    t, vmax, vmin, cur = (lg.column(c) for c in ("t", "vmax", "vmin", "curtail_pct"))
    for k in range(0, len(t), every):
        print(f"  t={t[k]:5.1f}s  vmax={vmax[k]:.4f}  vmin={vmin[k]:.4f}  curtail={cur[k]:5.1f}%")


def main(out_dir=None):
    cfg = load_scenario("ieee8500_scenario")
    for mode in ("q_only", "q_and_p"):
        res = engine.run(cfg.replace(control_mode=mode),
                         out_dir=None if out_dir is None else f"{out_dir}/{mode}")
        rep = analysis.steady_state_report(res)
        print(f"{mode}: band {rep['band']}, in band at the end: {rep['in_band']}")
        trace(res)
        if mode == "q_and_p":
            print(f"  C_p gap {rep['c_p_gap']:.2e}, gamma_q gap {rep['gamma_q_gap_max']:.2e}, "
                  f"xi after lowering C_p by 0.01: {rep['perturbed_xi']:.2e}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else None)
