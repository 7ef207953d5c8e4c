"""Open-loop voltage extremes as DER penetration grows, with a crude text plot.

    python3 demos/penetration_sweep.py
"""
from gridswarm import analysis
from gridswarm.scenario import load_scenario


def bar(v, lo=0.92, hi=1.10, width=40):
    k = int(round((v - lo) / (hi - lo) * width))
    return "." * max(0, min(width, k))


if __name__ == "__main__":
    levels = [round(0.1 * k, 10) for k in range(16)]
    rows = analysis.penetration_sweep(load_scenario("ieee8500_scenario"), levels)
    for r in rows:
        flag = " violation" if r.xi > 0 else ""
        print(f"{r.penetration:4.1f}  min {r.v_min:.4f} {bar(r.v_min):<40}  max {r.v_max:.4f}{flag}")
    print("knee:", analysis.knee(rows))
