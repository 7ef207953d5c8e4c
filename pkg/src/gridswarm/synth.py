"""Deterministic generators for the bundled desk-scale feeders and scenarios.

Every generator is a pure function of its arguments (including ``seed``),
and values are rounded so the emitted JSON is identical across platforms.
``python -m gridswarm.synth DIR`` rewrites the bundled files.
"""
from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

from .scenario import FORMAT_VERSION, write_json


def _r(x, nd=6):
    return float(round(float(x), nd))


def _feeder(name, lines, loads, ders=(), meters=(), v0=1.0):
    n = 1 + len(lines)
    return {
        "format": FORMAT_VERSION,
        "name": name,
        "v0": v0,
        "buses": n,
        "lines": [[int(a), int(b), _r(r), _r(x)] for a, b, r, x in lines],
        "loads": [{"bus": int(b), "p": _r(p), "q": _r(q)} for b, p, q in loads],
        "ders": [
            {"bus": int(b), "s_cap": _r(s), "p_avail": _r(p), "name": f"pv{int(b)}"}
            for b, s, p in ders
        ],
        "meters": [dict(m) for m in meters],
    }


def chain12(seed=12):
    """12-bus chain with uniform segments, loads on every bus and three PVs."""
    rng = np.random.default_rng(seed)
    lines = [(k - 1, k, 0.01, 0.02) for k in range(1, 12)]
    loads = [(k, 0.02 + 0.01 * rng.random(), 0.01 + 0.005 * rng.random()) for k in range(1, 12)]
    ders = [(4, 0.12, 0.1), (8, 0.12, 0.1), (11, 0.12, 0.1)]
    meters = [{"bus": b, "kind": "realtime"} for b in (4, 8, 11)]
    meters += [{"bus": b, "kind": "sampled", "period": 900} for b in (5, 6, 7, 9, 10)]
    return _feeder("chain12", lines, loads, ders, meters)


def random_tree(n, seed, r_range=(0.005, 0.02), xr_range=(1.0, 3.0), max_children=3):
    """Random radial tree with bounded fan-out; returns ``[(parent, child, r, x)]``."""
    rng = np.random.default_rng(seed)
    fan = [0] * n
    lines = []
    for k in range(1, n):
        while True:
            p = int(rng.integers(max(0, k - 6), k))
            if fan[p] < max_children:
                break
        fan[p] += 1
        r = rng.uniform(*r_range)
        lines.append((p, k, r, r * rng.uniform(*xr_range)))
    return lines


def tree40(seed=40):
    rng = np.random.default_rng(seed + 1)
    lines = random_tree(40, seed)
    loads = [(k, 0.01 + 0.01 * rng.random(), 0.004 + 0.004 * rng.random()) for k in range(1, 40)]
    ders = [(k, 0.06, 0.05) for k in (7, 15, 23, 31, 39)]
    return _feeder("tree40", lines, loads, ders)


def ieee123_like(seed=123):
    """123-bus single-phase stand-in with a trunk, laterals and metered clusters.

    Returns ``(feeder_doc, clusters)``.  Each lateral is a cluster; its
    junction and tail buses are metered in real time, the rest carry
    sampled meters.
    """
    rng = np.random.default_rng(seed)
    lines, loads, ders, meters, clusters = [], [], [], [], []
    trunk = list(range(1, 14))
    prev = 0
    for b in trunk:
        lines.append((prev, b, 0.003, 0.006))
        prev = b
    nxt = 14
    for li, junction in enumerate(trunk[1:12]):
        length = 10
        members = [junction]
        prev = junction
        for _ in range(length):
            lines.append((prev, nxt, 0.006 + 0.004 * rng.random(), 0.008 + 0.006 * rng.random()))
            members.append(nxt)
            prev = nxt
            nxt += 1
        clusters.append(members)
        tail = members[-1]
        mid = members[len(members) // 2]
        ders.append((mid, 0.05, 0.04))
        meters.append({"bus": junction, "kind": "realtime"})
        meters.append({"bus": tail, "kind": "realtime"})
        for b in members[1:]:
            if b not in (mid, tail):
                meters.append({"bus": b, "kind": "sampled", "period": 900})
    assert nxt == 124, nxt
    for k in range(1, nxt):
        loads.append((k, 0.004 + 0.004 * rng.random(), 0.0015 + 0.0015 * rng.random()))
    # de-duplicate junction meters (a junction can only be listed once)
    seen, uniq = set(), []
    for m in meters:
        if m["bus"] not in seen:
            seen.add(m["bus"])
            uniq.append(m)
    return _feeder("ieee123_like", lines, loads, ders, uniq), clusters


def ieee8500_analog(seed=8500, v0=1.04, pv_weight=(0.1,) * 8 + (4.0, 4.0),
                    heavy=3, heavy_len=14, heavy_scale=3.4, pv_z=4.5, pv_xr=0.2, s_ratio=1.15,
                    trunk=(0.003, 0.015)):
    """~120-bus tree standing in for a large feeder with ten DER clusters.

    A trunk feeds ten laterals.  The far laterals are long, weak and host
    most of the PV; one mid-trunk lateral is long and heavily loaded.
    Returns ``(feeder_doc, clusters)`` with one cluster per lateral
    (junction included, so neighbouring clusters meet on the trunk).
    """
    rng = np.random.default_rng(seed)
    lines, loads, ders, meters, clusters = [], [], [], [], []
    trunk_z = trunk
    trunk = list(range(1, 11))
    prev = 0
    for b in trunk:
        lines.append((prev, b, *trunk_z))
        prev = b
    nxt = 11
    top = max(pv_weight)
    for li, junction in enumerate(trunk):
        length = heavy_len if li == heavy else 10
        zk = pv_z if pv_weight[li] == top else 1.0
        members = [junction]
        prev = junction
        for _ in range(length):
            r = zk * (0.008 + 0.004 * rng.random())
            xr = pv_xr if zk != 1.0 else 1.5 + 0.5 * rng.random()
            lines.append((prev, nxt, r, r * xr))
            members.append(nxt)
            prev = nxt
            nxt += 1
        clusters.append(members)
        scale = heavy_scale if li == heavy else 1.0
        for b in members[1:]:
            loads.append((b, scale * (0.006 + 0.004 * rng.random()),
                          scale * (0.002 + 0.002 * rng.random())))
        for b in members[3::3]:
            p = 0.01 * pv_weight[li]
            ders.append((b, s_ratio * p, p))
        meters.append({"bus": junction, "kind": "realtime"})
        meters.append({"bus": members[-1], "kind": "realtime"})
        for b in members[2:-1:3]:
            meters.append({"bus": b, "kind": "sampled", "period": 900})
    return _feeder("ieee8500_analog", lines, loads, ders, meters, v0=v0), clusters


def scenarios():
    """Bundled scenario documents keyed by file stem."""
    _, c123 = ieee123_like()
    _, c8500 = ieee8500_analog()
    step = [[0.0, 0.3], [10.0, 1.0]]
    return {
        "chain12_scenario": {
            "format": FORMAT_VERSION, "name": "chain12", "feeder": "chain12.json",
            "duration": 20.0, "clusters": [[4, 8, 11]], "der_profiles": {"*": step},
            "control_mode": "q_and_p",
        },
        "ieee123_scenario": {
            "format": FORMAT_VERSION, "name": "ieee123_like", "feeder": "ieee123_like.json",
            "duration": 5.0, "clusters": c123, "control_mode": "none",
        },
        "ieee8500_scenario": {
            "format": FORMAT_VERSION, "name": "ieee8500_analog",
            "feeder": "ieee8500_analog.json", "duration": 60.0, "clusters": c8500,
            "penetration": 1.0, "der_profiles": {"*": step}, "control_mode": "q_and_p",
            "power_factor": 0.95,
            # junction relays report to a hub on the mid-trunk junction
            "cluster_links": [[c8500[k][0], c8500[5][0]] for k in range(len(c8500)) if k != 5],
            "q_control": {"beta": 2000.0, "k_q": 5.0, "lam": 0.9},
            "p_control": {"k_p": 5.0, "beta_p": 20.0, "eps_q": 0.05},
        },
    }


def write_bundled(out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(chain12(), out / "chain12.json")
    write_json(tree40(), out / "tree40.json")
    write_json(ieee123_like()[0], out / "ieee123_like.json")
    write_json(ieee8500_analog()[0], out / "ieee8500_analog.json")
    for stem, doc in scenarios().items():
        write_json(doc, out / f"{stem}.json")
    return sorted(p.name for p in out.iterdir() if p.suffix == ".json")


if __name__ == "__main__":
    print("\n".join(write_bundled(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parent / "feeders")))
