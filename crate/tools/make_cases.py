"""Generate the bundled case files in crates/core/data.

ieee118_wind.json is built from the IEEE 118-bus system (pypower case118)
with 11 wind farms. Line limits come from a deterministic DC-OPF: lines are
rated 1.5x the largest flow seen over wind scales 0.5 to 4 (at least
100 MW), and the three most loaded lines at the base scale are rated at 90%
of their base flow so that the market clears with some congestion.

Run: python3 tools/make_cases.py
"""
import json
import math
import os

import numpy as np

OUT = os.path.join(os.path.dirname(__file__), "..", "crates", "core", "data")

WIND_BUSES = [3, 8, 11, 20, 24, 26, 31, 38, 43, 49, 53]
W_NORM = [0.112, 0.801, 0.61, 0.086, 0.142, 0.0, 0.056, 0.137, 0.353, 0.207, 0.305]
S_NORM = [0.1, 0.26, 0.22, 0.25, 0.22, 0.19, 0.14, 0.44, 0.17, 0.13, 0.07]
PENETRATION = 0.097
# Forecast errors scaled against a smaller base than the forecasts so that
# the 4x penetration case stays feasible under the Chebyshev factor.
SIGMA_SHARE = 0.4
SCALES = [0.5, 2.0, 4.0]


def write(name, case):
    path = os.path.join(OUT, name)
    with open(path, "w") as f:
        json.dump(case, f, indent=1)
        f.write("\n")
    print("wrote", path)


def dc_opf(case):
    import cvxpy as cp

    ids = [b["id"] for b in case["buses"]]
    pos = {b: k for k, b in enumerate(ids)}
    n = len(ids)
    gens = case["generators"]
    p = cp.Variable(len(gens))
    th = cp.Variable(n)
    f = cp.Variable(len(case["lines"]))
    inj = [0] * n
    for i, g in enumerate(gens):
        inj[pos[g["bus"]]] += p[i]
    cons = []
    for l, ln in enumerate(case["lines"]):
        a, b = pos[ln["from"]], pos[ln["to"]]
        inj[a] -= f[l]
        inj[b] += f[l]
        cons.append(f[l] == (th[a] - th[b]) / ln["x"])
    w = {r["bus"]: r["forecast"] for r in case["res"]}
    for k, bid in enumerate(ids):
        cons.append(inj[k] == case["buses"][k]["demand"] - w.get(bid, 0.0))
    cons += [th[pos[case["reference_bus"]]] == 0, p >= 0, p <= [g["p_max"] for g in gens]]
    cost = sum(g["c2"] * cp.square(p[i]) + g["c1"] * p[i] for i, g in enumerate(gens))
    cp.Problem(cp.Minimize(cost), cons).solve()
    return np.array(f.value)


def ieee118():
    from pypower.case118 import case118

    ppc = case118()
    bus, gen, branch, cost = ppc["bus"], ppc["gen"], ppc["branch"], ppc["gencost"]
    ref = int(bus[bus[:, 1] == 3][0, 0])
    buses = [{"id": int(b[0]), "demand": float(b[2])} for b in bus]
    lines = []
    for br in branch:
        a, b = int(br[0]), int(br[1])
        lines.append({"from": a, "to": b, "x": float(br[3]), "f_max": 9900.0})
    gens = []
    for g, c in zip(gen, cost):
        # gencost model 2 with 3 coefficients: c2, c1, c0
        c2, c1, c0 = float(c[4]), float(c[5]), float(c[6])
        gens.append({
            "bus": int(g[0]), "c2": c2, "c1": c1, "c0": c0,
            "p_max": float(g[8]), "p_min": float(g[9]),
            "c_up": round(0.2 * c1, 6), "c_dw": round(0.1 * c1, 6),
        })
    demand = sum(b["demand"] for b in buses)
    k = PENETRATION * demand / sum(W_NORM)
    res = [
        {"bus": b, "forecast": round(w * k, 6), "sigma": round(s * k * SIGMA_SHARE, 6)}
        for b, w, s in zip(WIND_BUSES, W_NORM, S_NORM)
    ]
    case = {"version": 1, "reference_bus": ref, "buses": buses, "lines": lines,
            "generators": gens, "res": res}
    flows = np.abs(dc_opf(case))
    peak = flows.copy()
    for scale in SCALES:
        scaled = dict(case, res=[dict(r, forecast=r["forecast"] * scale) for r in res])
        peak = np.maximum(peak, np.abs(dc_opf(scaled)))
    top = set(np.argsort(-flows)[:3])
    for l, ln in enumerate(lines):
        if l in top:
            ln["f_max"] = round(0.9 * flows[l], 3)
        else:
            ln["f_max"] = round(max(1.5 * peak[l], 100.0), 3)
    write("ieee118_wind.json", case)


def triangle():
    write("triangle3.json", {
        "version": 1, "reference_bus": 1,
        "buses": [{"id": 1, "demand": 0.0}, {"id": 2, "demand": 60.0}, {"id": 3, "demand": 140.0}],
        "lines": [
            {"from": 1, "to": 2, "x": 0.1, "f_max": 150.0},
            {"from": 2, "to": 3, "x": 0.1, "f_max": 150.0},
            {"from": 1, "to": 3, "x": 0.1, "f_max": 90.0},
        ],
        "generators": [
            {"bus": 1, "c2": 0.02, "c1": 15.0, "c0": 50.0, "p_max": 250.0, "p_min": 0.0, "c_up": 3.0, "c_dw": 2.0},
            {"bus": 2, "c2": 0.05, "c1": 25.0, "c0": 20.0, "p_max": 200.0, "p_min": 0.0, "c_up": 4.0, "c_dw": 3.0},
        ],
        "res": [{"bus": 3, "forecast": 30.0, "sigma": 1.5}],
    })


def case5():
    write("case5_scopf.json", {
        "version": 1, "reference_bus": 4,
        "buses": [{"id": 1, "demand": 0.0}, {"id": 2, "demand": 300.0}, {"id": 3, "demand": 300.0},
                  {"id": 4, "demand": 400.0}, {"id": 5, "demand": 0.0}],
        "lines": [
            {"from": 1, "to": 2, "x": 0.0281, "f_max": 400.0},
            {"from": 1, "to": 4, "x": 0.0304, "f_max": 400.0},
            {"from": 1, "to": 5, "x": 0.0064, "f_max": 400.0},
            {"from": 2, "to": 3, "x": 0.0108, "f_max": 400.0},
            {"from": 3, "to": 4, "x": 0.0297, "f_max": 400.0},
            {"from": 4, "to": 5, "x": 0.0297, "f_max": 240.0},
        ],
        "generators": [
            {"bus": 1, "c2": 0.010, "c1": 14.0, "c0": 0.0, "p_max": 450.0, "p_min": 0.0, "c_up": 2.0, "c_dw": 1.0},
            {"bus": 3, "c2": 0.020, "c1": 30.0, "c0": 0.0, "p_max": 520.0, "p_min": 0.0, "c_up": 3.0, "c_dw": 1.5},
            {"bus": 4, "c2": 0.015, "c1": 40.0, "c0": 0.0, "p_max": 300.0, "p_min": 0.0, "c_up": 2.5, "c_dw": 1.0},
            {"bus": 5, "c2": 0.012, "c1": 10.0, "c0": 0.0, "p_max": 600.0, "p_min": 0.0, "c_up": 1.5, "c_dw": 0.5},
        ],
        "res": [{"bus": 2, "forecast": 60.0, "sigma": 6.0}, {"bus": 3, "forecast": 40.0, "sigma": 5.0}],
    })


def case10():
    rng = np.random.default_rng(10)
    buses = [{"id": i, "demand": float(round(d, 1))}
             for i, d in zip(range(1, 11), [0, 80, 120, 0, 150, 90, 0, 110, 70, 130])]
    ring = [(i, i % 10 + 1) for i in range(1, 11)]
    chords = [(1, 6), (3, 8), (2, 9), (4, 7)]
    lines = [{"from": a, "to": b, "x": float(round(rng.uniform(0.05, 0.2), 4)), "f_max": 250.0}
             for a, b in ring + chords]
    lines[4]["f_max"] = 60.0
    gens = []
    for bus, c2, c1, pmax in [(1, 0.010, 18, 400), (4, 0.020, 22, 300), (5, 0.015, 25, 250),
                              (7, 0.030, 30, 200), (10, 0.025, 28, 250)]:
        gens.append({"bus": bus, "c2": c2, "c1": float(c1), "c0": 0.0, "p_max": float(pmax),
                     "p_min": 0.0, "c_up": 2.0, "c_dw": 1.0})
    res = [{"bus": 2, "forecast": 40.0, "sigma": 2.5}, {"bus": 6, "forecast": 60.0, "sigma": 4.0},
           {"bus": 9, "forecast": 30.0, "sigma": 1.5}]
    write("case10.json", {"version": 1, "reference_bus": 1, "buses": buses, "lines": lines,
                          "generators": gens, "res": res})


if __name__ == "__main__":
    os.makedirs(OUT, exist_ok=True)
    triangle()
    case5()
    case10()
    ieee118()
