"""Regenerate the bundled case files in src/storage_lmp/cases/.

    python scripts/make_cases.py
"""
from pathlib import Path

import numpy as np

from storage_lmp.model import Bus, Line, NetworkInstance, PoolInstance, QuadraticCost, dumps_case

OUT = Path(__file__).resolve().parents[1] / "src" / "storage_lmp" / "cases"

# Normalized 24-hour system load shape (hour 0 = midnight), peak 1.0.
DAY_SHAPE = np.array([
    0.62, 0.58, 0.56, 0.55, 0.56, 0.60, 0.68, 0.78, 0.86, 0.91, 0.94, 0.96,
    0.95, 0.93, 0.92, 0.93, 0.96, 1.00, 0.99, 0.95, 0.89, 0.81, 0.73, 0.66,
])


def pool_4_2():
    return PoolInstance(QuadraticCost(1.0, 0.0, 0.0), [10.0, 20.0], "two-period pool example")


def tier_pool():
    # off-peak hours 0-8, peak 9-12, partial peak 13-23; C(g) = g^2 -> a = 2
    d = [4.0] * 9 + [12.0] * 4 + [6.0] * 11
    return PoolInstance(QuadraticCost(2.0, 0.0, 0.0), d, "three-tier pool prototype")


def threebus():
    # 0.05 g^2 + 5 g + 100 and 0.03 g^2 + 10 g + 120 in the 0.5*a*g^2 convention
    buses = [Bus(1, QuadraticCost(0.1, 5.0, 100.0)), Bus(2, QuadraticCost(0.06, 10.0, 120.0)), Bus(3)]
    # susceptances are not printed with the source data; unit values stand in
    lines = [Line(1, 2, 1.0, 80.0), Line(1, 3, 1.0, 130.0), Line(2, 3, 1.0, 150.0)]
    shape3 = np.roll(DAY_SHAPE, 0)
    demand = np.vstack([
        40.0 * np.roll(DAY_SHAPE, 3),
        60.0 * np.roll(DAY_SHAPE, -2),
        275.0 * shape3,
    ])
    return NetworkInstance(buses, lines, np.round(demand, 3), "3-bus prototype")


# MATPOWER case39: bus, Pd (MW)
CASE39_PD = {
    1: 97.6, 3: 322.0, 4: 500.0, 7: 233.8, 8: 522.0, 9: 6.5, 12: 8.53, 15: 320.0, 16: 329.0,
    18: 158.0, 20: 680.0, 21: 274.0, 23: 247.5, 24: 308.6, 25: 224.0, 26: 139.0, 27: 281.0,
    28: 206.0, 29: 283.5, 31: 9.2, 39: 1104.0,
}
CASE39_GEN_BUSES = [30, 31, 32, 33, 34, 35, 36, 37, 38, 39]
# (from, to, x p.u., rateA MVA)
CASE39_BRANCH = [
    (1, 2, 0.0411, 600), (1, 39, 0.025, 1000), (2, 3, 0.0151, 500), (2, 25, 0.0086, 500),
    (2, 30, 0.0181, 900), (3, 4, 0.0213, 500), (3, 18, 0.0133, 500), (4, 5, 0.0128, 600),
    (4, 14, 0.0129, 500), (5, 6, 0.0026, 1200), (5, 8, 0.0112, 900), (6, 7, 0.0092, 900),
    (6, 11, 0.0082, 480), (6, 31, 0.025, 1800), (7, 8, 0.0046, 900), (8, 9, 0.0363, 900),
    (9, 39, 0.025, 900), (10, 11, 0.0043, 600), (10, 13, 0.0043, 600), (10, 32, 0.02, 900),
    (12, 11, 0.0435, 500), (12, 13, 0.0435, 500), (13, 14, 0.0101, 600), (14, 15, 0.0217, 600),
    (15, 16, 0.0094, 600), (16, 17, 0.0089, 600), (16, 19, 0.0195, 600), (16, 21, 0.0135, 600),
    (16, 24, 0.0059, 600), (17, 18, 0.0082, 600), (17, 27, 0.0173, 600), (19, 20, 0.0138, 900),
    (19, 33, 0.0142, 900), (20, 34, 0.018, 900), (21, 22, 0.014, 900), (22, 23, 0.0096, 600),
    (22, 35, 0.0143, 900), (23, 24, 0.035, 600), (23, 36, 0.0272, 900), (25, 26, 0.0323, 600),
    (25, 37, 0.0232, 900), (26, 27, 0.0147, 600), (26, 28, 0.0474, 600), (26, 29, 0.0625, 600),
    (28, 29, 0.0151, 600), (29, 38, 0.0156, 1200),
]
# MATPOWER gencost placeholder: 0.01 P^2 + 0.3 P + 0.2 for every unit
CASE39_COST = QuadraticCost(0.02, 0.3, 0.2)


def ieee39(shape=DAY_SHAPE):
    buses = [Bus(k, CASE39_COST if k in CASE39_GEN_BUSES else None) for k in range(1, 40)]
    lines = [Line(f, t, round(1.0 / x, 6), float(rate)) for f, t, x, rate in CASE39_BRANCH]
    base = np.array([CASE39_PD.get(k, 0.0) for k in range(1, 40)])
    demand = np.round(np.outer(base, shape), 4)
    return NetworkInstance(buses, lines, demand, "IEEE 39-bus with synthetic 24-hour shape")


USERS_4_2 = "user_id,bus_id,t1,t2\nAlice,1,4.0,16.0\nBob,1,6.0,4.0\n"


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for name, inst in [("pool_4_2", pool_4_2()), ("tier_pool", tier_pool()),
                       ("threebus", threebus()), ("ieee39", ieee39())]:
        (OUT / f"{name}.json").write_text(dumps_case(inst))
    (OUT / "users_4_2.csv").write_text(USERS_4_2)


if __name__ == "__main__":
    main()
