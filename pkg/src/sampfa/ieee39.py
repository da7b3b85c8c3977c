"""Built-in New England 39-bus test case (100 MVA base, per-unit data)."""
from __future__ import annotations

from .grid import Branch, Bus, BusKind, Network

# from, to, r, x, total charging susceptance, tap (0 = line)
_BRANCHES = [
    (1, 2, 0.0035, 0.0411, 0.6987, 0.0), (1, 39, 0.0010, 0.0250, 0.7500, 0.0),
    (2, 3, 0.0013, 0.0151, 0.2572, 0.0), (2, 25, 0.0070, 0.0086, 0.1460, 0.0),
    (3, 4, 0.0013, 0.0213, 0.2214, 0.0), (3, 18, 0.0011, 0.0133, 0.2138, 0.0),
    (4, 5, 0.0008, 0.0128, 0.1342, 0.0), (4, 14, 0.0008, 0.0129, 0.1382, 0.0),
    (5, 6, 0.0002, 0.0026, 0.0434, 0.0), (5, 8, 0.0008, 0.0112, 0.1476, 0.0),
    (6, 7, 0.0006, 0.0092, 0.1130, 0.0), (6, 11, 0.0007, 0.0082, 0.1389, 0.0),
    (7, 8, 0.0004, 0.0046, 0.0780, 0.0), (8, 9, 0.0023, 0.0363, 0.3804, 0.0),
    (9, 39, 0.0010, 0.0250, 1.2000, 0.0), (10, 11, 0.0004, 0.0043, 0.0729, 0.0),
    (10, 13, 0.0004, 0.0043, 0.0729, 0.0), (13, 14, 0.0009, 0.0101, 0.1723, 0.0),
    (14, 15, 0.0018, 0.0217, 0.3660, 0.0), (15, 16, 0.0009, 0.0094, 0.1710, 0.0),
    (16, 17, 0.0007, 0.0089, 0.1342, 0.0), (16, 19, 0.0016, 0.0195, 0.3040, 0.0),
    (16, 21, 0.0008, 0.0135, 0.2548, 0.0), (16, 24, 0.0003, 0.0059, 0.0680, 0.0),
    (17, 18, 0.0007, 0.0082, 0.1319, 0.0), (17, 27, 0.0013, 0.0173, 0.3216, 0.0),
    (21, 22, 0.0008, 0.0140, 0.2565, 0.0), (22, 23, 0.0006, 0.0096, 0.1846, 0.0),
    (23, 24, 0.0022, 0.0350, 0.3610, 0.0), (25, 26, 0.0032, 0.0323, 0.5130, 0.0),
    (26, 27, 0.0014, 0.0147, 0.2396, 0.0), (26, 28, 0.0043, 0.0474, 0.7802, 0.0),
    (26, 29, 0.0057, 0.0625, 1.0290, 0.0), (28, 29, 0.0014, 0.0151, 0.2490, 0.0),
    (12, 11, 0.0016, 0.0435, 0.0, 1.006), (12, 13, 0.0016, 0.0435, 0.0, 1.006),
    (6, 31, 0.0, 0.0250, 0.0, 1.070), (10, 32, 0.0, 0.0200, 0.0, 1.070),
    (19, 33, 0.0007, 0.0142, 0.0, 1.070), (20, 34, 0.0009, 0.0180, 0.0, 1.009),
    (22, 35, 0.0, 0.0143, 0.0, 1.025), (23, 36, 0.0005, 0.0272, 0.0, 1.000),
    (25, 37, 0.0006, 0.0232, 0.0, 1.025), (2, 30, 0.0, 0.0181, 0.0, 1.025),
    (29, 38, 0.0008, 0.0156, 0.0, 1.025), (19, 20, 0.0007, 0.0138, 0.0, 1.060),
]

# bus -> (load MW, load MVAr)
_LOADS = {
    3: (322.0, 2.4), 4: (500.0, 184.0), 7: (233.8, 84.0), 8: (522.0, 176.0),
    12: (7.5, 88.0), 15: (320.0, 153.0), 16: (329.0, 32.3), 18: (158.0, 30.0),
    20: (628.0, 103.0), 21: (274.0, 115.0), 23: (247.5, 84.6), 24: (308.6, -92.0),
    25: (224.0, 47.2), 26: (139.0, 17.0), 27: (281.0, 75.5), 28: (206.0, 27.6),
    29: (283.5, 26.9), 31: (9.2, 4.6), 39: (1104.0, 250.0),
}

# bus -> (Pg MW, Vset, Qmin MVAr, Qmax MVAr); bus 31 is the slack
_GENS = {
    30: (250.0, 1.0475, 140.0, 400.0),
    31: (0.0, 0.9820, -100.0, 300.0),
    32: (650.0, 0.9831, 150.0, 300.0),
    33: (632.0, 0.9972, 0.0, 250.0),
    34: (508.0, 1.0123, 0.0, 167.0),
    35: (650.0, 1.0493, -100.0, 300.0),
    36: (560.0, 1.0635, 0.0, 240.0),
    37: (540.0, 1.0278, 0.0, 250.0),
    38: (830.0, 1.0265, -150.0, 300.0),
    39: (1000.0, 1.0300, -100.0, 300.0),
}

_SLACK = 31
_BASE_MVA = 100.0


def ieee39() -> Network:
    buses = []
    for bid in range(1, 40):
        pl, ql = _LOADS.get(bid, (0.0, 0.0))
        if bid in _GENS:
            pg, vset, qmin, qmax = _GENS[bid]
            kind = BusKind.Slack if bid == _SLACK else BusKind.PV
            buses.append(Bus(id=bid, kind=kind,
                             p_set=(pg - pl) / _BASE_MVA,
                             q_set=-ql / _BASE_MVA,
                             v_set=vset,
                             q_min=(qmin - ql) / _BASE_MVA,
                             q_max=(qmax - ql) / _BASE_MVA))
        else:
            buses.append(Bus(id=bid, kind=BusKind.PQ,
                             p_set=-pl / _BASE_MVA, q_set=-ql / _BASE_MVA))
    branches = []
    for f, t, r, x, b_total, tap in _BRANCHES:
        branches.append(Branch(from_bus=f, to_bus=t, r=r, x=x,
                               g_m=0.0, b_m=b_total / 2.0,
                               tap=tap if tap > 0 else 1.0))
    return Network(base_mva=_BASE_MVA, buses=tuple(buses), branches=tuple(branches))
