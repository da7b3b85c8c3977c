"""Shared builders for synthetic networks used across the test suites."""
import numpy as np

from sampfa.grid import Branch, Bus, BusKind, Network


def two_bus_line(x=0.1, r=0.0, tap=1.0, b_m=0.0) -> Network:
    return Network(
        base_mva=100.0,
        buses=(Bus(1, BusKind.Slack), Bus(2, BusKind.PQ, p_set=-0.5, q_set=-0.2)),
        branches=(Branch(1, 2, r, x, b_m=b_m, tap=tap),),
    )


def make_random_net(rng: np.random.Generator, n: int) -> Network:
    """Random connected network with cycles, taps, and charging; light loading
    so flat-start NR converges."""
    slack = int(rng.integers(n))
    buses = []
    for i in range(n):
        if i == slack:
            buses.append(Bus(i + 1, BusKind.Slack, v_set=1.0 + 0.02 * rng.random()))
        elif rng.random() < 0.2:
            buses.append(Bus(i + 1, BusKind.PV, p_set=float(rng.uniform(0.05, 0.3)),
                             v_set=1.0 + 0.02 * rng.random(),
                             q_min=-5.0, q_max=5.0))
        else:
            buses.append(Bus(i + 1, BusKind.PQ,
                             p_set=-float(rng.uniform(0.0, 0.25)),
                             q_set=-float(rng.uniform(0.0, 0.08))))
    branches = []
    order = rng.permutation(n)
    for k in range(1, n):
        u = int(order[k]) + 1
        v = int(order[rng.integers(k)]) + 1
        branches.append(_random_branch(rng, u, v))
    for _ in range(max(1, n // 3)):
        u, v = rng.choice(n, size=2, replace=False) + 1
        if any({br.from_bus, br.to_bus} == {u, v} for br in branches):
            continue
        branches.append(_random_branch(rng, int(u), int(v)))
    return Network(base_mva=100.0, buses=tuple(buses), branches=tuple(branches))


def _random_branch(rng: np.random.Generator, u: int, v: int) -> Branch:
    tap = float(rng.uniform(0.95, 1.05)) if rng.random() < 0.2 else 1.0
    b_m = float(rng.uniform(0.0, 0.05)) if rng.random() < 0.3 else 0.0
    return Branch(u, v, r=float(rng.uniform(0.001, 0.03)),
                  x=float(rng.uniform(0.02, 0.15)), b_m=b_m, tap=tap)
