"""Small network builders shared across test modules."""

from __future__ import annotations

import numpy as np

from lemsim.netmodel import Bus, Line, Network, Transformer


def stiff_transformer() -> Transformer:
    return Transformer(
        rating_kva=250.0, v_primary=6600.0, v_secondary=400.0, short_circuit_pct=0.0
    )


def two_bus(z_pu=0.01 + 0.01j, phases="abc", sc_pct=0.0) -> Network:
    """Slack bus 0 and one load bus 1 joined by a mutual-free line."""
    tx = Transformer(
        rating_kva=250.0, v_primary=6600.0, v_secondary=400.0, short_circuit_pct=sc_pct
    )
    z = np.eye(3, dtype=complex) * z_pu
    from lemsim.netmodel import parse_phases

    ph = parse_phases(phases)
    return Network(
        buses=[
            Bus(id=0, phases=(0, 1, 2), is_slack=True),
            Bus(id=1, phases=ph),
        ],
        lines=[Line(from_bus=0, to_bus=1, z=z)],
        transformer=tx,
    )


def star4() -> Network:
    """Slack hub with three single-line spokes."""
    z = np.eye(3, dtype=complex) * (0.02 + 0.015j)
    return Network(
        buses=[
            Bus(id=0, phases=(0, 1, 2), is_slack=True),
            Bus(id=1, phases=(0, 1, 2)),
            Bus(id=2, phases=(0, 1, 2)),
            Bus(id=3, phases=(0, 1, 2)),
        ],
        lines=[
            Line(from_bus=0, to_bus=1, z=z),
            Line(from_bus=0, to_bus=2, z=z),
            Line(from_bus=0, to_bus=3, z=z),
        ],
        transformer=stiff_transformer(),
    )


def random_radial(n_bus: int, seed: int, with_mutuals: bool = True) -> Network:
    """Random radial feeder of three-phase buses with plausible LV cables."""
    rng = np.random.default_rng(seed)
    buses = [Bus(id=0, phases=(0, 1, 2), is_slack=True)]
    lines = []
    for i in range(1, n_bus):
        parent = int(rng.integers(0, i))
        r = rng.uniform(0.005, 0.03)
        x = rng.uniform(0.003, 0.02)
        z = np.eye(3, dtype=complex) * (r + 1j * x)
        if with_mutuals:
            xm = 1j * rng.uniform(0.001, 0.004)
            z += (np.ones((3, 3)) - np.eye(3)) * xm
        buses.append(Bus(id=i, phases=(0, 1, 2)))
        lines.append(Line(from_bus=parent, to_bus=i, z=z))
    return Network(buses=buses, lines=lines, transformer=stiff_transformer())


def random_injections(network: Network, seed: int, scale: float = 0.02) -> np.ndarray:
    """Random generation-positive injections, zero on the slack bus."""
    rng = np.random.default_rng(seed)
    s = rng.uniform(-scale, scale / 2, size=(network.n_bus, 3)) + 1j * rng.uniform(
        -scale / 4, scale / 4, size=(network.n_bus, 3)
    )
    s[network.slack_index] = 0
    for i, bus in enumerate(network.buses):
        for p in range(3):
            if p not in bus.phases:
                s[i, p] = 0
    return s
