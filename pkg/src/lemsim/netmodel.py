"""Three-phase radial LV network model and bus admittance matrix.

Buses carry a subset of phases {a, b, c}; absent phases are zero-padded so
every matrix in the package uses a uniform 3n indexing (bus i, phase p ->
row 3*i + p). Line impedances are 3x3 complex blocks in per-unit; the
admittance matrix is assembled from per-line primitive admittances
y = z^-1 restricted to the phases present at both endpoints.

Per-unit system: base_kva is the three-phase power base, base_v the
line-to-line voltage base. Phase voltages normalize by base_v/sqrt(3),
per-phase powers by base_kva/3, which gives z_base = base_v^2 / base_kva.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

PHASE_NAMES = "abc"
N_PHASES = 3

# Positive-sequence slack phasors: a at 0 deg, b at -120, c at +120.
ROT = np.exp(-2j * np.pi / 3)
SLACK_PHASORS = np.array([1.0 + 0j, ROT, ROT**2])


def parse_phases(spec: str) -> tuple[int, ...]:
    """Parse a phase string like 'abc' or 'b' into sorted phase indices."""
    phases = sorted({PHASE_NAMES.index(ch) for ch in spec.lower().strip()})
    if not phases:
        raise InputError("bus phase set must be non-empty")
    return tuple(phases)


@dataclass(frozen=True, eq=False)
class Bus:
    id: int
    phases: tuple[int, ...]
    vmin: float = 0.9
    vmax: float = 1.1
    is_slack: bool = False

    def __post_init__(self):
        if not self.phases:
            raise InputError(f"bus {self.id}: phase set must be non-empty")
        if not (0.0 < self.vmin < self.vmax):
            raise InputError(
                f"bus {self.id}: voltage bounds must satisfy 0 < vmin < vmax "
                f"(got vmin={self.vmin}, vmax={self.vmax})"
            )


@dataclass(frozen=True, eq=False)
class Line:
    from_bus: int
    to_bus: int
    z: np.ndarray  # 3x3 complex, per-unit; rows/cols of absent phases ignored
    ampacity: np.ndarray | None = None  # per-phase current limit, per-unit

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise InputError(f"line {self.from_bus}-{self.to_bus}: from == to")
        z = np.asarray(self.z, dtype=complex)
        if z.shape != (3, 3):
            raise InputError(
                f"line {self.from_bus}-{self.to_bus}: z must be 3x3, got {z.shape}"
            )
        object.__setattr__(self, "z", z)


@dataclass(frozen=True, eq=False)
class Transformer:
    rating_kva: float
    v_primary: float
    v_secondary: float
    connection: str = "delta-wye"
    # Series impedance magnitude as a percentage on the transformer's own
    # rating; 0 means an ideal (stiff) slack interface.
    short_circuit_pct: float = 4.0
    x_r_ratio: float = 5.0

    def __post_init__(self):
        if self.rating_kva <= 0:
            raise InputError("transformer rating_kva must be > 0")
        if self.short_circuit_pct < 0:
            raise InputError("transformer short_circuit_pct must be >= 0")


@dataclass(frozen=True, eq=False)
class Network:
    buses: list[Bus]
    lines: list[Line]
    transformer: Transformer
    base_kva: float = 250.0
    base_v: float = 400.0  # line-to-line volts

    def __post_init__(self):
        index = {bus.id: i for i, bus in enumerate(self.buses)}
        if len(index) != len(self.buses):
            raise InputError("duplicate bus ids")
        object.__setattr__(self, "_index", index)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def slack_index(self) -> int:
        slack = [i for i, b in enumerate(self.buses) if b.is_slack]
        if len(slack) != 1:
            raise InputError(f"expected exactly one slack bus, found {len(slack)}")
        return slack[0]

    def bus_position(self, bus_id: int) -> int:
        try:
            return self._index[bus_id]
        except KeyError:
            raise InputError(f"unknown bus id {bus_id}") from None

    @property
    def s_base_phase_kw(self) -> float:
        """Per-phase power base in kW (three-phase base / 3)."""
        return self.base_kva / 3.0

    @property
    def z_base_ohm(self) -> float:
        return self.base_v**2 / (self.base_kva * 1000.0)

    def kw_to_pu(self, kw):
        return np.asarray(kw, dtype=float) / self.s_base_phase_kw

    def pu_to_kw(self, pu):
        return np.asarray(pu) * self.s_base_phase_kw

    def transformer_z_pu(self) -> complex:
        """Transformer series impedance per phase on the system base."""
        tx = self.transformer
        if tx.short_circuit_pct == 0:
            return 0j
        zmag = (tx.short_circuit_pct / 100.0) * (self.base_kva / tx.rating_kva)
        r = zmag / np.sqrt(1.0 + tx.x_r_ratio**2)
        return complex(r, r * tx.x_r_ratio)


@dataclass
class TopologyDiagnostics:
    ok: bool
    issues: list[str]
    bus_phases: dict[int, str] = field(default_factory=dict)


def shared_phases(network: Network, line: Line) -> tuple[int, ...]:
    bf = network.buses[network.bus_position(line.from_bus)]
    bt = network.buses[network.bus_position(line.to_bus)]
    return tuple(sorted(set(bf.phases) & set(bt.phases)))


def _scalar_to_matrix(value) -> np.ndarray:
    """Accept a scalar impedance (zero mutuals) or a full 3x3 matrix."""
    arr = np.asarray(value, dtype=complex)
    if arr.ndim == 0:
        return np.eye(3, dtype=complex) * arr
    if arr.shape == (3, 3):
        return arr
    raise InputError(f"impedance must be scalar or 3x3, got shape {arr.shape}")


def load_network(path: str | Path) -> Network:
    """Load and validate a network description document (TOML).

    Sections: [bases], [transformer], repeated [[bus]] and [[line]].
    Line impedances are given in ohms as scalars (r_ohm/x_ohm, zero mutuals)
    or 3x3 nested arrays; they are converted to per-unit here.
    """
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read network file {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise InputError(f"network file {path} does not parse: {exc}") from exc

    bases = doc.get("bases", {})
    base_kva = float(bases.get("kva", 250.0))
    base_v = float(bases.get("v", 400.0))
    z_base = base_v**2 / (base_kva * 1000.0)

    txd = doc.get("transformer")
    if txd is None:
        raise InputError("network file missing [transformer] section")
    transformer = Transformer(
        rating_kva=float(txd["rating_kva"]),
        v_primary=float(txd["v_primary"]),
        v_secondary=float(txd["v_secondary"]),
        connection=txd.get("connection", "delta-wye"),
        short_circuit_pct=float(txd.get("short_circuit_pct", 4.0)),
        x_r_ratio=float(txd.get("x_r_ratio", 5.0)),
    )

    buses = []
    seen = set()
    for bd in doc.get("bus", []):
        bus_id = int(bd["id"])
        if bus_id in seen:
            raise InputError(f"duplicate bus id {bus_id}")
        seen.add(bus_id)
        buses.append(
            Bus(
                id=bus_id,
                phases=parse_phases(bd.get("phases", "abc")),
                vmin=float(bd.get("vmin", 0.9)),
                vmax=float(bd.get("vmax", 1.1)),
                is_slack=bool(bd.get("slack", False)),
            )
        )
    if not buses:
        raise InputError("network file defines no buses")

    lines = []
    for ld in doc.get("line", []):
        f, t = int(ld["from"]), int(ld["to"])
        if f not in seen or t not in seen:
            raise InputError(f"line {f}-{t}: dangling endpoint")
        r = _scalar_to_matrix(ld.get("r_ohm", 0.0))
        x = _scalar_to_matrix(ld.get("x_ohm", 0.0))
        z_pu = (r + 1j * x) / z_base
        amp = ld.get("ampacity_a")
        ampacity = None
        if amp is not None:
            i_base = (base_kva * 1000.0 / 3.0) / (base_v / np.sqrt(3.0))
            ampacity = np.full(3, float(amp)) / i_base
        lines.append(Line(from_bus=f, to_bus=t, z=z_pu, ampacity=ampacity))

    network = Network(
        buses=buses,
        lines=lines,
        transformer=transformer,
        base_kva=base_kva,
        base_v=base_v,
    )
    diag = validate_topology(network)
    if not diag.ok:
        raise InputError("invalid network: " + "; ".join(diag.issues))
    return network


def validate_topology(network: Network) -> TopologyDiagnostics:
    """Check connectivity, radiality, and slack count. Never raises."""
    issues = []
    n = network.n_bus

    slack_count = sum(1 for b in network.buses if b.is_slack)
    if slack_count != 1:
        issues.append(f"expected exactly one slack bus, found {slack_count}")

    for line in network.lines:
        for end in (line.from_bus, line.to_bus):
            if end not in network._index:
                issues.append(f"line {line.from_bus}-{line.to_bus}: dangling endpoint {end}")

    if len(network.lines) != n - 1:
        issues.append(
            f"not radial: {len(network.lines)} lines for {n} buses "
            f"(need {n - 1})"
        )

    # Connectivity by traversal over valid lines.
    adj = {i: [] for i in range(n)}
    for line in network.lines:
        if line.from_bus in network._index and line.to_bus in network._index:
            fi = network.bus_position(line.from_bus)
            ti = network.bus_position(line.to_bus)
            adj[fi].append(ti)
            adj[ti].append(fi)
    seen = {0}
    stack = [0]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    if len(seen) != n:
        issues.append(f"disconnected: reached {len(seen)} of {n} buses")

    bus_phases = {
        b.id: "".join(PHASE_NAMES[p] for p in b.phases) for b in network.buses
    }
    return TopologyDiagnostics(ok=not issues, issues=issues, bus_phases=bus_phases)


def build_admittance(network: Network) -> np.ndarray:
    """Assemble the 3n x 3n complex bus admittance matrix (per-unit).

    Standard nodal pattern: +y on the diagonal blocks of both endpoints,
    -y off-diagonal, with y the line impedance inverted on the phases
    present at both endpoints. Rows/columns of absent phases stay zero.
    """
    n = network.n_bus
    y_bus = np.zeros((3 * n, 3 * n), dtype=complex)
    for line in network.lines:
        ph = shared_phases(network, line)
        if not ph:
            raise InputError(
                f"line {line.from_bus}-{line.to_bus}: no shared phases at endpoints"
            )
        sub = line.z[np.ix_(ph, ph)]
        try:
            y_sub = np.linalg.inv(sub)
        except np.linalg.LinAlgError:
            raise InputError(
                f"line {line.from_bus}-{line.to_bus}: singular impedance block"
            ) from None
        fi = network.bus_position(line.from_bus)
        ti = network.bus_position(line.to_bus)
        f_idx = [3 * fi + p for p in ph]
        t_idx = [3 * ti + p for p in ph]
        y_bus[np.ix_(f_idx, f_idx)] += y_sub
        y_bus[np.ix_(t_idx, t_idx)] += y_sub
        y_bus[np.ix_(f_idx, t_idx)] -= y_sub
        y_bus[np.ix_(t_idx, f_idx)] -= y_sub
    return y_bus


@dataclass(frozen=True, eq=False)
class FeederTree:
    """Rooted view of a radial network: parent maps keyed by bus position."""

    order: list[int]  # bus positions, root first, parents before children
    parent: dict[int, int]  # child position -> parent position
    parent_line: dict[int, int]  # child position -> line index
    children: dict[int, list[int]]

    def subtree(self, pos: int) -> list[int]:
        out = [pos]
        stack = [pos]
        while stack:
            u = stack.pop()
            for v in self.children.get(u, []):
                out.append(v)
                stack.append(v)
        return out


def feeder_tree(network: Network) -> FeederTree:
    """Root the radial network at the slack bus (BFS order)."""
    diag = validate_topology(network)
    if not diag.ok:
        raise InputError("cannot root invalid network: " + "; ".join(diag.issues))
    root = network.slack_index
    adj: dict[int, list[tuple[int, int]]] = {i: [] for i in range(network.n_bus)}
    for li, line in enumerate(network.lines):
        fi = network.bus_position(line.from_bus)
        ti = network.bus_position(line.to_bus)
        adj[fi].append((ti, li))
        adj[ti].append((fi, li))
    order = [root]
    parent: dict[int, int] = {}
    parent_line: dict[int, int] = {}
    children: dict[int, list[int]] = {i: [] for i in range(network.n_bus)}
    visited = {root}
    queue = [root]
    while queue:
        u = queue.pop(0)
        for v, li in sorted(adj[u]):
            if v not in visited:
                visited.add(v)
                parent[v] = u
                parent_line[v] = li
                children[u].append(v)
                order.append(v)
                queue.append(v)
    return FeederTree(order=order, parent=parent, parent_line=parent_line, children=children)
