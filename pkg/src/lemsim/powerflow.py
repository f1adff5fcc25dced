"""Three-phase unbalanced power flow via current-injection fixed point.

Z-bus style iteration: with the admittance matrix partitioned into source
(fixed-voltage) and unknown bus-phase rows, repeat

    V  <-  Ynn^-1 (I(V) - Yns Vs),   I = conj(s / V)

until the largest bus-phase power mismatch drops below tolerance. The
transformer is modeled as the slack bus fed from an ideal source behind a
series impedance (short_circuit_pct > 0); with a stiff transformer the
slack bus itself holds the source phasors.

Sign conventions: injections are generation-positive; the PCC power is
import-positive (power flowing from the grid into the feeder).
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import InputError, SolverError
from .netmodel import SLACK_PHASORS, Network, build_admittance, shared_phases

VOLTAGE_COLLAPSE_PU = 0.5

# Networks are immutable after construction, so the factorized admittance
# system can be reused across the thousands of solves a simulation runs.
_SYSTEM_CACHE: "weakref.WeakKeyDictionary[Network, tuple]" = weakref.WeakKeyDictionary()


@dataclass(frozen=True, eq=False)
class InjectionSet:
    """Complex power injections per bus and phase (per-unit).

    `s` is the net injection (generation positive); `pv` is the PV
    component of `s` (real, >= 0), kept separate so attacks can zero it.
    """

    s: np.ndarray  # (n_bus, 3) complex
    pv: np.ndarray | None = None  # (n_bus, 3) real, >= 0

    def __post_init__(self):
        s = np.asarray(self.s, dtype=complex)
        object.__setattr__(self, "s", s)
        if self.pv is not None:
            pv = np.asarray(self.pv, dtype=float)
            if pv.shape != s.shape:
                raise InputError("pv component shape must match s")
            object.__setattr__(self, "pv", pv)

    def validate(self, network: Network) -> None:
        if self.s.shape != (network.n_bus, 3):
            raise InputError(
                f"injections shape {self.s.shape} != (n_bus, 3) = ({network.n_bus}, 3)"
            )
        slack = network.slack_index
        if np.any(self.s[slack] != 0):
            raise InputError("slack bus carries no specified injection")
        for i, bus in enumerate(network.buses):
            absent = [p for p in range(3) if p not in bus.phases]
            if absent and np.any(self.s[i, absent] != 0):
                raise InputError(f"bus {bus.id}: injection on absent phase")


@dataclass(eq=False)
class PowerFlowSolution:
    voltages: np.ndarray  # (n_bus, 3) complex pu; absent phases 0
    currents: np.ndarray  # (n_lines, 3) complex pu, from -> to
    losses: np.ndarray  # (3,) kW per phase
    pcc: np.ndarray  # (3,) kW, import-positive
    iterations: int
    residual: float
    residual_trace: np.ndarray  # mismatch per iteration


def _unknown_indices(network: Network) -> list[int]:
    """Global indices (3*bus + phase) solved for, slack source excluded."""
    idx = []
    slack = network.slack_index
    stiff = network.transformer_z_pu() == 0
    for i, bus in enumerate(network.buses):
        if stiff and i == slack:
            continue
        idx.extend(3 * i + p for p in bus.phases)
    return idx


def _assemble_system(network: Network):
    """Return (Ynn, Yns, v_source, unknown_idx) with transformer augmentation."""
    n = network.n_bus
    slack = network.slack_index
    slack_bus = network.buses[slack]
    y = build_admittance(network)
    z_tx = network.transformer_z_pu()
    if z_tx == 0:
        unknown = _unknown_indices(network)
        src = [3 * slack + p for p in slack_bus.phases]
        return y[np.ix_(unknown, unknown)], y[np.ix_(unknown, src)], SLACK_PHASORS[list(slack_bus.phases)], unknown
    if len(slack_bus.phases) != 3:
        raise InputError("slack bus must carry all three phases behind a transformer")
    # Augment with a source node behind the transformer impedance.
    y_aug = np.zeros((3 * n + 3, 3 * n + 3), dtype=complex)
    y_aug[: 3 * n, : 3 * n] = y
    y_tx = 1.0 / z_tx
    for p in range(3):
        s_idx = 3 * slack + p
        v_idx = 3 * n + p
        y_aug[s_idx, s_idx] += y_tx
        y_aug[v_idx, v_idx] += y_tx
        y_aug[s_idx, v_idx] -= y_tx
        y_aug[v_idx, s_idx] -= y_tx
    unknown = _unknown_indices(network)
    src = [3 * n + p for p in range(3)]
    return y_aug[np.ix_(unknown, unknown)], y_aug[np.ix_(unknown, src)], SLACK_PHASORS.copy(), unknown


def solve_power_flow(
    network: Network,
    injections: InjectionSet,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> PowerFlowSolution:
    """Run the current-injection fixed point from a flat start."""
    if tol <= 0:
        raise InputError("tol must be > 0")
    injections.validate(network)
    n = network.n_bus
    cached = _SYSTEM_CACHE.get(network)
    if cached is None:
        ynn, yns, v_src, unknown = _assemble_system(network)
        try:
            lu = scipy.linalg.lu_factor(ynn)
        except (scipy.linalg.LinAlgError, ValueError) as exc:
            raise SolverError(f"admittance system is singular: {exc}") from exc
        cached = (ynn, yns, v_src, unknown, lu)
        _SYSTEM_CACHE[network] = cached
    ynn, yns, v_src, unknown, lu = cached

    s = injections.s.reshape(-1)[unknown]
    phase_of = np.array([g % 3 for g in unknown])
    v = SLACK_PHASORS[phase_of].astype(complex)
    b_src = yns @ v_src

    trace = []
    mismatch = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        i_inj = np.conj(s / v)
        v_new = scipy.linalg.lu_solve(lu, i_inj - b_src)
        if np.any(np.abs(v_new) < VOLTAGE_COLLAPSE_PU):
            raise SolverError(
                "voltage collapse: |V| < 0.5 pu during fixed-point iteration",
                diagnostics={"iteration": it, "vmin": float(np.min(np.abs(v_new)))},
            )
        v = v_new
        mismatch = float(np.max(np.abs(v * np.conj(ynn @ v + b_src) - s)))
        trace.append(mismatch)
        if mismatch <= tol:
            break
    if mismatch > tol:
        raise SolverError(
            f"power flow did not converge in {max_iter} iterations "
            f"(mismatch {mismatch:.3e} > tol {tol:.3e})",
            diagnostics={"residual_trace": np.array(trace)},
        )

    voltages = np.zeros((n, 3), dtype=complex)
    flat = voltages.reshape(-1)
    for g, vg in zip(unknown, v):
        if g < 3 * n:
            flat[g] = vg
    if network.transformer_z_pu() == 0:
        slack = network.slack_index
        for p in network.buses[slack].phases:
            voltages[slack, p] = SLACK_PHASORS[p]

    solution = PowerFlowSolution(
        voltages=voltages,
        currents=_line_currents(network, voltages),
        losses=np.zeros(3),
        pcc=np.zeros(3),
        iterations=it,
        residual=mismatch,
        residual_trace=np.array(trace),
    )
    solution.losses = compute_losses(solution, network)
    solution.pcc = _pcc_from_state(network, voltages)
    return solution


def _line_currents(network: Network, voltages: np.ndarray) -> np.ndarray:
    currents = np.zeros((len(network.lines), 3), dtype=complex)
    for li, line in enumerate(network.lines):
        ph = list(shared_phases(network, line))
        fi = network.bus_position(line.from_bus)
        ti = network.bus_position(line.to_bus)
        drop = voltages[fi, ph] - voltages[ti, ph]
        currents[li, ph] = np.linalg.solve(line.z[np.ix_(ph, ph)], drop)
    return currents


def compute_losses(solution: PowerFlowSolution, network: Network) -> np.ndarray:
    """Per-phase line losses in kW: sum over lines of Re(drop * conj(I))."""
    losses = np.zeros(3)
    for li, line in enumerate(network.lines):
        ph = list(shared_phases(network, line))
        fi = network.bus_position(line.from_bus)
        ti = network.bus_position(line.to_bus)
        drop = solution.voltages[fi, ph] - solution.voltages[ti, ph]
        losses[ph] += np.real(drop * np.conj(solution.currents[li, ph]))
    return losses * network.s_base_phase_kw


def _pcc_from_state(network: Network, voltages: np.ndarray) -> np.ndarray:
    """Real power flowing into the feeder at the slack bus, per phase (kW)."""
    slack = network.slack_index
    z_tx = network.transformer_z_pu()
    if z_tx != 0:
        i_tx = (SLACK_PHASORS - voltages[slack]) / z_tx
        s_pcc = voltages[slack] * np.conj(i_tx)
        return np.real(s_pcc) * network.s_base_phase_kw
    # Stiff transformer: slack power balances the lines incident to it.
    p = np.zeros(3)
    currents = _line_currents(network, voltages)
    for li, line in enumerate(network.lines):
        ph = list(shared_phases(network, line))
        fi = network.bus_position(line.from_bus)
        ti = network.bus_position(line.to_bus)
        if fi == slack:
            p[ph] += np.real(voltages[slack, ph] * np.conj(currents[li, ph]))
        elif ti == slack:
            p[ph] += np.real(voltages[slack, ph] * np.conj(-currents[li, ph]))
    return p * network.s_base_phase_kw


def pcc_injection(solution: PowerFlowSolution) -> np.ndarray:
    """Three-phase PCC real power (kW, import-positive)."""
    return solution.pcc
