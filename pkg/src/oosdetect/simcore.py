"""Classical multi-machine swing dynamics in the centre-of-inertia frame.

Fixed-step RK4 across pre-fault / on-fault / post-fault topologies, with the algebraic
network solved at every derivative evaluation.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CaseError
from .netmodel import (
    AdmittanceSystem,
    FaultSpec,
    NetworkCase,
    OperatingPoint,
    StageNetwork,
    SteadyBaseline,
    build_admittance,
    element_angles,
    element_powers,
    initialize,
    load_case,
    redispatch,
    solve_steady_state,
)

log = logging.getLogger(__name__)

RUNAWAY_ANGLE = 10 * 2 * math.pi
STAGE_CODES = {"pre": 0, "fault": 1, "post": 2}


@dataclass(frozen=True)
class Scenario:
    fault_bus: int | None
    fault_duration: float
    fault_start: float = 0.1
    cleared_branches: tuple[str, ...] = ()
    t_end: float = 10.0
    dt: float = 1e-3
    case: str = "ieee39"
    v_threshold: float | None = None
    hysteresis: float = 0.05
    slack_bus: int | None = None
    gen_p: Mapping[int, float] = field(default_factory=dict)
    gen_vset: Mapping[int, float] = field(default_factory=dict)
    load_scale: float | Mapping[int, float] = 1.0
    gen_scale: float = 1.0
    fault_admittance: float = 1e7
    name: str = ""

    def __post_init__(self):
        if self.fault_duration < 0:
            raise ValueError("fault duration must be non-negative")
        if self.dt <= 0:
            raise ValueError("step size must be positive")
        if self.fault_start < 0:
            raise ValueError("fault start must be non-negative")
        if self.t_end <= self.fault_start + self.fault_duration:
            raise ValueError("simulation must extend past fault clearing")

    @classmethod
    def from_dict(cls, d: Mapping, base_dir: Path | None = None) -> "Scenario":
        case = d.get("case", "ieee39")
        if base_dir is not None and not Path(case).is_absolute() and (base_dir / case).exists():
            case = str(base_dir / case)
        return cls(
            fault_bus=d.get("fault_bus"),
            fault_duration=float(d.get("fault_duration", 0.0)),
            fault_start=float(d.get("fault_start", 0.1)),
            cleared_branches=tuple(d.get("cleared_branches", ())),
            t_end=float(d.get("t_end", 10.0)),
            dt=float(d.get("dt", 1e-3)),
            case=str(case),
            v_threshold=d.get("v_threshold"),
            hysteresis=float(d.get("hysteresis", 0.05)),
            slack_bus=d.get("slack_bus"),
            gen_p={int(k): float(v) for k, v in d.get("gen_p", {}).items()},
            gen_vset={int(k): float(v) for k, v in d.get("gen_vset", {}).items()},
            load_scale=_load_scale(d.get("load_scale", 1.0)),
            gen_scale=float(d.get("gen_scale", 1.0)),
            fault_admittance=float(d.get("fault_admittance", 1e7)),
            name=str(d.get("name", "")),
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "case": self.case,
            "fault_bus": self.fault_bus,
            "fault_start": self.fault_start,
            "fault_duration": self.fault_duration,
            "cleared_branches": list(self.cleared_branches),
            "t_end": self.t_end,
            "dt": self.dt,
            "v_threshold": self.v_threshold,
            "hysteresis": self.hysteresis,
            "slack_bus": self.slack_bus,
            "gen_p": {str(k): v for k, v in self.gen_p.items()},
            "gen_vset": {str(k): v for k, v in self.gen_vset.items()},
            "load_scale": (self.load_scale if not isinstance(self.load_scale, Mapping)
                           else {str(k): v for k, v in self.load_scale.items()}),
            "gen_scale": self.gen_scale,
            "fault_admittance": self.fault_admittance,
        }

    def with_(self, **kw) -> "Scenario":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(kw)
        return Scenario(**d)


def _load_scale(v):
    if isinstance(v, Mapping):
        return {int(k): float(x) for k, x in v.items()}
    return float(v)


def load_scenario(path: str | Path) -> Scenario:
    p = Path(path)
    with open(p, encoding="utf-8") as fh:
        return Scenario.from_dict(json.load(fh), base_dir=p.parent)


def scenario_case(scn: Scenario, case: NetworkCase | None = None) -> NetworkCase:
    """The case with the scenario's operating-point adjustments applied."""
    from dataclasses import replace

    case = load_case(scn.case) if case is None else case
    case = redispatch(case, gen_p=scn.gen_p, load_scale=scn.load_scale, gen_vset=scn.gen_vset,
                      gen_scale=scn.gen_scale)
    if scn.v_threshold is not None:
        case = replace(case, loads=tuple(replace(ld, v_threshold=float(scn.v_threshold))
                                         for ld in case.loads))
    if scn.slack_bus is not None:
        case = replace(case, slack_bus=int(scn.slack_bus))
    return case


@dataclass(frozen=True, eq=False)
class SystemState:
    t: float
    delta: np.ndarray
    omega: np.ndarray
    bus_v: np.ndarray
    stage: str


def to_coi_frame(delta: np.ndarray, omega: np.ndarray, inertia: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Subtract the inertia-weighted mean angle and speed (works on trailing axis)."""
    M = np.asarray(inertia, dtype=float)
    MT = M.sum()
    d = np.asarray(delta, dtype=float)
    w = np.asarray(omega, dtype=float)
    return d - (d @ M / MT)[..., None], w - (w @ M / MT)[..., None]


def derivatives(delta, omega, net: StageNetwork, pm, inertia, damping=None, converted=None):
    """Right-hand side of the swing equations in the COI frame.

    Returns ``(d delta/dt, d omega/dt, pe, V)``.
    """
    E = net.op.emag * np.exp(1j * delta)
    if net.has_cp:
        V, _ = net.solve(E, converted)
        pe = net.gen_power(E, V)
    else:
        V = None
        pe = (E * np.conj(net.Y_int @ E)).real
    acc = pm - pe
    if damping is not None:
        acc = acc - damping * omega
    pcoi = acc.sum()
    domega = (acc - inertia / inertia.sum() * pcoi) / inertia
    return omega, domega, pe, V


def network_solve(delta: np.ndarray, net: StageNetwork, converted=None) -> dict[str, np.ndarray]:
    """Bus voltages and element powers for rotor angles ``delta`` on one topology stage."""
    E = net.op.emag * np.exp(1j * np.asarray(delta))
    V, y_eff = net.solve(E, converted)
    out = element_powers(net.case, net.adm, V, E, y_eff)
    out["V"] = V
    out["load_y"] = y_eff
    phi = np.angle(V)
    out["sigma"] = element_angles(net.case, phi, np.asarray(delta))
    out["converted"] = net.cp & (converted if converted is not None else net.initial_modes())
    return out


@dataclass(eq=False)
class Trajectory:
    """Uniformly sampled simulation record (COI frame) with the post-fault baseline."""

    case: NetworkCase
    scenario: Scenario
    t: np.ndarray
    delta: np.ndarray
    omega: np.ndarray
    V: np.ndarray
    stage: np.ndarray
    load_y: np.ndarray
    baseline: SteadyBaseline
    adm_by_stage: dict[str, AdmittanceSystem]
    i_fault: int
    i_clear: int
    status: str = "complete"
    wall_time: float = 0.0

    @property
    def dt(self) -> float:
        return self.scenario.dt

    @property
    def n(self) -> int:
        return len(self.t)

    @property
    def t_clear(self) -> float:
        return float(self.t[self.i_clear])

    @property
    def pm(self) -> np.ndarray:
        return self.baseline.pm

    @cached_property
    def _powers(self) -> dict[str, np.ndarray]:
        E = self.baseline.op.emag * np.exp(1j * self.delta)
        out = None
        for name, code in STAGE_CODES.items():
            sel = self.stage == code
            if not sel.any():
                continue
            pw = element_powers(self.case, self.adm_by_stage[name], self.V[sel], E[sel], self.load_y[sel])
            if out is None:
                out = {k: np.zeros((self.n,) + v.shape[1:]) for k, v in pw.items()}
            for k, v in pw.items():
                out[k][sel] = v
        return out

    @property
    def pe(self) -> np.ndarray:
        return self._powers["pe"]

    @property
    def p_fwd(self) -> np.ndarray:
        return self._powers["p_fwd"]

    @property
    def p_rev(self) -> np.ndarray:
        return self._powers["p_rev"]

    @property
    def p_load(self) -> np.ndarray:
        return self._powers["p_load"]

    @property
    def p_shunt(self) -> np.ndarray:
        return self._powers["p_shunt"]

    @cached_property
    def phi(self) -> np.ndarray:
        """Bus voltage angles, unwrapped in time."""
        return np.unwrap(np.angle(self.V), axis=0)

    @cached_property
    def sigma(self) -> dict[str, np.ndarray]:
        return element_angles(self.case, self.phi, self.delta)

    def state(self, k: int) -> SystemState:
        names = {v: k_ for k_, v in STAGE_CODES.items()}
        return SystemState(float(self.t[k]), self.delta[k], self.omega[k], self.V[k], names[int(self.stage[k])])

    def truncated(self, n: int) -> "Trajectory":
        """First ``n`` samples (a streaming prefix)."""
        return Trajectory(
            case=self.case, scenario=self.scenario, t=self.t[:n], delta=self.delta[:n],
            omega=self.omega[:n], V=self.V[:n], stage=self.stage[:n], load_y=self.load_y[:n],
            baseline=self.baseline, adm_by_stage=self.adm_by_stage, i_fault=self.i_fault,
            i_clear=min(self.i_clear, n - 1), status=self.status if n == self.n else "partial",
        )

    def to_csv(self, path: str | Path, float_fmt: str = "%.9g") -> None:
        """Columns: t, delta_<gen>, omega_<gen>, vmag_<bus>, vang_<bus>, p_<branch>_fwd/_rev, pload_<bus>."""
        case = self.case
        cols = ["t"]
        cols += [f"delta_{g}" for g in case.gen_ids]
        cols += [f"omega_{g}" for g in case.gen_ids]
        cols += [f"vmag_{b.id}" for b in case.buses]
        cols += [f"vang_{b.id}" for b in case.buses]
        for br in case.branches:
            cols += [f"p_{br.name}_fwd", f"p_{br.name}_rev"]
        cols += [f"pload_{ld.bus}" for ld in case.loads]
        pf = np.empty((self.n, 2 * len(case.branches)))
        pf[:, 0::2] = self.p_fwd
        pf[:, 1::2] = self.p_rev
        data = np.hstack([
            self.t[:, None], self.delta, self.omega, np.abs(self.V), self.phi, pf, self.p_load,
        ])
        np.savetxt(path, data, delimiter=",", header=",".join(cols), comments="", fmt=float_fmt)


def _stage_of_step(k: int, i_fault: int, i_clear: int) -> str:
    if k < i_fault:
        return "pre"
    if k < i_clear:
        return "fault"
    return "post"


def prepare(scn: Scenario, case: NetworkCase | None = None):
    """Case, per-stage admittances, pre-fault operating point and post-fault baseline."""
    case = scenario_case(scn, case)
    fault = FaultSpec(bus=scn.fault_bus, admittance=scn.fault_admittance, trip=scn.cleared_branches)
    adm = {s: build_admittance(case, s, fault) for s in ("pre", "fault", "post")}
    op = initialize(case, adm["pre"], slack=case.slack_bus)
    baseline = solve_steady_state(case, adm["post"], op=op)
    return case, adm, op, baseline


def simulate(scn: Scenario, case: NetworkCase | None = None) -> Trajectory:
    """Integrate the scenario with fixed-step RK4; events are snapped to the step grid."""
    import time

    t_start = time.perf_counter()
    case, adm, op, baseline = prepare(scn, case)
    nets = {s: StageNetwork(case, a, op) for s, a in adm.items()}
    dt = scn.dt
    n = int(round(scn.t_end / dt)) + 1
    i_fault = int(round(scn.fault_start / dt))
    i_clear = int(round((scn.fault_start + scn.fault_duration) / dt))
    M = case.inertia
    pm = op.pm
    D = np.array([g.damping for g in case.generators])
    damping = D if np.any(D) else None
    m = len(case.generators)
    any_cp = nets["pre"].has_cp

    delta = np.empty((n, m))
    omega = np.empty((n, m))
    stage = np.empty(n, dtype=np.int8)
    V = np.empty((n, case.n_bus), dtype=complex) if any_cp else None
    load_y = np.empty((n, len(case.loads)), dtype=complex) if any_cp else None
    converted = nets["pre"].initial_modes()

    d = op.delta.copy()
    w = np.zeros(m)
    status = "complete"
    last = n - 1
    for k in range(n):
        s_rec = _stage_of_step(k, i_fault, i_clear)
        delta[k] = d
        omega[k] = w
        stage[k] = STAGE_CODES[s_rec]
        net = nets[s_rec]
        if any_cp:
            E = op.emag * np.exp(1j * d)
            Vk, yk = net.solve(E, converted)
            converted = net.update_modes(Vk, converted, scn.hysteresis)
            V[k], load_y[k] = Vk, yk
        if np.max(np.abs(d)) > RUNAWAY_ANGLE:
            status = "rotor_runaway"
            last = k
            log.warning("rotor runaway at t=%.3f s; trajectory truncated", k * dt)
            break
        if k == n - 1:
            break
        args = (net, pm, M, damping, converted)
        k1d, k1w, _, _ = derivatives(d, w, *args)
        k2d, k2w, _, _ = derivatives(d + 0.5 * dt * k1d, w + 0.5 * dt * k1w, *args)
        k3d, k3w, _, _ = derivatives(d + 0.5 * dt * k2d, w + 0.5 * dt * k2w, *args)
        k4d, k4w, _, _ = derivatives(d + dt * k3d, w + dt * k3w, *args)
        d = d + dt / 6.0 * (k1d + 2 * k2d + 2 * k3d + k4d)
        w = w + dt / 6.0 * (k1w + 2 * k2w + 2 * k3w + k4w)

    sl = slice(0, last + 1)
    delta, omega, stage = delta[sl], omega[sl], stage[sl]
    t = np.arange(last + 1) * dt
    if any_cp:
        V, load_y = V[sl], load_y[sl]
    else:
        E = op.emag * np.exp(1j * delta)
        V = np.empty((len(t), case.n_bus), dtype=complex)
        for name, code in STAGE_CODES.items():
            sel = stage == code
            if sel.any():
                V[sel] = E[sel] @ nets[name].K.T
        load_y = np.broadcast_to(op.load_y, (len(t), len(case.loads))).copy()
    return Trajectory(
        case=case, scenario=scn, t=t, delta=delta, omega=omega, V=V, stage=stage,
        load_y=load_y, baseline=baseline, adm_by_stage=adm, i_fault=min(i_fault, last),
        i_clear=min(i_clear, last), status=status, wall_time=time.perf_counter() - t_start,
    )


def rebuild(scn: Scenario, delta: np.ndarray, omega: np.ndarray, case: NetworkCase | None = None,
            status: str = "complete") -> Trajectory:
    """Trajectory from recorded rotor angles and speeds; network quantities are re-solved."""
    case, adm, op, baseline = prepare(scn, case)
    nets = {s: StageNetwork(case, a, op) for s, a in adm.items()}
    delta = np.asarray(delta, dtype=float)
    omega = np.asarray(omega, dtype=float)
    n = len(delta)
    i_fault = int(round(scn.fault_start / scn.dt))
    i_clear = int(round((scn.fault_start + scn.fault_duration) / scn.dt))
    stage = np.array([STAGE_CODES[_stage_of_step(k, i_fault, i_clear)] for k in range(n)], dtype=np.int8)
    E = op.emag * np.exp(1j * delta)
    names = {v: k for k, v in STAGE_CODES.items()}
    if nets["pre"].has_cp:
        V = np.empty((n, case.n_bus), dtype=complex)
        load_y = np.empty((n, len(case.loads)), dtype=complex)
        converted = nets["pre"].initial_modes()
        for k in range(n):
            net = nets[names[int(stage[k])]]
            V[k], load_y[k] = net.solve(E[k], converted)
            converted = net.update_modes(V[k], converted, scn.hysteresis)
    else:
        V = np.empty((n, case.n_bus), dtype=complex)
        for name, code in STAGE_CODES.items():
            sel = stage == code
            if sel.any():
                V[sel] = E[sel] @ nets[name].K.T
        load_y = np.broadcast_to(op.load_y, (n, len(case.loads))).copy()
    return Trajectory(
        case=case, scenario=scn, t=np.arange(n) * scn.dt, delta=delta, omega=omega, V=V, stage=stage,
        load_y=load_y, baseline=baseline, adm_by_stage=adm, i_fault=min(i_fault, n - 1),
        i_clear=min(i_clear, n - 1), status=status,
    )
