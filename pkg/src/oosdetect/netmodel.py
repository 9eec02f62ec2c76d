"""Static network model: case records, Y-bus assembly, power flow and Kron reduction.

All electrical quantities are per unit on ``NetworkCase.base_mva``; angles are radians.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.linalg as sla
from scipy.optimize import root
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import (
    CaseError,
    IslandedGenerator,
    NoPostFaultSEP,
    NetworkSolveDiverged,
    NotASeparator,
    PowerFlowDiverged,
    SingularReduction,
    UnknownBus,
)

FAULT_ADMITTANCE = 1e7
LOAD_MODELS = ("impedance", "constant_power")
STAGES = ("pre", "fault", "post")


# ---------------------------------------------------------------------------
# Case records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BusRecord:
    id: int
    gs: float = 0.0
    bs: float = 0.0


@dataclass(frozen=True)
class BranchRecord:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0
    tap: float = 1.0

    @property
    def name(self) -> str:
        return f"{self.from_bus}-{self.to_bus}"

    def stamp(self) -> tuple[complex, complex, complex, complex]:
        """(Y_ff, Y_ft, Y_tf, Y_tt) with the off-nominal tap on the from side."""
        y = 1.0 / complex(self.r, self.x)
        ysh = 0.5j * self.b
        a = self.tap
        return (y + ysh) / (a * a), -y / a, -y / a, y + ysh


@dataclass(frozen=True)
class GenRecord:
    bus: int
    H: float
    xd_prime: float
    p: float
    vset: float = 1.0
    damping: float = 0.0


@dataclass(frozen=True)
class LoadRecord:
    bus: int
    p: float
    q: float
    model: str = "impedance"
    v_threshold: float = 0.7


@dataclass(frozen=True)
class NetworkCase:
    base_mva: float
    buses: tuple[BusRecord, ...]
    branches: tuple[BranchRecord, ...]
    generators: tuple[GenRecord, ...]
    loads: tuple[LoadRecord, ...]
    frequency_hz: float = 60.0
    slack_bus: int | None = None
    name: str = ""

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise CaseError("duplicate bus ids")
        known = set(ids)
        for br in self.branches:
            for k in (br.from_bus, br.to_bus):
                if k not in known:
                    raise UnknownBus(f"branch {br.name} references unknown bus {k}")
            if not br.x > 0:
                raise CaseError(f"branch {br.name}: reactance must be positive")
            if not br.tap > 0:
                raise CaseError(f"branch {br.name}: tap ratio must be positive")
        for g in self.generators:
            if g.bus not in known:
                raise UnknownBus(f"generator references unknown bus {g.bus}")
            if not (g.H > 0 and g.xd_prime > 0):
                raise CaseError(f"generator at bus {g.bus}: H and x'd must be positive")
        if len({g.bus for g in self.generators}) != len(self.generators):
            raise CaseError("at most one generator per bus is supported")
        for ld in self.loads:
            if ld.bus not in known:
                raise UnknownBus(f"load references unknown bus {ld.bus}")
            if ld.model not in LOAD_MODELS:
                raise CaseError(f"unknown load model {ld.model!r}")
        if len(self.generators) < 2:
            raise CaseError("at least two generators are required")
        if self.slack_bus is not None and self.slack_bus not in {g.bus for g in self.generators}:
            raise CaseError(f"slack bus {self.slack_bus} has no generator")

    # -- lookups -----------------------------------------------------------

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def gen_index(self) -> dict[int, int]:
        """Generator id (its bus number) -> position."""
        return {g.bus: i for i, g in enumerate(self.generators)}

    @property
    def gen_ids(self) -> tuple[int, ...]:
        return tuple(g.bus for g in self.generators)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def omega_s(self) -> float:
        return 2.0 * math.pi * self.frequency_hz

    @cached_property
    def inertia(self) -> np.ndarray:
        """M_i = 2 H_i / omega_s, so that M dω/dt = ΔP with ω in rad/s."""
        return np.array([2.0 * g.H / self.omega_s for g in self.generators])

    @cached_property
    def gen_bus_rows(self) -> np.ndarray:
        return np.array([self.bus_index[g.bus] for g in self.generators], dtype=int)

    @cached_property
    def load_bus_rows(self) -> np.ndarray:
        return np.array([self.bus_index[ld.bus] for ld in self.loads], dtype=int)

    def branch_index(self, ref: str | int) -> int:
        """Resolve "k-l" (either orientation) or a plain index to a branch position."""
        if isinstance(ref, (int, np.integer)):
            if not 0 <= ref < len(self.branches):
                raise CaseError(f"branch index {ref} out of range")
            return int(ref)
        try:
            a, b = (int(s) for s in str(ref).split("-"))
        except ValueError:
            raise CaseError(f"bad branch reference {ref!r}") from None
        hits = [
            i for i, br in enumerate(self.branches)
            if {br.from_bus, br.to_bus} == {a, b}
        ]
        if not hits:
            raise CaseError(f"no branch between buses {a} and {b}")
        if len(hits) > 1:
            raise CaseError(f"branch reference {ref!r} is ambiguous (parallel branches)")
        return hits[0]

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "base_mva": self.base_mva,
            "frequency_hz": self.frequency_hz,
            "slack_bus": self.slack_bus,
            "buses": [{"id": b.id, "gs": b.gs, "bs": b.bs} for b in self.buses],
            "branches": [
                {"from": br.from_bus, "to": br.to_bus, "r": br.r, "x": br.x, "b": br.b, "tap": br.tap}
                for br in self.branches
            ],
            "generators": [
                {"bus": g.bus, "H": g.H, "xd_prime": g.xd_prime, "p": g.p, "vset": g.vset,
                 "damping": g.damping}
                for g in self.generators
            ],
            "loads": [
                {"bus": ld.bus, "p": ld.p, "q": ld.q, "model": ld.model, "v_threshold": ld.v_threshold}
                for ld in self.loads
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkCase":
        try:
            buses = tuple(BusRecord(int(b["id"]), float(b.get("gs", 0.0)), float(b.get("bs", 0.0)))
                          for b in d["buses"])
            branches = tuple(
                BranchRecord(int(b["from"]), int(b["to"]), float(b["r"]), float(b["x"]),
                             float(b.get("b", 0.0)), float(b.get("tap") or 1.0))
                for b in d["branches"]
            )
            freq = float(d.get("frequency_hz", 60.0))
            gens = []
            for g in d["generators"]:
                if "H" in g:
                    h = float(g["H"])
                else:
                    # M given directly on system base
                    h = float(g["M"]) * 2.0 * math.pi * freq / 2.0
                gens.append(GenRecord(int(g["bus"]), h, float(g["xd_prime"]), float(g.get("p", 0.0)),
                                      float(g.get("vset", 1.0)), float(g.get("damping", 0.0))))
            loads = tuple(
                LoadRecord(int(ld["bus"]), float(ld["p"]), float(ld.get("q", 0.0)),
                           ld.get("model", "impedance"), float(ld.get("v_threshold", 0.7)))
                for ld in d.get("loads", [])
            )
        except KeyError as exc:
            raise CaseError(f"missing field {exc}") from None
        slack = d.get("slack_bus")
        return cls(
            base_mva=float(d.get("base_mva", 100.0)),
            buses=buses,
            branches=branches,
            generators=tuple(gens),
            loads=loads,
            frequency_hz=freq,
            slack_bus=None if slack is None else int(slack),
            name=str(d.get("name", "")),
        )


def bundled_case_path(name: str = "ieee39") -> Path:
    return Path(str(resources.files("oosdetect") / "cases" / f"{name}.json"))


def load_case(path: str | Path) -> NetworkCase:
    """Read a case JSON file. A bare name such as ``"ieee39"`` resolves to a bundled case."""
    p = Path(path)
    if not p.exists() and p.suffix == "" and bundled_case_path(str(path)).exists():
        p = bundled_case_path(str(path))
    with open(p, encoding="utf-8") as fh:
        return NetworkCase.from_dict(json.load(fh))


def dumps_case(case: NetworkCase) -> str:
    return json.dumps(case.to_dict(), indent=1, sort_keys=True) + "\n"


def save_case(case: NetworkCase, path: str | Path) -> None:
    Path(path).write_text(dumps_case(case), encoding="utf-8")


def redispatch(
    case: NetworkCase,
    gen_p: Mapping[int, float] | None = None,
    load_scale: float | Mapping[int, float] = 1.0,
    gen_vset: Mapping[int, float] | None = None,
    gen_scale: float = 1.0,
) -> NetworkCase:
    """Return a copy with modified generator schedules and/or scaled loads.

    ``gen_scale`` multiplies every schedule not set explicitly in ``gen_p``.
    """
    gen_p = {int(k): float(v) for k, v in (gen_p or {}).items()}
    gen_vset = {int(k): float(v) for k, v in (gen_vset or {}).items()}
    for k in list(gen_p) + list(gen_vset):
        if k not in case.gen_index:
            raise UnknownBus(f"no generator at bus {k}")
    gens = tuple(
        replace(g, p=gen_p.get(g.bus, g.p * gen_scale), vset=gen_vset.get(g.bus, g.vset))
        for g in case.generators
    )
    if isinstance(load_scale, Mapping):
        scale = {int(k): float(v) for k, v in load_scale.items()}
        loads = tuple(replace(ld, p=ld.p * scale.get(ld.bus, 1.0), q=ld.q * scale.get(ld.bus, 1.0))
                      for ld in case.loads)
    else:
        loads = tuple(replace(ld, p=ld.p * load_scale, q=ld.q * load_scale) for ld in case.loads)
    return replace(case, generators=gens, loads=loads)


def lossless_variant(case: NetworkCase) -> NetworkCase:
    """Zero every series resistance and bus shunt conductance."""
    return replace(
        case,
        branches=tuple(replace(br, r=0.0) for br in case.branches),
        buses=tuple(replace(b, gs=0.0) for b in case.buses),
        name=f"{case.name}-lossless",
    )


# ---------------------------------------------------------------------------
# Admittance assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FaultSpec:
    """Three-phase bus fault, optionally cleared by tripping branches."""

    bus: int | None = None
    admittance: float = FAULT_ADMITTANCE
    trip: tuple[str, ...] = ()


@dataclass(frozen=True, eq=False)
class AdmittanceSystem:
    Y: np.ndarray
    stage: str
    index: Mapping[int, int]
    in_service: tuple[bool, ...]
    fault_bus: int | None = None


def _check_connected(case: NetworkCase, in_service: Sequence[bool]) -> None:
    n = case.n_bus
    rows, cols = [], []
    for br, on in zip(case.branches, in_service):
        if on:
            rows.append(case.bus_index[br.from_bus])
            cols.append(case.bus_index[br.to_bus])
    g = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    ncomp, labels = connected_components(g, directed=False)
    if ncomp == 1:
        return
    gen_labels = {labels[case.bus_index[gen.bus]] for gen in case.generators}
    if len(gen_labels) > 1:
        raise IslandedGenerator("generators are split across electrical islands")
    dead = [case.buses[i].id for i in range(n) if labels[i] not in gen_labels]
    raise IslandedGenerator(f"buses {dead} are disconnected from all generators")


def build_admittance(
    case: NetworkCase, stage: str = "pre", fault: FaultSpec | None = None
) -> AdmittanceSystem:
    """Assemble the network Y-bus (branches and bus shunts only) for one topology stage.

    Loads and generator reactances are not included; they are stamped by the
    reduction and the dynamic network solver.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    fault = fault or FaultSpec()
    if fault.bus is not None and fault.bus not in case.bus_index:
        raise UnknownBus(f"fault bus {fault.bus} not in case")
    tripped = {case.branch_index(ref) for ref in fault.trip} if stage == "post" else set()
    in_service = tuple(i not in tripped for i in range(len(case.branches)))
    _check_connected(case, in_service)

    n = case.n_bus
    Y = np.zeros((n, n), dtype=complex)
    idx = case.bus_index
    for br, on in zip(case.branches, in_service):
        if not on:
            continue
        f, t = idx[br.from_bus], idx[br.to_bus]
        yff, yft, ytf, ytt = br.stamp()
        Y[f, f] += yff
        Y[f, t] += yft
        Y[t, f] += ytf
        Y[t, t] += ytt
    for b in case.buses:
        Y[idx[b.id], idx[b.id]] += complex(b.gs, b.bs)
    if stage == "fault" and fault.bus is not None:
        Y[idx[fault.bus], idx[fault.bus]] += fault.admittance
    return AdmittanceSystem(
        Y=Y, stage=stage, index=dict(idx), in_service=in_service,
        fault_bus=fault.bus if stage == "fault" else None,
    )


# ---------------------------------------------------------------------------
# Power flow
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PowerFlowResult:
    V: np.ndarray
    s_gen: np.ndarray
    iterations: int
    mismatch: float


def _dsbus_dv(Y: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ibus = Y @ V
    vnorm = V / np.abs(V)
    dS_dVm = np.diag(V) @ np.conj(Y @ np.diag(vnorm)) + np.diag(np.conj(ibus) * vnorm)
    dS_dVa = 1j * np.diag(V) @ np.conj(np.diag(ibus) - Y @ np.diag(V))
    return dS_dVm, dS_dVa


def power_flow(
    case: NetworkCase,
    adm: AdmittanceSystem,
    slack: int | None = None,
    tol: float = 1e-11,
    max_iter: int = 30,
) -> PowerFlowResult:
    """Newton-Raphson power flow in polar form; loads are scheduled P + jQ."""
    slack = case.slack_bus if slack is None else slack
    if slack is None:
        slack = case.generators[0].bus
    if slack not in case.gen_index:
        raise CaseError(f"slack bus {slack} has no generator")
    n = case.n_bus
    idx = case.bus_index
    Y = adm.Y

    s_sched = np.zeros(n, dtype=complex)
    for ld in case.loads:
        s_sched[idx[ld.bus]] -= complex(ld.p, ld.q)
    vm = np.ones(n)
    kind = np.zeros(n, dtype=int)  # 0 PQ, 1 PV, 2 slack
    for g in case.generators:
        r = idx[g.bus]
        vm[r] = g.vset
        if g.bus == slack:
            kind[r] = 2
        else:
            kind[r] = 1
            s_sched[r] += g.p
    pv = np.flatnonzero(kind == 1)
    pq = np.flatnonzero(kind == 0)
    pvpq = np.concatenate([pv, pq])

    V = vm.astype(complex)
    mismatch = np.inf
    for it in range(max_iter + 1):
        mis = V * np.conj(Y @ V) - s_sched
        F = np.concatenate([mis.real[pvpq], mis.imag[pq]])
        mismatch = float(np.max(np.abs(F))) if F.size else 0.0
        if mismatch < tol:
            break
        if it == max_iter:
            raise PowerFlowDiverged(it, mismatch)
        dVm, dVa = _dsbus_dv(Y, V)
        J = np.block([
            [dVa[np.ix_(pvpq, pvpq)].real, dVm[np.ix_(pvpq, pq)].real],
            [dVa[np.ix_(pq, pvpq)].imag, dVm[np.ix_(pq, pq)].imag],
        ])
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            raise PowerFlowDiverged(it, mismatch) from None
        va = np.angle(V)
        vmag = np.abs(V)
        va[pvpq] += dx[: len(pvpq)]
        vmag[pq] += dx[len(pvpq):]
        V = vmag * np.exp(1j * va)
        if not np.all(np.isfinite(V)):
            raise PowerFlowDiverged(it, np.inf)

    s_inj = V * np.conj(Y @ V)
    s_load = np.zeros(n, dtype=complex)
    for ld in case.loads:
        s_load[idx[ld.bus]] += complex(ld.p, ld.q)
    s_gen = np.array([s_inj[idx[g.bus]] + s_load[idx[g.bus]] for g in case.generators])
    return PowerFlowResult(V=V, s_gen=s_gen, iterations=it, mismatch=mismatch)


# ---------------------------------------------------------------------------
# Operating point and dynamic (augmented) network
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class OperatingPoint:
    """Pre-fault initial conditions of the classical-model system."""

    pf: PowerFlowResult
    pm: np.ndarray           # mechanical power per generator [pu]
    emag: np.ndarray         # |E'_i| [pu], fixed for the whole run
    delta: np.ndarray        # COI-frame rotor angles [rad]
    load_y: np.ndarray       # impedance-equivalent admittance of each load at the PF voltage
    coi_shift: float         # COI angle of the power-flow solution (slack frame)


def initialize(case: NetworkCase, adm: AdmittanceSystem, slack: int | None = None) -> OperatingPoint:
    pf = power_flow(case, adm, slack=slack)
    vt = pf.V[case.gen_bus_rows]
    xd = np.array([g.xd_prime for g in case.generators])
    ig = np.conj(pf.s_gen / vt)
    E = vt + 1j * xd * ig
    M = case.inertia
    ang = np.angle(E)
    coi = float(M @ ang / M.sum())
    vl = np.abs(pf.V[case.load_bus_rows])
    load_y = np.array([complex(ld.p, -ld.q) for ld in case.loads]) / vl**2
    return OperatingPoint(pf=pf, pm=pf.s_gen.real.copy(), emag=np.abs(E), delta=ang - coi,
                          load_y=load_y, coi_shift=coi)


class StageNetwork:
    """Algebraic network of one topology stage with generator reactances and loads attached.

    Impedance loads are folded into a factorized augmented admittance matrix; constant-power
    loads are handled by fixed-point iteration on their injected currents.
    """

    def __init__(self, case: NetworkCase, adm: AdmittanceSystem, op: OperatingPoint):
        self.case = case
        self.adm = adm
        self.op = op
        n = case.n_bus
        m = len(case.generators)
        self.y_gen = np.array([1.0 / (1j * g.xd_prime) for g in case.generators])
        Yaug = adm.Y.copy()
        Yaug[case.gen_bus_rows, case.gen_bus_rows] += self.y_gen
        self.cp = np.array([ld.model == "constant_power" for ld in case.loads], dtype=bool)
        lrows = case.load_bus_rows
        np.add.at(Yaug, (lrows[~self.cp], lrows[~self.cp]), op.load_y[~self.cp])
        self.Yaug = Yaug
        try:
            self._lu = sla.lu_factor(Yaug, check_finite=False)
        except (sla.LinAlgError, ValueError):
            raise SingularReduction(f"augmented admittance singular in stage {adm.stage}") from None
        if not np.all(np.isfinite(self._lu[0])) or np.min(np.abs(np.diag(self._lu[0]))) == 0.0:
            raise SingularReduction(f"augmented admittance singular in stage {adm.stage}")
        B = np.zeros((n, m), dtype=complex)
        B[case.gen_bus_rows, np.arange(m)] = self.y_gen
        self.B = B
        self.K = sla.lu_solve(self._lu, B, check_finite=False)  # V = K E when all loads are impedances
        Kt = self.K[case.gen_bus_rows]
        self.Y_int = np.diag(self.y_gen) - self.y_gen[:, None] * Kt  # I_G = Y_int E
        self.s_cp = np.array([complex(ld.p, ld.q) for ld in case.loads])
        self.v_thr = np.array([ld.v_threshold for ld in case.loads])
        self.y_thr = np.conj(self.s_cp) / self.v_thr**2

    @property
    def has_cp(self) -> bool:
        return bool(self.cp.any())

    def initial_modes(self) -> np.ndarray:
        """Per-load flag: True while a constant-power load is converted to impedance."""
        return np.zeros(len(self.case.loads), dtype=bool)

    def solve(self, E: np.ndarray, converted: np.ndarray | None = None,
              tol: float = 1e-10, max_iter: int = 100) -> tuple[np.ndarray, np.ndarray]:
        """Bus voltages for internal EMFs ``E``; also returns each load's effective admittance."""
        y_eff = self.op.load_y.copy()
        if not self.has_cp:
            return self.K @ E, y_eff
        converted = self.initial_modes() if converted is None else converted
        rows = self.case.load_bus_rows
        conv = self.cp & converted
        live = self.cp & ~converted
        rhs0 = self.B @ E
        V = self.K @ E
        for it in range(max_iter):
            vl = V[rows]
            inj = np.zeros_like(rhs0)
            i_load = np.where(live, np.conj(self.s_cp / np.where(vl == 0, 1.0, vl)), 0.0)
            i_load = i_load + np.where(conv, self.y_thr * vl, 0.0)
            np.add.at(inj, rows, i_load)
            Vn = sla.lu_solve(self._lu, rhs0 - inj, check_finite=False)
            err = np.max(np.abs(Vn - V))
            V = Vn
            if err < tol:
                break
        else:
            bad = {self.case.loads[i].bus for i in np.flatnonzero(live)}
            raise NetworkSolveDiverged(bad, max_iter)
        vl2 = np.abs(V[rows]) ** 2
        y_eff[live] = np.conj(self.s_cp[live]) / vl2[live]
        y_eff[conv] = self.y_thr[conv]
        return V, y_eff

    def update_modes(self, V: np.ndarray, converted: np.ndarray, hysteresis: float = 0.05) -> np.ndarray:
        vl = np.abs(V[self.case.load_bus_rows])
        new = converted.copy()
        new[self.cp & (vl < self.v_thr)] = True
        new[self.cp & converted & (vl > self.v_thr + hysteresis)] = False
        return new

    def gen_power(self, E: np.ndarray, V: np.ndarray) -> np.ndarray:
        ig = self.y_gen * (E - V[self.case.gen_bus_rows])
        return (E * np.conj(ig)).real


def element_powers(case: NetworkCase, adm: AdmittanceSystem, V: np.ndarray, E: np.ndarray,
                   load_y: np.ndarray) -> dict[str, np.ndarray]:
    """Active powers of every element; leading axes of ``V``/``E``/``load_y`` broadcast (e.g. time)."""
    V = np.asarray(V)
    E = np.asarray(E)
    idx = case.bus_index
    f = np.array([idx[br.from_bus] for br in case.branches], dtype=int)
    t = np.array([idx[br.to_bus] for br in case.branches], dtype=int)
    st = np.array([br.stamp() for br in case.branches]).reshape(-1, 4) if case.branches else np.zeros((0, 4))
    on = np.array(adm.in_service, dtype=bool)
    vf, vt = V[..., f], V[..., t]
    i_f = st[:, 0] * vf + st[:, 1] * vt
    i_t = st[:, 2] * vf + st[:, 3] * vt
    p_fwd = np.where(on, (vf * np.conj(i_f)).real, 0.0)
    p_rev = np.where(on, (vt * np.conj(i_t)).real, 0.0)
    y_gen = np.array([1.0 / (1j * g.xd_prime) for g in case.generators])
    vg = V[..., case.gen_bus_rows]
    pe = (E * np.conj(y_gen * (E - vg))).real
    vl = V[..., case.load_bus_rows]
    p_load = np.asarray(load_y).real * np.abs(vl) ** 2
    gs = np.array([b.gs for b in case.buses])
    p_shunt = gs * np.abs(V) ** 2
    return {"pe": pe, "p_fwd": p_fwd, "p_rev": p_rev, "p_load": p_load, "p_shunt": p_shunt}


def element_angles(case: NetworkCase, phi: np.ndarray, delta: np.ndarray) -> dict[str, np.ndarray]:
    """Angle differences σ for generator branches, network branches and loads (bus angles ``phi``)."""
    idx = case.bus_index
    f = np.array([idx[br.from_bus] for br in case.branches], dtype=int)
    t = np.array([idx[br.to_bus] for br in case.branches], dtype=int)
    return {
        "gen": delta - phi[..., case.gen_bus_rows],
        "branch": phi[..., f] - phi[..., t],
        "load": phi[..., case.load_bus_rows],
        "shunt": phi,
    }


@dataclass(frozen=True, eq=False)
class SteadyBaseline:
    """Post-fault stable equilibrium: element powers P_i^s and angles σ_i^s (COI frame)."""

    stage: str
    delta: np.ndarray
    E: np.ndarray
    V: np.ndarray
    pm: np.ndarray
    pe: np.ndarray
    p_fwd: np.ndarray
    p_rev: np.ndarray
    p_load: np.ndarray
    p_shunt: np.ndarray
    load_y: np.ndarray
    sigma_gen: np.ndarray
    sigma_branch: np.ndarray
    sigma_load: np.ndarray
    sigma_shunt: np.ndarray
    op: OperatingPoint

    def cluster_angles(self, inertia: np.ndarray, mask_s: np.ndarray) -> tuple[float, float]:
        """Inertia-weighted steady angles (δ_S^s, δ_A^s)."""
        ms, ma = inertia[mask_s], inertia[~mask_s]
        return float(ms @ self.delta[mask_s] / ms.sum()), float(ma @ self.delta[~mask_s] / ma.sum())

    def bus_mismatch(self, case: NetworkCase, adm: AdmittanceSystem) -> float:
        """Max |active power imbalance| over buses, re-evaluated from the solved voltages."""
        n = case.n_bus
        inj = (self.V * np.conj(adm.Y @ self.V)).real
        bal = inj.copy()
        np.add.at(bal, case.load_bus_rows, self.p_load)
        bal[case.gen_bus_rows] -= self.pe
        return float(np.max(np.abs(bal[:n])))


def _baseline_at(case, adm, op, delta, stage) -> SteadyBaseline:
    net = StageNetwork(case, adm, op)
    E = op.emag * np.exp(1j * delta)
    V, y_eff = net.solve(E)
    pw = element_powers(case, adm, V, E, y_eff)
    phi = np.angle(V)
    ang = element_angles(case, phi, delta)
    # keep branch angle differences on the principal branch
    sb = np.angle(np.exp(1j * ang["branch"]))
    sg = np.angle(np.exp(1j * ang["gen"]))
    return SteadyBaseline(
        stage=stage, delta=np.asarray(delta, dtype=float).copy(), E=E, V=V, pm=op.pm.copy(),
        pe=pw["pe"], p_fwd=pw["p_fwd"], p_rev=pw["p_rev"], p_load=pw["p_load"],
        p_shunt=pw["p_shunt"], load_y=y_eff, sigma_gen=sg, sigma_branch=sb,
        sigma_load=ang["load"], sigma_shunt=phi, op=op,
    )


def solve_steady_state(
    case: NetworkCase,
    adm: AdmittanceSystem,
    op: OperatingPoint | None = None,
    slack: int | None = None,
    tol: float = 1e-10,
) -> SteadyBaseline:
    """Stable equilibrium of the classical-model system on network ``adm``.

    Without ``op`` the network is treated as the pre-fault grid: a Newton power flow is
    solved and extended to the generator internal nodes. With ``op`` (a pre-fault
    operating point) the rotor angles are solved for the fixed |E'| and P_m so that every
    machine's COI-frame acceleration vanishes on ``adm`` (the post-fault topology).
    """
    if op is None:
        op = initialize(case, adm, slack=slack)
        return _baseline_at(case, adm, op, op.delta, adm.stage)

    net = StageNetwork(case, adm, op)
    M = case.inertia
    MT = M.sum()

    def accel(delta):
        E = op.emag * np.exp(1j * delta)
        V, _ = net.solve(E)
        pe = net.gen_power(E, V)
        pcoi = np.sum(op.pm - pe)
        return op.pm - pe - M / MT * pcoi

    def resid(x):
        delta = x
        a = accel(delta)
        return np.concatenate([a[1:], [M @ delta / MT]])

    a0 = accel(op.delta)
    if np.max(np.abs(a0)) < tol:
        return _baseline_at(case, adm, op, op.delta, adm.stage)
    try:
        sol = root(resid, op.delta, method="hybr", tol=1e-13)
    except NetworkSolveDiverged as exc:
        raise NoPostFaultSEP(f"network solve failed while searching for the SEP: {exc}") from None
    if not sol.success or np.max(np.abs(resid(sol.x))) > 1e-8:
        raise NoPostFaultSEP(
            f"no post-fault equilibrium found (residual {np.max(np.abs(resid(sol.x))):.2e})"
        )
    delta = sol.x - M @ sol.x / MT
    if np.max(np.abs(delta - op.delta)) > math.pi:
        raise NoPostFaultSEP("equilibrium found is far from the pre-fault point")
    return _baseline_at(case, adm, op, delta, adm.stage)


# ---------------------------------------------------------------------------
# Reduction to load buses and generator internal nodes
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ReducedNetwork:
    """Network reduced to retained ("load") buses and generator internal nodes.

    ``V_L = Z_LL @ Y_LG @ E_G`` with ``Z_LL = -(diag(Y_L) + Y_LL)^-1``. After
    :func:`partition_blocks`, the S/A masks and the Y_1LL / Y_2LL split are filled in.
    """

    case: NetworkCase
    adm: AdmittanceSystem
    bus_ids: tuple[int, ...]
    Y_LL: np.ndarray
    Y_LG: np.ndarray
    Y_L: np.ndarray
    Z_LL: np.ndarray
    E_steady: np.ndarray | None = None
    side_s: np.ndarray | None = None       # bool per retained bus: True on the S side
    gen_s: np.ndarray | None = None        # bool per generator
    Y_1LL: np.ndarray | None = None
    Y_2LL: np.ndarray | None = None
    cut: object | None = None

    @cached_property
    def row(self) -> dict[int, int]:
        return {b: i for i, b in enumerate(self.bus_ids)}

    @property
    def G_L(self) -> np.ndarray:
        return self.Y_L.real

    def _require_split(self):
        if self.side_s is None:
            raise ValueError("network has not been partitioned; call partition_blocks first")

    def _blk(self, M, rows_s: bool, cols_s: bool | None, cols_gen=False):
        self._require_split()
        r = np.flatnonzero(self.side_s if rows_s else ~self.side_s)
        if cols_gen:
            c = np.flatnonzero(self.gen_s if cols_s else ~self.gen_s)
        else:
            c = np.flatnonzero(self.side_s if cols_s else ~self.side_s)
        return M[np.ix_(r, c)]

    @property
    def Z_SS(self):
        return self._blk(self.Z_LL, True, True)

    @property
    def Z_SA(self):
        return self._blk(self.Z_LL, True, False)

    @property
    def Z_AS(self):
        return self._blk(self.Z_LL, False, True)

    @property
    def Z_AA(self):
        return self._blk(self.Z_LL, False, False)

    @property
    def Y_LGS(self):
        return self._blk(self.Y_LG, True, True, cols_gen=True)

    @property
    def Y_LGA(self):
        return self._blk(self.Y_LG, False, False, cols_gen=True)

    @property
    def G_LS(self) -> np.ndarray:
        self._require_split()
        return self.G_L[self.side_s]

    @property
    def G_LA(self) -> np.ndarray:
        self._require_split()
        return self.G_L[~self.side_s]

    def load_voltages(self, E: np.ndarray) -> np.ndarray:
        return self.Z_LL @ (self.Y_LG @ E)

    def transfer(self) -> np.ndarray:
        """T = Z_LL Y_LG, mapping generator EMFs to retained-bus voltages.

        When partitioned, assembled from the S/A blocks (Y_LG block diagonal by side).
        """
        if self.side_s is None:
            return self.Z_LL @ self.Y_LG
        T = np.zeros_like(self.Y_LG)
        s, a = np.flatnonzero(self.side_s), np.flatnonzero(~self.side_s)
        gs, ga = np.flatnonzero(self.gen_s), np.flatnonzero(~self.gen_s)
        T[np.ix_(s, gs)] = self.Z_SS @ self.Y_LGS
        T[np.ix_(a, gs)] = self.Z_AS @ self.Y_LGS
        T[np.ix_(s, ga)] = self.Z_SA @ self.Y_LGA
        T[np.ix_(a, ga)] = self.Z_AA @ self.Y_LGA
        return T


def kron_reduce(
    adm: AdmittanceSystem,
    case: NetworkCase,
    load_y: np.ndarray,
    keep: Iterable[int] | None = None,
    E_steady: np.ndarray | None = None,
) -> ReducedNetwork:
    """Eliminate every bus not in ``keep`` (default: buses carrying a load or a generator).

    ``load_y`` gives each load's constant admittance (constant-power loads linearized at
    their operating voltage by the caller).
    """
    idx = case.bus_index
    n, m = case.n_bus, len(case.generators)
    if keep is None:
        keep_set = {ld.bus for ld in case.loads} | {g.bus for g in case.generators}
    else:
        keep_set = set(int(k) for k in keep)
        for k in keep_set:
            if k not in idx:
                raise UnknownBus(f"bus {k} not in case")
    kept = [b.id for b in case.buses if b.id in keep_set]
    K = np.array([idx[b] for b in kept], dtype=int)
    R = np.array([i for i in range(n) if case.buses[i].id not in keep_set], dtype=int)

    y_gen = np.array([1.0 / (1j * g.xd_prime) for g in case.generators])
    Ynet = adm.Y.copy()
    Ynet[case.gen_bus_rows, case.gen_bus_rows] += y_gen
    Ybg = np.zeros((n, m), dtype=complex)
    Ybg[case.gen_bus_rows, np.arange(m)] = -y_gen
    yl = np.zeros(n, dtype=complex)
    np.add.at(yl, case.load_bus_rows, np.asarray(load_y, dtype=complex))

    Y_KK = Ynet[np.ix_(K, K)]
    Y_KG = Ybg[K]
    if R.size:
        Y_RR = Ynet[np.ix_(R, R)] + np.diag(yl[R])
        try:
            lu = sla.lu_factor(Y_RR, check_finite=False)
        except (sla.LinAlgError, ValueError):
            raise SingularReduction("eliminated block is singular") from None
        Y_KR = Ynet[np.ix_(K, R)]
        Y_LL = Y_KK - Y_KR @ sla.lu_solve(lu, Ynet[np.ix_(R, K)], check_finite=False)
        Y_LG = Y_KG - Y_KR @ sla.lu_solve(lu, Ybg[R], check_finite=False)
    else:
        Y_LL, Y_LG = Y_KK, Y_KG
    Y_L = yl[K]
    A = np.diag(Y_L) + Y_LL
    if np.linalg.cond(A) > 1e14:
        raise SingularReduction("([Y_L] + Y_LL) is singular")
    Z_LL = -np.linalg.inv(A)
    return ReducedNetwork(case=case, adm=adm, bus_ids=tuple(kept), Y_LL=Y_LL, Y_LG=Y_LG,
                          Y_L=Y_L, Z_LL=Z_LL, E_steady=E_steady)


def partition_blocks(red: ReducedNetwork, part, cut) -> ReducedNetwork:
    """Fill the S/A block structure and split Y_LL into Y_1LL (rest) + Y_2LL (cutset lines)."""
    case = red.case
    if part.case_name != case.name or part.n_bus != case.n_bus:
        raise NotASeparator("partition was built for a different case")
    row = red.row
    side = np.array([part.bus_side[b] == "S" for b in red.bus_ids], dtype=bool)
    gen_s = np.array([gid in part.S for gid in case.gen_ids], dtype=bool)
    Y2 = np.zeros_like(red.Y_LL)
    for bi in cut.branches:
        br = case.branches[bi]
        if br.from_bus not in row or br.to_bus not in row:
            raise NotASeparator(f"cutset line {br.name} has an eliminated endpoint")
        if not red.adm.in_service[bi]:
            raise NotASeparator(f"cutset line {br.name} is out of service")
        f, t = row[br.from_bus], row[br.to_bus]
        yff, yft, ytf, ytt = br.stamp()
        Y2[f, f] += yff
        Y2[f, t] += yft
        Y2[t, f] += ytf
        Y2[t, t] += ytt
    Y1 = red.Y_LL - Y2
    cross = np.abs(Y1[np.ix_(side, ~side)]).max(initial=0.0)
    scale = np.abs(red.Y_LL).max()
    if cross > 1e-9 * scale:
        raise NotASeparator(f"cutset {cut.name or cut.names} leaves S and A coupled")
    # Y_LG must be block diagonal: every generator couples only to its own side
    gl = np.abs(red.Y_LG) > 1e-12 * np.abs(red.Y_LG).max()
    if np.any(gl[np.ix_(side, ~gen_s)]) or np.any(gl[np.ix_(~side, gen_s)]):
        raise NotASeparator("a generator is coupled across the cutset")
    return replace(red, side_s=side, gen_s=gen_s, Y_1LL=Y1, Y_2LL=Y2, cut=cut)
