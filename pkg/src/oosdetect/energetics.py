"""Transient energy along a trajectory: per-element potential energy and two-machine balance.

Branch potential energy uses the two-ended form
``∫(P_kl − P_kl^s) dφ_k + ∫(P_lk − P_lk^s) dφ_l``, which reduces to ``∫(P_kl − P_kl^s) dσ_kl``
for a lossless line and keeps the discrete energy balance exact node by node.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import NoBaseline, PartitionMismatch
from .partition import ClusterPartition, Cutset
from .simcore import Trajectory

OMEGA_EPS = 1e-3


def cumtrapz(y: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Cumulative trapezoid ∫y dx along axis 0, starting at zero."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    inc = 0.5 * (y[1:] + y[:-1]) * (x[1:] - x[:-1])
    out = np.zeros_like(y, dtype=float)
    np.cumsum(inc, axis=0, out=out[1:])
    return out


def lpe_integral(p: np.ndarray, p_s: float | np.ndarray, sigma: np.ndarray, start: int = 0) -> np.ndarray:
    """∫(P − P^s) dσ along a sampled path, zero at sample ``start``."""
    val = cumtrapz(np.asarray(p) - p_s, sigma)
    return val - val[start]


def _start(traj: Trajectory, t0: float | None) -> int:
    if t0 is None:
        return traj.i_clear
    return int(np.clip(np.searchsorted(traj.t, t0 - 0.5 * traj.dt), 0, traj.n - 1))


def element_ids(traj: Trajectory) -> list[str]:
    case = traj.case
    ids = [f"gen:{g}" for g in case.gen_ids]
    ids += [f"branch:{br.name}" for br in case.branches]
    ids += [f"load:{ld.bus}" for ld in case.loads]
    ids += [f"shunt:{b.id}" for b in case.buses if b.gs != 0.0]
    return ids


def element_lpe(traj: Trajectory, element: str, t0: float | None = None) -> np.ndarray:
    """Potential-energy contribution of one element, zero at ``t0`` (default: fault clearing).

    ``element`` is ``gen:<bus>``, ``branch:<from>-<to>``, ``load:<bus>`` or ``shunt:<bus>``.
    """
    base = traj.baseline
    if base is None:
        raise NoBaseline("trajectory has no steady baseline attached")
    k0 = _start(traj, t0)
    kind, _, ref = element.partition(":")
    case = traj.case
    phi = traj.phi
    if kind == "gen":
        i = case.gen_index[int(ref)]
        return lpe_integral(traj.pe[:, i], base.pe[i], traj.sigma["gen"][:, i], k0)
    if kind == "branch":
        j = case.branch_index(ref)
        br = case.branches[j]
        f, t = case.bus_index[br.from_bus], case.bus_index[br.to_bus]
        return (lpe_integral(traj.p_fwd[:, j], base.p_fwd[j], phi[:, f], k0)
                + lpe_integral(traj.p_rev[:, j], base.p_rev[j], phi[:, t], k0))
    if kind == "load":
        bus = int(ref)
        rows = [i for i, ld in enumerate(case.loads) if ld.bus == bus]
        if not rows:
            raise KeyError(f"no load at bus {bus}")
        r = case.bus_index[bus]
        return sum(lpe_integral(traj.p_load[:, i], base.p_load[i], phi[:, r], k0) for i in rows)
    if kind == "shunt":
        r = case.bus_index[int(ref)]
        return lpe_integral(traj.p_shunt[:, r], base.p_shunt[r], phi[:, r], k0)
    raise KeyError(f"unknown element {element!r}")


@dataclass(frozen=True, eq=False)
class EnergyTrace:
    t: np.ndarray
    V_KE: np.ndarray
    V_PE: np.ndarray
    lpe_gen: np.ndarray       # (n, m)
    lpe_branch: np.ndarray    # (n, n_branch)
    lpe_load: np.ndarray      # (n, n_load)
    lpe_shunt: np.ndarray     # (n, n_bus)
    i_start: int

    @property
    def V(self) -> np.ndarray:
        return self.V_KE + self.V_PE

    @property
    def series_lpe(self) -> np.ndarray:
        """Sum of the series elements: network branches plus generator reactances."""
        return self.lpe_branch.sum(axis=1) + self.lpe_gen.sum(axis=1)

    def to_csv(self, path: str | Path, case) -> None:
        cols = ["t", "V_KE", "V_PE"] + [f"lpe_{br.name}" for br in case.branches]
        data = np.column_stack([self.t, self.V_KE, self.V_PE, self.lpe_branch])
        np.savetxt(path, data, delimiter=",", header=",".join(cols), comments="", fmt="%.9g")


def total_energy(traj: Trajectory, t0: float | None = None) -> EnergyTrace:
    """V_KE = ½ΣMω² and V_PE as the sum of every element's potential energy."""
    base = traj.baseline
    if base is None:
        raise NoBaseline("trajectory has no steady baseline attached")
    k0 = _start(traj, t0)
    case = traj.case
    phi = traj.phi
    sig = traj.sigma
    lg = lpe_integral(traj.pe, base.pe, sig["gen"], k0)
    f = np.array([case.bus_index[br.from_bus] for br in case.branches])
    t = np.array([case.bus_index[br.to_bus] for br in case.branches])
    lb = (lpe_integral(traj.p_fwd, base.p_fwd, phi[:, f], k0)
          + lpe_integral(traj.p_rev, base.p_rev, phi[:, t], k0))
    ll = lpe_integral(traj.p_load, base.p_load, phi[:, case.load_bus_rows], k0)
    ls = lpe_integral(traj.p_shunt, base.p_shunt, phi, k0)
    V_KE = 0.5 * (traj.omega**2) @ case.inertia
    V_PE = lg.sum(axis=1) + lb.sum(axis=1) + ll.sum(axis=1) + ls.sum(axis=1)
    return EnergyTrace(t=traj.t, V_KE=V_KE, V_PE=V_PE, lpe_gen=lg, lpe_branch=lb, lpe_load=ll,
                       lpe_shunt=ls, i_start=k0)


def cutset_lpe_share(et: EnergyTrace, cut: Cutset, stop: int | None = None) -> float:
    """Cutset share of the series-element potential energy at the instant that energy peaks."""
    stop = len(et.t) if stop is None else stop
    k0 = et.i_start
    tot = et.series_lpe[k0:stop]
    k = int(np.argmax(tot)) + k0
    return float(et.lpe_branch[k, list(cut.branches)].sum() / et.series_lpe[k])


def relative_kinetic(traj: Trajectory, part: ClusterPartition) -> tuple[np.ndarray, np.ndarray]:
    """ω₂ = ω_S − ω_A (inertia-weighted cluster speeds) and V_KE2 = ½·M_S·M_A/(M_S+M_A)·ω₂²."""
    if not part.S or not part.A:
        raise ValueError("both clusters must be non-empty")
    mask = part.gen_mask(traj.case)
    M = traj.case.inertia
    w_s = traj.omega[:, mask] @ M[mask] / M[mask].sum()
    w_a = traj.omega[:, ~mask] @ M[~mask] / M[~mask].sum()
    w2 = w_s - w_a
    meq = part.M_S * part.M_A / (part.M_S + part.M_A)
    return w2, 0.5 * meq * w2**2


@dataclass(frozen=True, eq=False)
class TwoMachineTrace:
    """Two-machine equivalent series for one partition and cutset (energies zero at ``t[i_start]``)."""

    t: np.ndarray
    omega2: np.ndarray
    delta: np.ndarray
    dP_C: np.ndarray
    dP_L2: np.ndarray
    dP_LS: np.ndarray
    dP_LA: np.ndarray
    dP_loss2: np.ndarray
    dP_Closs: np.ndarray
    V_KE2: np.ndarray
    V_PEC2: np.ndarray
    V_PEL2: np.ndarray
    V_PEloss2: np.ndarray
    M_S: float
    M_A: float
    i_start: int = 0
    cut_name: str = ""

    @property
    def V_PE2(self) -> np.ndarray:
        return self.V_PEC2 + self.V_PEL2 + self.V_PEloss2

    @property
    def balance_residual(self) -> np.ndarray:
        """(V_KE2(t) − V_KE2(t₀)) + V_PE2(t); zero for an exact two-machine energy balance."""
        return self.V_KE2 - self.V_KE2[self.i_start] + self.V_PE2

    @property
    def f(self) -> np.ndarray:
        """Measured ΔP_L2 + ΔP_C."""
        return self.dP_L2 + self.dP_C

    def first_slip_index(self) -> int:
        """Index of the first sample with |δ| ≥ 2π after ``i_start`` (last index if none)."""
        hit = np.flatnonzero(np.abs(self.delta[self.i_start:]) >= 2 * math.pi)
        return int(hit[0]) + self.i_start if hit.size else len(self.t) - 1

    def to_csv(self, path: str | Path) -> None:
        names = ["t", "omega2", "delta", "dP_C", "dP_L2", "dP_LS", "dP_LA", "dP_loss2", "dP_Closs",
                 "V_KE2", "V_PEC2", "V_PEL2", "V_PEloss2"]
        data = np.column_stack([getattr(self, n) for n in names] + [self.V_PE2])
        np.savetxt(path, data, delimiter=",", header=",".join(names + ["V_PE2"]), comments="",
                   fmt="%.9g")


def _check_pair(traj: Trajectory, part: ClusterPartition, cut: Cutset) -> None:
    case = traj.case
    if part.case_name != case.name or part.n_bus != case.n_bus:
        raise PartitionMismatch("partition was built for a different case")
    if set(part.S) | set(part.A) != set(case.gen_ids):
        raise PartitionMismatch("partition does not cover every generator")
    for j, fwd in zip(cut.branches, cut.forward):
        br = case.branches[j]
        a, b = part.bus_side[br.from_bus], part.bus_side[br.to_bus]
        if a == b or (a == "S") != fwd:
            raise PartitionMismatch(f"cutset line {br.name} is not oriented S->A for this partition")


def two_machine_decompose(traj: Trajectory, part: ClusterPartition, cut: Cutset,
                          t0: float | None = None) -> TwoMachineTrace:
    """Relative two-machine energy balance of the S and A clusters across ``cut``."""
    base = traj.baseline
    if base is None:
        raise NoBaseline("trajectory has no steady baseline attached")
    _check_pair(traj, part, cut)
    case = traj.case
    k0 = _start(traj, t0)
    M = case.inertia
    ms, ma = part.M_S, part.M_A
    mt = ms + ma
    gmask = part.gen_mask(case)

    w2, vke2 = relative_kinetic(traj, part)
    ds = traj.delta[:, gmask] @ M[gmask] / ms
    da = traj.delta[:, ~gmask] @ M[~gmask] / ma
    dss, das = base.cluster_angles(M, gmask)
    delta = (ds - dss) - (da - das)

    lmask = part.load_mask(case)
    dpl = traj.p_load - base.p_load
    dP_LS = dpl[:, lmask].sum(axis=1)
    dP_LA = dpl[:, ~lmask].sum(axis=1)

    side = part.branch_side(case)
    loss = (traj.p_fwd + traj.p_rev) - (base.p_fwd + base.p_rev)
    bus_s = np.array([part.bus_side[b.id] == "S" for b in case.buses])
    dsh = traj.p_shunt - base.p_shunt
    loss_s = loss[:, side == "S"].sum(axis=1) + dsh[:, bus_s].sum(axis=1)
    loss_a = loss[:, side == "A"].sum(axis=1) + dsh[:, ~bus_s].sum(axis=1)

    cb = np.array(cut.branches, dtype=int)
    fwd = np.array(cut.forward, dtype=bool)
    p_sa = np.where(fwd, traj.p_fwd[:, cb], traj.p_rev[:, cb])
    p_sa_s = np.where(fwd, base.p_fwd[cb], base.p_rev[cb])
    dP_C = (p_sa - p_sa_s).sum(axis=1)
    dP_Closs = -ms / mt * loss[:, cb].sum(axis=1)

    dP_L2 = (ma * dP_LS - ms * dP_LA) / mt
    dP_loss2 = (ma * loss_s - ms * loss_a) / mt

    def energy(x):
        v = cumtrapz(x * w2, traj.t)
        return v - v[k0]

    return TwoMachineTrace(
        t=traj.t, omega2=w2, delta=delta, dP_C=dP_C, dP_L2=dP_L2, dP_LS=dP_LS, dP_LA=dP_LA,
        dP_loss2=dP_loss2, dP_Closs=dP_Closs, V_KE2=vke2, V_PEC2=energy(dP_C),
        V_PEL2=energy(dP_L2), V_PEloss2=energy(dP_loss2 + dP_Closs), M_S=ms, M_A=ma,
        i_start=k0, cut_name=cut.name,
    )


@dataclass(frozen=True)
class PEBSCrossing:
    t: float
    delta: float
    index: int


def pebs_crossing(tm: TwoMachineTrace, omega_eps: float = OMEGA_EPS) -> PEBSCrossing | None:
    """First post-clearing maximum of V_PE2 reached with |ω₂| > ``omega_eps``."""
    rate = np.gradient(tm.V_PE2, tm.t)
    w = tm.omega2
    for k in range(tm.i_start, len(tm.t) - 1):
        if w[k] * w[k + 1] < 0.0 or min(abs(w[k]), abs(w[k + 1])) <= omega_eps and k > tm.i_start:
            return None  # relative speed reversed: the first swing turned back
        if rate[k] > 0.0 and rate[k + 1] <= 0.0:
            a = rate[k] / (rate[k] - rate[k + 1])
            t = tm.t[k] + a * (tm.t[k + 1] - tm.t[k])
            d = tm.delta[k] + a * (tm.delta[k + 1] - tm.delta[k])
            return PEBSCrossing(t=float(t), delta=float(d), index=k)
    return None
