"""Cosine-form models of the two-machine equivalent and their stability checks.

Each power deviation is modelled as ``P_c + P_max·cos(δ + γ)`` of the composite angle
``δ = (δ_S − δ_S^s) − (δ_A − δ_A^s)``. The analytic path rotates the S-cluster EMFs rigidly on the
reduced post-fault network: for any active-power quantity written as ``Re(Vᵀ W V*)`` with
``V = T_S E_S e^{jδ} + T_A E_A``, the δ-dependent part is ``Re(X e^{jδ})`` where
``X = (T_S E_S)ᵀ (W + Wᴴ) (T_A E_A)*``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np
from scipy.optimize import brentq
from scipy.signal import find_peaks

from .errors import InsufficientSwing, PartitionMismatch
from .netmodel import NetworkCase, ReducedNetwork, SteadyBaseline, AdmittanceSystem, kron_reduce, partition_blocks
from .partition import ClusterPartition, Cutset

L2_PHASE_SPREAD = 0.5


def wrap_angle(x: float) -> float:
    """Principal value in (−π, π]."""
    y = math.remainder(float(x), 2 * math.pi)
    return math.pi if y == -math.pi else y


@dataclass(frozen=True)
class CosineTerm:
    P_c: float
    P_max: float
    gamma: float

    @classmethod
    def from_phasor(cls, X: complex) -> "CosineTerm":
        """Term whose deviation is ``Re(X e^{jδ}) − Re X`` (zero at δ = 0)."""
        return cls(P_c=-float(X.real), P_max=float(abs(X)), gamma=wrap_angle(np.angle(X)))

    @classmethod
    def zero_at_origin(cls, P_max: float, gamma: float) -> "CosineTerm":
        return cls(P_c=-P_max * math.cos(gamma), P_max=P_max, gamma=wrap_angle(gamma))

    def __call__(self, delta):
        return self.P_c + self.P_max * np.cos(np.asarray(delta) + self.gamma)

    def derivative(self, delta):
        return -self.P_max * np.sin(np.asarray(delta) + self.gamma)


@dataclass(frozen=True)
class CosineModel:
    LS: CosineTerm
    LA: CosineTerm
    C: CosineTerm
    L2: CosineTerm
    M_S: float
    M_A: float
    delta_origin: float = 0.0        # steady δ_S^s − δ_A^s
    S: tuple[int, ...] = ()
    A: tuple[int, ...] = ()
    cut_name: str = ""
    source: str = "analytic"
    approximate: bool = True
    flags: tuple[str, ...] = ()

    def f(self, delta):
        return self.L2(delta) + self.C(delta)

    def df(self, delta):
        return self.L2.derivative(delta) + self.C.derivative(delta)

    @property
    def lag(self) -> float:
        """Phase lag of the cutset term behind the load term, γ_L2 − γ_C."""
        return self.L2.gamma - self.C.gamma

    def to_dict(self) -> dict:
        d = asdict(self)
        d["S"], d["A"], d["flags"] = list(self.S), list(self.A), list(self.flags)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CosineModel":
        terms = {k: CosineTerm(**d[k]) for k in ("LS", "LA", "C", "L2")}
        rest = {k: v for k, v in d.items() if k not in terms}
        rest["S"], rest["A"] = tuple(rest.get("S", ())), tuple(rest.get("A", ()))
        rest["flags"] = tuple(rest.get("flags", ()))
        return cls(**terms, **rest)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def compose_l2(LS: CosineTerm, LA: CosineTerm, M_S: float, M_A: float) -> tuple[CosineTerm, bool]:
    """Single-cosine approximation of (M_A·ΔP_LS − M_S·ΔP_LA)/(M_S+M_A).

    Returns the term and whether the two phases are too far apart for the approximation.
    """
    mt = M_S + M_A
    half = 0.5 * (LS.gamma - LA.gamma)
    pmax = (LS.P_max * M_A - LA.P_max * M_S) / mt * math.cos(half)
    gamma = 0.5 * (LS.gamma + LA.gamma)
    spread = abs(LS.gamma - LA.gamma) > L2_PHASE_SPREAD
    return CosineTerm.zero_at_origin(pmax, gamma), spread


# ---------------------------------------------------------------------------
# Analytic path
# ---------------------------------------------------------------------------

def reduce_for_partition(case: NetworkCase, adm: AdmittanceSystem, baseline: SteadyBaseline,
                         part: ClusterPartition, cut: Cutset) -> ReducedNetwork:
    """Reduced post-fault network keeping every bus, partitioned by ``part`` and ``cut``."""
    red = kron_reduce(adm, case, baseline.load_y, keep=[b.id for b in case.buses],
                      E_steady=baseline.E)
    return partition_blocks(red, part, cut)


def _cross_phasor(red: ReducedNetwork, W: np.ndarray) -> complex:
    T = red.transfer()
    E = red.E_steady
    a = T[:, red.gen_s] @ E[red.gen_s]
    b = T[:, ~red.gen_s] @ E[~red.gen_s]
    return complex(a @ (W + W.conj().T) @ b.conj())


def _load_weight(red: ReducedNetwork, mask: np.ndarray) -> np.ndarray:
    return np.diag(np.where(mask, red.G_L, 0.0)).astype(complex)


def _cut_weight(red: ReducedNetwork, cut: Cutset) -> np.ndarray:
    case = red.case
    W = np.zeros((len(red.bus_ids),) * 2, dtype=complex)
    for j, fwd in zip(cut.branches, cut.forward):
        br = case.branches[j]
        yff, yft, ytf, ytt = br.stamp()
        f, t = red.row[br.from_bus], red.row[br.to_bus]
        if fwd:
            W[f, f] += np.conj(yff)
            W[f, t] += np.conj(yft)
        else:
            W[t, t] += np.conj(ytt)
            W[t, f] += np.conj(ytf)
    return W


def load_term(red: ReducedNetwork, buses: Iterable[int] | None = None, side: str = "S") -> CosineTerm:
    """Cosine model of the load-power deviation over ``buses`` (default: every load on ``side``)."""
    side_mask = red.side_s if side == "S" else ~red.side_s
    if buses is None:
        mask = side_mask
    else:
        sel = {int(b) for b in buses}
        mask = np.array([b in sel for b in red.bus_ids]) & side_mask
    return CosineTerm.from_phasor(_cross_phasor(red, _load_weight(red, mask)))


def fit_cosine_analytic(red: ReducedNetwork, part: ClusterPartition, cut: Cutset) -> CosineModel:
    """Model constants from the reduced network with the S cluster rotated rigidly."""
    if red.side_s is None or red.cut is not cut:
        red = partition_blocks(red, part, cut)
    if red.E_steady is None:
        raise ValueError("reduced network carries no steady EMFs")
    LS = load_term(red, side="S")
    LA = load_term(red, side="A")
    C = CosineTerm.from_phasor(_cross_phasor(red, _cut_weight(red, cut)))
    L2, spread = compose_l2(LS, LA, part.M_S, part.M_A)
    flags = []
    if spread:
        flags.append("l2-phase-spread")
    for name, term in (("LS", LS), ("LA", LA), ("C", C)):
        if term.P_max == 0.0:
            flags.append(f"{name}-zero-amplitude")
    case = red.case
    E = red.E_steady
    M = case.inertia
    gmask = part.gen_mask(case)
    d = np.angle(E)
    origin = float(M[gmask] @ d[gmask] / part.M_S - M[~gmask] @ d[~gmask] / part.M_A)
    return CosineModel(LS=LS, LA=LA, C=C, L2=L2, M_S=part.M_S, M_A=part.M_A, delta_origin=origin,
                       S=tuple(sorted(part.S)), A=tuple(sorted(part.A)), cut_name=cut.name,
                       source="analytic", approximate=True, flags=tuple(flags))


# ---------------------------------------------------------------------------
# Empirical path
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExtremumFit:
    term: CosineTerm
    delta_min: float
    lsq_gamma: float
    lsq_pmax: float


def _refine(x: np.ndarray, y: np.ndarray, k: int) -> tuple[float, float]:
    """Vertex of the parabola through three samples around index ``k``."""
    if k <= 0 or k >= len(x) - 1:
        return float(x[k]), float(y[k])
    c = np.polyfit(x[k - 1:k + 2], y[k - 1:k + 2], 2)
    if c[0] <= 0 or not np.isfinite(c).all():
        return float(x[k]), float(y[k])
    xv = -c[1] / (2 * c[0])
    if not (min(x[k - 1], x[k + 1]) <= xv <= max(x[k - 1], x[k + 1])):
        return float(x[k]), float(y[k])
    return float(xv), float(np.polyval(c, xv))


def fit_extremum(delta: np.ndarray, y: np.ndarray, prominence: float = 0.05) -> ExtremumFit:
    """Cosine constants from the first minimum of ``y`` along the swing ``delta``.

    γ = π − δ_min. The amplitude is half the peak-to-trough swing when a maximum precedes the
    minimum, otherwise it follows from the first sample and the minimum.
    """
    delta = np.asarray(delta, dtype=float)
    y = np.asarray(y, dtype=float)
    span = float(np.ptp(y)) if y.size else 0.0
    if y.size < 3 or span == 0.0:
        raise InsufficientSwing("series is too short or flat")
    mins, _ = find_peaks(-y, prominence=prominence * span)
    if not mins.size:
        raise InsufficientSwing("series never reaches a minimum within the window")
    k = int(mins[0])
    d_min, y_min = _refine(delta, y, k)
    gamma = wrap_angle(math.pi - d_min)
    maxs, _ = find_peaks(y[:k], prominence=prominence * span)
    if maxs.size:
        j = int(maxs[-1])
        _, y_max = _refine(delta, -y, j)
        pmax = 0.5 * (-y_max - y_min)
    else:
        denom = math.cos(delta[0] + gamma) + 1.0
        pmax = (y[0] - y_min) / denom if denom > 1e-9 else 0.5 * span
    # least-squares cross-check on [1, cos δ, sin δ] up to the minimum
    stop = min(len(y), k + 1 + max(3, k // 4))
    A = np.column_stack([np.ones(stop), np.cos(delta[:stop]), np.sin(delta[:stop])])
    coef, *_ = np.linalg.lstsq(A, y[:stop], rcond=None)
    lsq_gamma = wrap_angle(math.atan2(-coef[2], coef[1]))
    return ExtremumFit(term=CosineTerm.zero_at_origin(float(pmax), gamma), delta_min=d_min,
                       lsq_gamma=lsq_gamma, lsq_pmax=float(math.hypot(coef[1], coef[2])))


def fit_cosine_empirical(tm, stop: int | None = None, prominence: float = 0.05) -> CosineModel:
    """Constants of ΔP_L2 and ΔP_C read off the first swing of a two-machine trace."""
    k0 = tm.i_start
    stop = tm.first_slip_index() + 1 if stop is None else stop
    d = tm.delta[k0:stop]
    fits = {}
    for name, series in (("LS", tm.dP_LS), ("LA", tm.dP_LA), ("L2", tm.dP_L2), ("C", tm.dP_C)):
        try:
            fits[name] = fit_extremum(d, series[k0:stop], prominence)
        except InsufficientSwing:
            if name in ("L2", "C"):
                raise
            fits[name] = None
    flags = []
    for name in ("L2", "C"):
        f = fits[name]
        if abs(wrap_angle(f.lsq_gamma - f.term.gamma)) > 0.2:
            flags.append(f"{name}-lsq-disagrees")
    zero = CosineTerm(0.0, 0.0, 0.0)
    return CosineModel(
        LS=fits["LS"].term if fits["LS"] else zero, LA=fits["LA"].term if fits["LA"] else zero,
        C=fits["C"].term, L2=fits["L2"].term, M_S=tm.M_S, M_A=tm.M_A, cut_name=tm.cut_name,
        source="empirical", approximate=False, flags=tuple(flags),
    )


def extremum_locations(tm, stop: int | None = None) -> dict[str, float]:
    """δ of the first minimum of ΔP_L2 and ΔP_C."""
    k0 = tm.i_start
    stop = tm.first_slip_index() + 1 if stop is None else stop
    d = tm.delta[k0:stop]
    return {n: fit_extremum(d, s[k0:stop]).delta_min for n, s in (("L2", tm.dP_L2), ("C", tm.dP_C))}


# ---------------------------------------------------------------------------
# Checks on the composite f(δ)
# ---------------------------------------------------------------------------

def evaluate_f(model: CosineModel, delta):
    """ΔP_L2(δ) + ΔP_C(δ)."""
    return model.f(delta)


@dataclass(frozen=True)
class Proposition1Result:
    holds: bool
    failed: tuple[str, ...]
    interval: tuple[float, float] | None
    root: float | None
    df0: float
    note: str = ""


def proposition1_check(model: CosineModel, scan_points: int = 2001) -> Proposition1Result:
    """Sufficient conditions for a zero of f in (0, −2γ_C), with a bracketing certificate."""
    gc, gl = model.C.gamma, model.L2.gamma
    df0 = float(model.df(0.0))
    failed = []
    note = ""
    if not (-math.pi + abs(gl) < gc < 0.0):
        failed.append("condition-gamma_C-failed")
        if abs(gl) < gc < math.pi:
            note = "gamma_C lies in the alternative interval (|gamma_L2|, pi), which is not supported"
    if not df0 > 0.0:
        failed.append("condition-df0-failed")
    if not model.L2.P_max > 0.0:
        failed.append("condition-PL2max-failed")
    if failed:
        return Proposition1Result(False, tuple(failed), None, None, df0, note)
    hi = -2.0 * gc
    grid = np.linspace(0.0, hi, scan_points)[1:]
    vals = model.f(grid)
    idx = np.flatnonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) <= 0)
    if vals[-1] == 0.0:
        return Proposition1Result(True, (), (float(grid[-2]), hi), hi, df0)
    if not idx.size:
        return Proposition1Result(False, ("no-sign-change",), None, None, df0)
    k = int(idx[0])
    a, b = float(grid[k]), float(grid[k + 1])
    r = brentq(model.f, a, b, xtol=1e-14) if vals[k] != 0.0 else a
    return Proposition1Result(True, (), (a, b), float(r), df0)


@dataclass(frozen=True)
class StabilityEigenResult:
    lam: tuple[complex, complex]
    df0: float
    verdict: str
    lam_scaled: tuple[complex, complex]


def sep_eigen(model: CosineModel, tol: float = 1e-12) -> StabilityEigenResult:
    """Eigenvalues ±√(−f′(0)) of the linearized two-machine swing.

    ``lam_scaled`` additionally divides by the equivalent inertia M_S·M_A/(M_S+M_A), giving rates
    in 1/s.
    """
    df0 = float(model.df(0.0))
    lam = complex(np.sqrt(complex(-df0)))
    meq = model.M_S * model.M_A / (model.M_S + model.M_A)
    ls = complex(np.sqrt(complex(-df0 / meq)))
    if abs(df0) <= tol:
        verdict = "critical"
    elif df0 > 0:
        verdict = "stable-oscillatory"
    else:
        verdict = "unstable"
    return StabilityEigenResult(lam=(lam, -lam), df0=df0, verdict=verdict, lam_scaled=(ls, -ls))


@dataclass(frozen=True)
class CutsetShiftReport:
    max_abs_diff: float
    peak_f: float
    relative: float
    shift: np.ndarray = field(repr=False)
    grid: np.ndarray = field(repr=False)


def cutset_shift(model_c: CosineModel, model_c2: CosineModel, grid: np.ndarray | None = None) -> CutsetShiftReport:
    """Compare f(δ) of two cutsets sharing one partition.

    ``shift`` is the implied intermediate load-power deviation ΔP_L2′ − ΔP_L2 on ``grid``.
    """
    if (set(model_c.S), set(model_c.A)) != (set(model_c2.S), set(model_c2.A)):
        raise PartitionMismatch("models come from different generator groupings")
    grid = np.linspace(0.0, 2 * math.pi, 721) if grid is None else np.asarray(grid)
    f1, f2 = model_c.f(grid), model_c2.f(grid)
    diff = float(np.max(np.abs(f1 - f2)))
    peak = float(max(np.max(np.abs(f1)), np.max(np.abs(f2))))
    return CutsetShiftReport(max_abs_diff=diff, peak_f=peak, relative=diff / peak if peak else 0.0,
                             shift=model_c2.L2(grid) - model_c.L2(grid), grid=grid)
