"""Out-of-step detectors over simulated trajectories and their collation into a report.

All detectors only look at the first swing after fault clearing: the window ends when the
relative speed of the two clusters (or, for line-level detectors without a partition, the
cutset angle rate) reverses sign.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .energetics import TwoMachineTrace, pebs_crossing, two_machine_decompose
from .errors import InvalidCompensation, InsufficientSwing, NotASeparator, PartitionMismatch
from .netmodel import ReducedNetwork, kron_reduce, partition_blocks
from .partition import ClusterPartition, Cutset, make_partition, require_same_partition
from .simcore import Trajectory
from .twomach import (
    CosineModel,
    fit_cosine_analytic,
    fit_cosine_empirical,
    load_term,
    proposition1_check,
    sep_eigen,
)

DETECTORS = ("eq6-first-max", "eq7-threshold", "eq15-combined", "cutset-only", "strategyA-compensated")


@dataclass(frozen=True)
class DetectorConfig:
    sigma_min: float = math.pi / 2
    deriv_tol: float = 1e-6
    zero_tol: float = 0.0
    monitored_loads: tuple[int, ...] = ()
    compensation_source: str = "analytic"      # or "configured"
    alpha: float | None = None                 # used when compensation_source == "configured"
    alpha_rule: str = "min"                    # "min" per the stated rule, "max" reproduces the C4 example
    allow_invalid_compensation: bool = False
    monotone_fraction: float = 0.9

    def __post_init__(self):
        if not self.sigma_min > 0:
            raise ValueError("sigma_min must be positive")
        if self.alpha_rule not in ("min", "max"):
            raise ValueError("alpha_rule must be 'min' or 'max'")
        if self.compensation_source not in ("analytic", "configured"):
            raise ValueError("compensation_source must be 'analytic' or 'configured'")


@dataclass(frozen=True)
class DetectionEvent:
    detector: str
    t: float
    delta: float
    cut: str = ""
    t_bk: dict[str, float] = field(default_factory=dict)
    snapshot: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"detector": self.detector, "t": self.t, "delta": self.delta, "cut": self.cut,
                "t_bk": dict(self.t_bk), "snapshot": dict(self.snapshot)}


@dataclass(frozen=True)
class LoadCompensation:
    alpha: float
    alpha1: float
    alpha2: float
    P_c_N: float
    P_max_N: float
    gamma_N: float
    gamma_LS: float
    valid: bool
    rule: str = "min"
    buses: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["buses"] = list(self.buses)
        return d


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def centered_rate(y: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Three-point centered difference (one-sided at the ends)."""
    return np.gradient(np.asarray(y, dtype=float), np.asarray(t, dtype=float), axis=0)


def first_swing_end(rate: np.ndarray, start: int) -> int:
    """Last index of the first swing: just before ``rate`` reverses its initial sign."""
    n = len(rate)
    k = start
    while k < n and rate[k] == 0.0:
        k += 1
    if k >= n:
        return n - 1
    s = np.sign(rate[k])
    rev = np.flatnonzero(np.sign(rate[k:]) == -s)
    return int(rev[0]) + k - 1 if rev.size else n - 1


def _interp(t: np.ndarray, y: np.ndarray, k: int, a: float) -> float:
    return float(y[k] + a * (y[k + 1] - y[k]))


def falling_zero(g: np.ndarray, t: np.ndarray, speed: np.ndarray, start: int, stop: int,
                 tol: float = 1e-6, zero_tol: float = 0.0) -> tuple[int, float] | None:
    """First crossing of ``g`` through zero in [start, stop] with (dg/dt)·speed < −tol.

    Returns the sample index before the crossing and the interpolation fraction.
    """
    g = np.asarray(g, dtype=float) - zero_tol
    rate = centered_rate(g, t)
    stop = min(stop, len(g) - 1)
    for k in range(start, stop):
        a, b = g[k], g[k + 1]
        if a == 0.0 or a * b < 0.0:
            frac = 0.0 if a == 0.0 else a / (a - b)
            r = rate[k] + frac * (rate[k + 1] - rate[k])
            w = speed[k] + frac * (speed[k + 1] - speed[k])
            if r * w < -tol:
                return k, float(frac)
    return None


def _cut_series(traj: Trajectory, cut: Cutset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """S->A oriented power, its steady value and angle difference of every cutset line."""
    base = traj.baseline
    cb = np.array(cut.branches, dtype=int)
    fwd = np.array(cut.forward, dtype=bool)
    p = np.where(fwd, traj.p_fwd[:, cb], traj.p_rev[:, cb])
    ps = np.where(fwd, base.p_fwd[cb], base.p_rev[cb])
    sig = traj.sigma["branch"][:, cb]
    sig = np.where(fwd, sig, -sig)
    return p, ps, sig


def _window(traj: Trajectory, cut: Cutset, part: ClusterPartition | None) -> tuple[int, int, np.ndarray]:
    if part is not None:
        mask = part.gen_mask(traj.case)
        M = traj.case.inertia
        speed = (traj.omega[:, mask] @ M[mask] / M[mask].sum()
                 - traj.omega[:, ~mask] @ M[~mask] / M[~mask].sum())
    else:
        _, _, sig = _cut_series(traj, cut)
        speed = centered_rate(sig.mean(axis=1), traj.t)
    k0 = traj.i_clear
    return k0, first_swing_end(speed, k0 + 1), speed


def _delta_composite(traj: Trajectory, part: ClusterPartition | None, k: int, frac: float) -> float:
    if part is None:
        return float("nan")
    mask = part.gen_mask(traj.case)
    M = traj.case.inertia
    base = traj.baseline
    dss, das = base.cluster_angles(M, mask)

    def at(i):
        d = traj.delta[i]
        return (M[mask] @ d[mask] / part.M_S - dss) - (M[~mask] @ d[~mask] / part.M_A - das)

    j = min(k + 1, traj.n - 1)
    return float(at(k) + frac * (at(j) - at(k)))


# ---------------------------------------------------------------------------
# line-level detectors
# ---------------------------------------------------------------------------

def detect_eq6(traj: Trajectory, cut: Cutset, part: ClusterPartition | None = None,
               cfg: DetectorConfig | None = None) -> DetectionEvent | None:
    """Every cutset line's potential energy reaches a maximum: P_k − P_k^s falls through zero
    while its angle difference is still opening. Event time is the latest line's t_bk."""
    cfg = cfg or DetectorConfig()
    p, ps, sig = _cut_series(traj, cut)
    k0, k1, _ = _window(traj, cut, part)
    sig_rate = centered_rate(sig, traj.t)
    t_bk = {}
    last = None
    for i, name in enumerate(cut.names):
        g = p[:, i] - ps[i]
        hit = None
        for k in range(k0, k1):
            a, b = g[k], g[k + 1]
            if a > 0.0 and b <= 0.0:
                frac = a / (a - b)
                sr = sig_rate[k, i] + frac * (sig_rate[k + 1, i] - sig_rate[k, i])
                pr = (b - a) / (traj.t[k + 1] - traj.t[k])
                if sr > cfg.deriv_tol and abs(pr) > cfg.deriv_tol:
                    hit = (k, frac)
                    break
        if hit is None:
            return None
        k, frac = hit
        t_bk[name] = _interp(traj.t, traj.t, k, frac)
        if last is None or t_bk[name] > last[0]:
            last = (t_bk[name], k, frac)
    t, k, frac = last
    return DetectionEvent("eq6-first-max", t, _delta_composite(traj, part, k, frac), cut.name, t_bk)


def detect_eq7(traj: Trajectory, cut: Cutset, cfg: DetectorConfig | None = None,
               part: ClusterPartition | None = None) -> DetectionEvent | None:
    """All cutset lines simultaneously carry less than their steady power, exceed ``sigma_min``
    and keep a non-vanishing angle rate over the trailing part of the interval."""
    cfg = cfg or DetectorConfig()
    p, ps, sig = _cut_series(traj, cut)
    k0, k1, _ = _window(traj, cut, part)
    moving = np.abs(centered_rate(sig, traj.t)) > cfg.deriv_tol
    ok = np.all((p - ps <= 0.0) & (sig > cfg.sigma_min), axis=1)
    # running count of samples where some line stalls
    stall = np.cumsum(~np.all(moving, axis=1))
    for k in range(k0, k1 + 1):
        if not ok[k]:
            continue
        lo = k0 + int(math.floor((1.0 - cfg.monotone_fraction) * (k - k0)))
        stalled = stall[k] - (stall[lo - 1] if lo > 0 else 0)
        if stalled == 0:
            return DetectionEvent("eq7-threshold", float(traj.t[k]), _delta_composite(traj, part, k, 0.0),
                                  cut.name)
    return None


# ---------------------------------------------------------------------------
# two-machine detectors
# ---------------------------------------------------------------------------

def _tm_window(tm: TwoMachineTrace) -> tuple[int, int]:
    k0 = tm.i_start
    return k0, first_swing_end(tm.omega2, k0 + 1)


def _tm_event(tag: str, tm: TwoMachineTrace, g: np.ndarray, cfg: DetectorConfig,
              extra: dict[str, float] | None = None) -> DetectionEvent | None:
    k0, k1 = _tm_window(tm)
    hit = falling_zero(g, tm.t, tm.omega2, k0, k1, cfg.deriv_tol, cfg.zero_tol)
    if hit is None:
        return None
    k, a = hit
    snap = {"dP_C": _interp(tm.t, tm.dP_C, k, a), "dP_L2": _interp(tm.t, tm.dP_L2, k, a)}
    snap.update(extra or {})
    return DetectionEvent(tag, _interp(tm.t, tm.t, k, a), _interp(tm.t, tm.delta, k, a),
                          tm.cut_name, {}, snap)


def detect_eq15(tm: TwoMachineTrace, cfg: DetectorConfig | None = None) -> DetectionEvent | None:
    """ΔP_L2 + ΔP_C falls through zero while the clusters still separate."""
    return _tm_event("eq15-combined", tm, tm.dP_L2 + tm.dP_C, cfg or DetectorConfig())


def detect_cutset_only(tm: TwoMachineTrace, cfg: DetectorConfig | None = None) -> DetectionEvent | None:
    """ΔP_C alone falls through zero while the clusters still separate."""
    return _tm_event("cutset-only", tm, tm.dP_C, cfg or DetectorConfig())


def compute_compensation(red: ReducedNetwork, part: ClusterPartition, cut: Cutset,
                         N: Iterable[int], rule: str = "min") -> LoadCompensation:
    """Scale factor relating the load deviation of monitored S-side buses ``N`` to the whole S side."""
    N = tuple(sorted({int(b) for b in N}))
    if not N:
        raise InvalidCompensation("monitored load set is empty")
    load_buses = {ld.bus for ld in red.case.loads}
    for b in N:
        if b not in load_buses:
            raise InvalidCompensation(f"bus {b} carries no load")
        if part.bus_side.get(b) != "S":
            raise InvalidCompensation(f"monitored bus {b} is not on the leading side")
    if red.side_s is None or red.cut is not cut:
        red = partition_blocks(red, part, cut)
    LS = load_term(red, side="S")
    LN = load_term(red, N, side="S")
    if LN.P_c == 0.0 or LN.P_max == 0.0:
        raise InvalidCompensation("monitored loads have no coupling to the cluster swing")
    a1 = LS.P_c / LN.P_c
    a2 = LS.P_max / LN.P_max
    alpha = min(a1, a2) if rule == "min" else max(a1, a2)
    valid = abs(LN.gamma - LS.gamma) <= 0.1 and alpha > 0
    return LoadCompensation(alpha=alpha, alpha1=a1, alpha2=a2, P_c_N=LN.P_c, P_max_N=LN.P_max,
                            gamma_N=LN.gamma, gamma_LS=LS.gamma, valid=bool(valid), rule=rule,
                            buses=N)


def estimated_load_term(traj: Trajectory, part: ClusterPartition, N: Sequence[int], alpha: float) -> np.ndarray:
    """α·M_A/(M_A+M_S)·Σ_{i∈N}(P_Li − P_Li^s)."""
    sel = np.array([ld.bus in set(N) for ld in traj.case.loads], dtype=bool)
    dp = (traj.p_load[:, sel] - traj.baseline.p_load[sel]).sum(axis=1)
    return alpha * part.M_A / (part.M_A + part.M_S) * dp


def detect_strategyA(traj: Trajectory, part: ClusterPartition, cut: Cutset, comp: LoadCompensation,
                     cfg: DetectorConfig | None = None, tm: TwoMachineTrace | None = None) -> DetectionEvent | None:
    """ΔP_C plus the scaled monitored-load deviation falls through zero."""
    cfg = cfg or DetectorConfig()
    if not comp.valid and not cfg.allow_invalid_compensation:
        raise InvalidCompensation(
            f"monitored-load phase {comp.gamma_N:.4f} differs from the side phase {comp.gamma_LS:.4f}")
    alpha = cfg.alpha if cfg.compensation_source == "configured" and cfg.alpha is not None else comp.alpha
    tm = tm if tm is not None else two_machine_decompose(traj, part, cut)
    est = estimated_load_term(traj, part, comp.buses, alpha)
    return _tm_event("strategyA-compensated", tm, tm.dP_C + est, cfg, {"alpha": alpha})


# ---------------------------------------------------------------------------
# cutset ranking and suite
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RankEntry:
    name: str
    P_L2max: float
    n_lines: int
    rank: int


def rank_cutsets(candidates: Sequence[tuple[ClusterPartition, Cutset]], red: ReducedNetwork) -> list[RankEntry]:
    """Order candidate cutsets by predicted detection earliness (smallest analytic P_L2max first)."""
    require_same_partition(p for p, _ in candidates)
    rows = []
    for part, cut in candidates:
        m = fit_cosine_analytic(partition_blocks(red, part, cut), part, cut)
        rows.append((m.L2.P_max, len(cut), cut.name))
    rows.sort(key=lambda r: (r[0], r[1]))
    return [RankEntry(name=n, P_L2max=float(p), n_lines=k, rank=i + 1) for i, (p, k, n) in enumerate(rows)]


@dataclass(frozen=True)
class CutsetConfig:
    name: str
    lines: tuple[str, ...]
    leading: tuple[int, ...]
    monitored_loads: tuple[int, ...] = ()

    @classmethod
    def from_dict(cls, d: dict) -> "CutsetConfig":
        return cls(name=str(d["name"]), lines=tuple(d["lines"]), leading=tuple(int(g) for g in d["leading"]),
                   monitored_loads=tuple(int(b) for b in d.get("monitored_loads", ())))


@dataclass
class DetectionReport:
    scenario: str
    verdict: str
    events: list[DetectionEvent]
    models: dict[str, dict]
    propositions: dict[str, dict]
    eigen: dict[str, dict]
    compensation: dict[str, dict]
    ranking: list[dict]
    config: dict
    pebs: dict[str, dict | None]
    notes: list[str] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return {"stable within horizon": 0, "unstable detected": 2}.get(self.verdict, 3)

    def first(self, detector: str, cut: str) -> DetectionEvent | None:
        for e in self.events:
            if e.detector == detector and e.cut == cut:
                return e
        return None

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario, "verdict": self.verdict,
            "events": [e.to_dict() for e in self.events], "models": self.models,
            "proposition1": self.propositions, "eigen": self.eigen,
            "compensation": self.compensation, "ranking": self.ranking, "config": self.config,
            "pebs": self.pebs, "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return dumps_report(self.to_dict())


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer, int)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        v = float(x)
        if not math.isfinite(v):
            return None
        return float(f"{v:.12g}")
    if isinstance(x, complex):
        return {"re": _clean(x.real), "im": _clean(x.imag)}
    return x


def dumps_report(d: dict) -> str:
    """Canonical JSON: sorted keys, floats rounded to 12 significant digits."""
    return json.dumps(_clean(d), sort_keys=True, indent=1, ensure_ascii=False) + "\n"


def _model_summary(m: CosineModel) -> dict:
    d = m.to_dict()
    d["gamma_C_deg"] = math.degrees(m.C.gamma)
    d["gamma_L2_deg"] = math.degrees(m.L2.gamma)
    d["lag"] = m.lag
    return d


def _is_stable(traj: Trajectory) -> bool:
    spread = traj.delta.max(axis=1) - traj.delta.min(axis=1)
    return traj.status == "complete" and float(spread.max()) < math.pi


def run_suite(traj: Trajectory, cutsets: Sequence[CutsetConfig], cfg: DetectorConfig | None = None) -> DetectionReport:
    """Run every detector on every configured cutset and collate the results."""
    cfg = cfg or DetectorConfig()
    case = traj.case
    events: list[DetectionEvent] = []
    models, props, eig, comps, pebs = {}, {}, {}, {}, {}
    notes: list[str] = []
    red = kron_reduce(traj.adm_by_stage["post"], case, traj.baseline.load_y,
                      keep=[b.id for b in case.buses], E_steady=traj.baseline.E)
    pairs = []
    for cc in cutsets:
        part, cut = make_partition(case, cc.leading, cc.lines, cc.name)
        pairs.append((part, cut))
        rp = partition_blocks(red, part, cut)
        tm = two_machine_decompose(traj, part, cut)
        model = fit_cosine_analytic(rp, part, cut)
        entry = {"analytic": _model_summary(model)}
        try:
            entry["empirical"] = _model_summary(fit_cosine_empirical(tm))
        except InsufficientSwing as exc:
            entry["empirical"] = None
            notes.append(f"{cc.name}: empirical fit unavailable ({exc})")
        models[cc.name] = entry
        pr = proposition1_check(model)
        props[cc.name] = {"holds": pr.holds, "failed": list(pr.failed), "interval": pr.interval,
                          "root": pr.root, "df0": pr.df0, "note": pr.note}
        ev = sep_eigen(model)
        eig[cc.name] = {"lambda": [ev.lam[0], ev.lam[1]], "lambda_scaled": [ev.lam_scaled[0], ev.lam_scaled[1]],
                        "df0": ev.df0, "verdict": ev.verdict}
        pc = pebs_crossing(tm)
        pebs[cc.name] = None if pc is None else {"t": pc.t, "delta": pc.delta}

        found = [detect_eq6(traj, cut, part, cfg), detect_eq7(traj, cut, cfg, part),
                 detect_eq15(tm, cfg), detect_cutset_only(tm, cfg)]
        N = cc.monitored_loads or cfg.monitored_loads
        if N:
            try:
                comp = compute_compensation(rp, part, cut, N, cfg.alpha_rule)
                comps[cc.name] = comp.to_dict()
                found.append(detect_strategyA(traj, part, cut, comp, cfg, tm))
            except InvalidCompensation as exc:
                notes.append(f"{cc.name}: strategy A skipped ({exc})")
        events.extend(e for e in found if e is not None)

    ranking = []
    groups: dict[tuple, list] = {}
    for part, cut in pairs:
        groups.setdefault((part.S, part.A), []).append((part, cut))
    for grp in groups.values():
        ranking.extend(asdict(r) for r in rank_cutsets(grp, red))

    events.sort(key=lambda e: (e.t, e.detector, e.cut))
    if events:
        verdict = "unstable detected"
    elif _is_stable(traj):
        verdict = "stable within horizon"
    else:
        verdict = "inconclusive"
    return DetectionReport(
        scenario=traj.scenario.name, verdict=verdict, events=events, models=models,
        propositions=props, eigen=eig, compensation=comps, ranking=ranking,
        config={**asdict(cfg), "cutsets": [asdict(c) for c in cutsets]}, pebs=pebs, notes=notes,
    )
