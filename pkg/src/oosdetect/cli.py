"""Command-line front end: simulate, detect, analyze and report."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .detect import (
    CutsetConfig,
    DetectionReport,
    DetectorConfig,
    dumps_report,
    rank_cutsets,
    run_suite,
)
from .energetics import cutset_lpe_share, total_energy, two_machine_decompose
from .errors import CaseError, OOSError
from .netmodel import NetworkCase, bundled_case_path, dumps_case, kron_reduce, load_case, partition_blocks
from .partition import make_partition
from .simcore import Scenario, Trajectory, prepare, rebuild, simulate
from .twomach import fit_cosine_analytic, proposition1_check, sep_eigen

log = logging.getLogger("oosdetect")

FIGURES = ("fdelta", "energy", "lpe_share")
EXIT_ERROR = 1


class ManifestError(OOSError, ValueError):
    """Manifest references something that does not exist or does not resolve."""


class CaseHashMismatch(OOSError):
    """Trajectory was produced from a different case than the manifest names."""


def case_hash(case: NetworkCase) -> str:
    return hashlib.sha256(dumps_case(case).encode("utf-8")).hexdigest()


def _resolve_case(ref: str, base: Path) -> str:
    p = Path(ref)
    if not p.is_absolute() and (base / p).exists():
        return str(base / p)
    if p.exists():
        return str(p)
    if p.suffix == "" and bundled_case_path(ref).exists():
        return ref
    if p.suffix == ".json" and bundled_case_path(p.stem).exists():
        return p.stem
    raise ManifestError(f"case {ref!r} not found")


def _resolve_file(ref: str, base: Path, bundled_dir: str) -> Path:
    p = Path(ref)
    for cand in (p if p.is_absolute() else base / p, p):
        if cand.exists():
            return cand
    from importlib import resources

    packaged = Path(str(resources.files("oosdetect") / bundled_dir / p.name))
    if packaged.exists():
        return packaged
    raise ManifestError(f"{bundled_dir[:-1]} file {ref!r} not found")


@dataclass(frozen=True)
class RunManifest:
    case: str
    scenario: Scenario | None
    cutsets: tuple[CutsetConfig, ...] = ()
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    out: Path = Path("out")
    seed: int = 0
    figures: tuple[str, ...] = FIGURES

    @classmethod
    def from_dict(cls, d: dict, base: Path = Path(".")) -> "RunManifest":
        case = _resolve_case(str(d.get("case", "ieee39")), base)
        scn = None
        if d.get("scenario") is not None:
            sref = d["scenario"]
            if isinstance(sref, dict):
                sd = dict(sref)
            else:
                spath = _resolve_file(str(sref), base, "scenarios")
                sd = json.loads(spath.read_text(encoding="utf-8"))
            sd["case"] = case
            scn = Scenario.from_dict(sd)
        det = dict(d.get("detector", {}))
        if "monitored_loads" in det:
            det["monitored_loads"] = tuple(int(b) for b in det["monitored_loads"])
        figs = tuple(d.get("figures", FIGURES))
        unknown = sorted(set(figs) - set(FIGURES))
        if unknown:
            raise ManifestError(f"unknown figure names {unknown}; known: {list(FIGURES)}")
        m = cls(
            case=case,
            scenario=scn,
            cutsets=tuple(CutsetConfig.from_dict(c) for c in d.get("cutsets", ())),
            detector=DetectorConfig(**det),
            out=Path(d.get("out", "out")),
            seed=int(d.get("seed", 0)),
            figures=figs,
        )
        m.validate()
        return m

    @classmethod
    def from_file(cls, path: str | Path) -> "RunManifest":
        p = _resolve_file(str(path), Path("."), "scenarios")
        return cls.from_dict(json.loads(p.read_text(encoding="utf-8")), p.parent)

    def load_case(self) -> NetworkCase:
        return load_case(self.case)

    def validate(self) -> None:
        """Named cutsets must resolve against the case (and separate it)."""
        try:
            case = self.load_case()
        except (OSError, CaseError) as exc:
            raise ManifestError(f"case {self.case!r}: {exc}") from exc
        for cc in self.cutsets:
            make_partition(case, cc.leading, cc.lines, cc.name)

    def to_dict(self) -> dict:
        return {
            "case": self.case,
            "scenario": None if self.scenario is None else self.scenario.to_dict(),
            "cutsets": [asdict(c) for c in self.cutsets],
            "detector": asdict(self.detector),
            "out": str(self.out),
            "seed": self.seed,
            "figures": list(self.figures),
        }


# ---------------------------------------------------------------------------
# trajectory files
# ---------------------------------------------------------------------------

def write_trajectory(traj: Trajectory, out: Path, base_case: NetworkCase) -> tuple[Path, Path]:
    out.mkdir(parents=True, exist_ok=True)
    csv_path, meta_path = out / "trajectory.csv", out / "trajectory.json"
    traj.to_csv(csv_path, float_fmt="%.15g")
    scn = traj.scenario
    meta = {
        "case_hash": case_hash(base_case),
        "scenario": scn.to_dict(),
        "solver": {"method": "rk4", "dt": scn.dt, "t_end": scn.t_end, "frame": "coi"},
        "stages": {
            "fault_on": float(traj.t[traj.i_fault]),
            "fault_cleared": traj.t_clear,
            "t_last": float(traj.t[-1]),
        },
        "status": traj.status,
        "rows": traj.n,
        "generators": list(traj.case.gen_ids),
    }
    meta_path.write_text(dumps_report(meta), encoding="utf-8")
    return csv_path, meta_path


def read_trajectory(path: str | Path, manifest: RunManifest) -> Trajectory:
    """Load a trajectory written by ``simulate`` and re-solve the network from its rotor angles."""
    p = Path(path)
    csv_path = p / "trajectory.csv" if p.is_dir() else p
    meta_path = csv_path.with_suffix(".json")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    base = manifest.load_case()
    if meta["case_hash"] != case_hash(base):
        raise CaseHashMismatch(f"trajectory {csv_path} was produced from a different case than {manifest.case}")
    scn = Scenario.from_dict({**meta["scenario"], "case": manifest.case})
    with open(csv_path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    gens = meta["generators"]
    col = {name: i for i, name in enumerate(header)}
    delta = data[:, [col[f"delta_{g}"] for g in gens]]
    omega = data[:, [col[f"omega_{g}"] for g in gens]]
    return rebuild(scn, delta, omega, base, status=meta.get("status", "complete"))


# ---------------------------------------------------------------------------
# figure data
# ---------------------------------------------------------------------------

def write_figures(traj: Trajectory, manifest: RunManifest, out: Path) -> list[Path]:
    written: list[Path] = []
    case = traj.case
    pairs = [(cc, *make_partition(case, cc.leading, cc.lines, cc.name)) for cc in manifest.cutsets]
    et = total_energy(traj) if {"energy", "lpe_share"} & set(manifest.figures) else None
    for fig in manifest.figures:
        if fig == "fdelta":
            for cc, part, cut in pairs:
                tm = two_machine_decompose(traj, part, cut)
                p = out / f"fdelta_{cc.name}.csv"
                tm.to_csv(p)
                written.append(p)
        elif fig == "energy":
            p = out / "energy.csv"
            et.to_csv(p, case)
            written.append(p)
        elif fig == "lpe_share":
            p = out / "lpe_share.csv"
            rows = ["cut,share,stop_t"]
            for cc, part, cut in pairs:
                tm = two_machine_decompose(traj, part, cut)
                stop = tm.first_slip_index()
                rows.append(f"{cc.name},{cutset_lpe_share(et, cut, stop):.9g},{traj.t[stop]:.9g}")
            p.write_text("\n".join(rows) + "\n", encoding="utf-8")
            written.append(p)
    missing = [f for f in manifest.figures if not any(w.name.startswith(f) for w in written)]
    if missing and manifest.cutsets:
        raise OOSError(f"figure data not produced: {missing}")
    return written


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(manifest: RunManifest, out: Path | None = None) -> Trajectory:
    if manifest.scenario is None:
        raise ManifestError("simulate needs a scenario")
    out = out or manifest.out
    base = manifest.load_case()
    traj = simulate(manifest.scenario, base)
    write_trajectory(traj, out, base)
    log.info("simulated %d samples (%s) in %.2f s", traj.n, traj.status, traj.wall_time)
    return traj


def cmd_detect(manifest: RunManifest, trajectory: str | Path | None = None,
               out: Path | None = None) -> DetectionReport:
    out = out or manifest.out
    out.mkdir(parents=True, exist_ok=True)
    if trajectory is None:
        if manifest.scenario is None:
            raise ManifestError("detect needs a trajectory or a scenario")
        traj = simulate(manifest.scenario, manifest.load_case())
    else:
        traj = read_trajectory(trajectory, manifest)
    report = run_suite(traj, manifest.cutsets, manifest.detector)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    write_figures(traj, manifest, out)
    return report


def cmd_analyze(manifest: RunManifest, out: Path | None = None) -> dict:
    """Analytic cosine models, root-existence verdicts, SEP eigenvalues and the cutset ranking."""
    out = out or manifest.out
    scn = manifest.scenario or Scenario(fault_bus=None, fault_duration=0.0, case=manifest.case, t_end=1.0)
    case, adm, op, baseline = prepare(scn, manifest.load_case())
    red = kron_reduce(adm["post"], case, baseline.load_y, keep=[b.id for b in case.buses], E_steady=baseline.E)
    result: dict = {"case": case.name, "cutsets": {}, "ranking": []}
    groups: dict[tuple, list] = {}
    for cc in manifest.cutsets:
        part, cut = make_partition(case, cc.leading, cc.lines, cc.name)
        groups.setdefault((part.S, part.A), []).append((part, cut))
        model = fit_cosine_analytic(partition_blocks(red, part, cut), part, cut)
        pr = proposition1_check(model)
        ev = sep_eigen(model)
        md = model.to_dict()
        md["gamma_C_deg"] = math.degrees(model.C.gamma)
        md["gamma_L2_deg"] = math.degrees(model.L2.gamma)
        result["cutsets"][cc.name] = {
            "model": md,
            "proposition1": {"holds": pr.holds, "failed": list(pr.failed), "interval": pr.interval,
                             "root": pr.root, "note": pr.note},
            "eigen": {"lambda": list(ev.lam), "lambda_scaled": list(ev.lam_scaled), "df0": ev.df0,
                      "verdict": ev.verdict},
        }
    for grp in groups.values():
        result["ranking"].extend(asdict(r) for r in rank_cutsets(grp, red))
    out.mkdir(parents=True, exist_ok=True)
    (out / "analysis.json").write_text(dumps_report(result), encoding="utf-8")
    return result


def format_report(d: dict) -> str:
    """Human-readable summary of a report JSON (angles printed in rad and deg)."""
    lines = [f"scenario: {d.get('scenario', '')}", f"verdict: {d['verdict']}"]
    for e in d.get("events", []):
        lines.append(f"  {e['t']:.4f} s  {e['detector']:<22} {e['cut']:<4} "
                     f"delta={e['delta']:.4f} rad ({math.degrees(e['delta']):.1f} deg)")
    for r in d.get("ranking", []):
        lines.append(f"  rank {r['rank']}: {r['name']} P_L2max={r['P_L2max']:.4f} lines={r['n_lines']}")
    for name, m in d.get("models", {}).items():
        a = m.get("analytic") or {}
        if a:
            lines.append(f"  {name}: gamma_C={a['C']['gamma']:.4f} rad ({a['gamma_C_deg']:.1f} deg) "
                         f"gamma_L2={a['L2']['gamma']:.4f} rad ({a['gamma_L2_deg']:.1f} deg)")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

def _manifest_from_args(args) -> RunManifest:
    if args.manifest:
        m = RunManifest.from_file(args.manifest)
        if args.case or args.scenario:
            d = m.to_dict()
            if args.case:
                d["case"] = args.case
            if args.scenario:
                d["scenario"] = args.scenario
            m = RunManifest.from_dict(d, Path(args.manifest).parent)
    else:
        d = {"case": args.case or "ieee39", "scenario": args.scenario, "cutsets": []}
        m = RunManifest.from_dict(d)
    if args.out:
        m = replace(m, out=Path(args.out))
    if getattr(args, "dt", None) and m.scenario is not None:
        m = replace(m, scenario=m.scenario.with_(dt=float(args.dt)))
    if getattr(args, "alpha_rule", None):
        m = replace(m, detector=replace(m.detector, alpha_rule=args.alpha_rule))
    return m


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="oosdetect", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, dt=True, alpha=True):
        p.add_argument("--manifest")
        p.add_argument("--case")
        p.add_argument("--scenario")
        p.add_argument("--out")
        if dt:
            p.add_argument("--dt", type=float)
        if alpha:
            p.add_argument("--alpha-rule", choices=("min", "max"))

    common(sub.add_parser("simulate", help="integrate a scenario and write the trajectory"), alpha=False)
    p = sub.add_parser("detect", help="run the detector suite on a trajectory")
    common(p)
    p.add_argument("--trajectory", help="trajectory CSV or directory written by simulate")
    common(sub.add_parser("analyze", help="analytic cosine models without simulation"), dt=False)
    p = sub.add_parser("report", help="print a report JSON and exit with its verdict code")
    p.add_argument("--out", required=True, help="directory containing report.json (or the file)")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("OOS_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            p = Path(args.out)
            d = json.loads((p / "report.json" if p.is_dir() else p).read_text(encoding="utf-8"))
            sys.stdout.write(format_report(d))
            return DetectionReport(scenario="", verdict=d["verdict"], events=[], models={}, propositions={},
                                   eigen={}, compensation={}, ranking=[], config={}, pebs={}).exit_code
        m = _manifest_from_args(args)
        if args.command == "simulate":
            traj = cmd_simulate(m)
            sys.stdout.write(f"{traj.n} samples, status {traj.status}, written to {m.out}\n")
            return 0
        if args.command == "detect":
            rep = cmd_detect(m, args.trajectory)
            sys.stdout.write(format_report(rep.to_dict()))
            return rep.exit_code
        if args.command == "analyze":
            res = cmd_analyze(m)
            sys.stdout.write(dumps_report(res))
            return 0
    except (OOSError, OSError, ValueError) as exc:
        log.error("%s", exc)
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_ERROR
    return EXIT_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
