"""Generator clusters (leading S / lagging A) and the directed cutsets separating them."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .errors import NotASeparator, PartitionMismatch, UnknownBus
from .netmodel import NetworkCase


@dataclass(frozen=True)
class Cutset:
    """Branches crossing from the S side to the A side.

    ``forward[k]`` is True when branch ``branches[k]`` is stored with its from-bus on the
    S side, so the S->A power is the branch's forward flow.
    """

    name: str
    branches: tuple[int, ...]
    forward: tuple[bool, ...]
    names: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.branches)


@dataclass(frozen=True)
class ClusterPartition:
    S: frozenset[int]
    A: frozenset[int]
    bus_side: Mapping[int, str]
    M_S: float
    M_A: float
    case_name: str
    n_bus: int

    def gen_mask(self, case: NetworkCase) -> np.ndarray:
        """Boolean mask over ``case.generators``: True for members of S."""
        return np.array([g in self.S for g in case.gen_ids], dtype=bool)

    def load_mask(self, case: NetworkCase) -> np.ndarray:
        return np.array([self.bus_side[ld.bus] == "S" for ld in case.loads], dtype=bool)

    def branch_side(self, case: NetworkCase) -> np.ndarray:
        """Per branch: 'S' or 'A' when internal to one side, 'C' when it straddles."""
        out = []
        for br in case.branches:
            a, b = self.bus_side[br.from_bus], self.bus_side[br.to_bus]
            out.append(a if a == b else "C")
        return np.array(out)

    def same_as(self, other: "ClusterPartition") -> bool:
        return self.S == other.S and self.A == other.A and self.case_name == other.case_name


def _components(case: NetworkCase, removed: set[int]) -> dict[int, int]:
    adj: dict[int, list[int]] = {b.id: [] for b in case.buses}
    for i, br in enumerate(case.branches):
        if i in removed:
            continue
        adj[br.from_bus].append(br.to_bus)
        adj[br.to_bus].append(br.from_bus)
    label: dict[int, int] = {}
    c = 0
    for b in case.buses:
        if b.id in label:
            continue
        stack = [b.id]
        label[b.id] = c
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if v not in label:
                    label[v] = c
                    stack.append(v)
        c += 1
    return label


def make_partition(
    case: NetworkCase,
    leading: Iterable[int],
    cut_refs: Iterable[str | int],
    name: str = "",
) -> tuple[ClusterPartition, Cutset]:
    """Build the S/A partition implied by removing ``cut_refs`` and orient the cutset S->A.

    Every bus is assigned to the side of the generators it stays connected to; generator-free
    islands take the side opposite to their cutset neighbours.
    """
    S = frozenset(int(g) for g in leading)
    for g in S:
        if g not in case.gen_index:
            raise UnknownBus(f"no generator at bus {g}")
    A = frozenset(case.gen_ids) - S
    if not S or not A:
        raise NotASeparator("both clusters need at least one generator")
    refs = list(cut_refs)
    idx = [case.branch_index(r) for r in refs]
    if len(set(idx)) != len(idx):
        raise NotASeparator("cutset lists a branch twice")
    label = _components(case, set(idx))

    comp_side: dict[int, str] = {}
    for g in case.gen_ids:
        side = "S" if g in S else "A"
        c = label[g]
        if comp_side.setdefault(c, side) != side:
            raise NotASeparator(
                f"cutset {name or refs} does not separate the groups: generator {g} is "
                f"connected to the other side"
            )
    # generator-free components: take the opposite side of a cutset neighbour
    changed = True
    while changed:
        changed = False
        for i in idx:
            br = case.branches[i]
            ca, cb = label[br.from_bus], label[br.to_bus]
            for x, y in ((ca, cb), (cb, ca)):
                if x not in comp_side and y in comp_side:
                    comp_side[x] = "A" if comp_side[y] == "S" else "S"
                    changed = True
    missing = sorted({b for b, c in label.items() if c not in comp_side})
    if missing:
        raise NotASeparator(f"buses {missing} cannot be assigned to a side")
    bus_side = {b: comp_side[c] for b, c in label.items()}

    forward = []
    for i in idx:
        br = case.branches[i]
        a, b = bus_side[br.from_bus], bus_side[br.to_bus]
        if a == b:
            raise NotASeparator(f"line {br.name} does not cross the cutset (both ends in {a})")
        forward.append(a == "S")
    M = case.inertia
    ms = float(sum(M[case.gen_index[g]] for g in S))
    ma = float(sum(M[case.gen_index[g]] for g in A))
    part = ClusterPartition(S=S, A=A, bus_side=bus_side, M_S=ms, M_A=ma,
                            case_name=case.name, n_bus=case.n_bus)
    names = tuple(case.branches[i].name for i in idx)
    return part, Cutset(name=name, branches=tuple(idx), forward=tuple(forward), names=names)


def check_separator(case: NetworkCase, part: ClusterPartition, cut: Cutset) -> bool:
    """Graph reachability: with the cutset removed no S bus reaches an A bus."""
    label = _components(case, set(cut.branches))
    s_labels = {label[b] for b, side in part.bus_side.items() if side == "S"}
    a_labels = {label[b] for b, side in part.bus_side.items() if side == "A"}
    return not (s_labels & a_labels)


def require_same_partition(parts: Iterable[ClusterPartition]) -> ClusterPartition:
    parts = list(parts)
    first = parts[0]
    for p in parts[1:]:
        if not first.same_as(p):
            raise PartitionMismatch("candidates use different generator groupings")
    return first
