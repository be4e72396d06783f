"""PC causal discovery with background knowledge and multi-seed stability.

The skeleton phase follows the order-independent (PC-stable) scheme: within
one conditioning-set size, candidate sets are drawn from an adjacency
snapshot taken at the start of that level, and every candidate set of a pair
is tested so that the recorded separating sets do not depend on variable
order either.
"""
from __future__ import annotations

import itertools
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array

from .ci_tests import CiTestConfig, CiTestOutcome, make_ci_test
from .exceptions import ConfigError, DataError

log = logging.getLogger(__name__)

UNDIRECTED = "--"
FORWARD = "->"
BACKWARD = "<-"
UNRESOLVED = "o-o"


class MixedGraph:
    """Graph over named variables with undirected, directed and unresolved edges.

    Edges are stored once per unordered pair ``(i, j)`` with ``i < j``; the
    mark ``"->"`` means ``i -> j`` and ``"<-"`` means ``j -> i``.
    """

    def __init__(self, variables: Sequence[str]):
        self.variables = list(variables)
        if len(set(self.variables)) != len(self.variables):
            raise ConfigError("variable names must be unique")
        self._marks: dict[tuple[int, int], str] = {}
        self.strengths: dict[tuple[int, int], float] = {}
        self.max_p: dict[tuple[int, int], float] = {}
        self.test_log: dict[tuple[int, int], list[CiTestOutcome]] = {}
        self.notes: list[str] = []

    # basic access ------------------------------------------------------------

    @classmethod
    def complete(cls, variables):
        g = cls(variables)
        for i, j in itertools.combinations(range(len(g.variables)), 2):
            g._marks[(i, j)] = UNDIRECTED
        return g

    def copy(self):
        g = MixedGraph(self.variables)
        g._marks = dict(self._marks)
        g.strengths = dict(self.strengths)
        g.max_p = dict(self.max_p)
        g.test_log = {k: list(v) for k, v in self.test_log.items()}
        g.notes = list(self.notes)
        return g

    def index(self, name) -> int:
        return name if isinstance(name, (int, np.integer)) else self.variables.index(name)

    @staticmethod
    def _key(i, j):
        if i == j:
            raise ValueError("self-loops are not allowed")
        return (i, j) if i < j else (j, i)

    def adjacent(self, i, j) -> bool:
        return i != j and self._key(i, j) in self._marks

    def neighbors(self, i):
        return sorted(j for j in range(len(self.variables)) if self.adjacent(i, j))

    def add_edge(self, i, j, mark=UNDIRECTED):
        self._marks[self._key(i, j)] = UNDIRECTED
        if mark == FORWARD:
            self.orient(i, j)
        elif mark == UNRESOLVED:
            self.set_unresolved(i, j)

    def remove_edge(self, i, j):
        key = self._key(i, j)
        self._marks.pop(key, None)
        self.strengths.pop(key, None)
        self.max_p.pop(key, None)

    def is_directed(self, i, j) -> bool:
        """True when the edge is oriented ``i -> j``."""
        mark = self._marks.get(self._key(i, j)) if i != j else None
        return mark == (FORWARD if i < j else BACKWARD)

    def is_undirected(self, i, j) -> bool:
        return i != j and self._marks.get(self._key(i, j)) == UNDIRECTED

    def is_unresolved(self, i, j) -> bool:
        return i != j and self._marks.get(self._key(i, j)) == UNRESOLVED

    def orient(self, i, j):
        key = self._key(i, j)
        if key not in self._marks:
            raise KeyError(f"no edge between {self.variables[i]} and {self.variables[j]}")
        self._marks[key] = FORWARD if i < j else BACKWARD

    def set_unresolved(self, i, j):
        self._marks[self._key(i, j)] = UNRESOLVED

    def parents(self, j):
        return [i for i in self.neighbors(j) if self.is_directed(i, j)]

    def children(self, i):
        return [j for j in self.neighbors(i) if self.is_directed(i, j)]

    def edges(self):
        """``(i, j, mark)`` for every edge, ``i < j``, in sorted order."""
        return [(i, j, m) for (i, j), m in sorted(self._marks.items())]

    def skeleton(self) -> set[frozenset]:
        return {frozenset((self.variables[i], self.variables[j])) for (i, j) in self._marks}

    def directed_edges(self) -> set[tuple[str, str]]:
        out = set()
        for i, j, m in self.edges():
            if m == FORWARD:
                out.add((self.variables[i], self.variables[j]))
            elif m == BACKWARD:
                out.add((self.variables[j], self.variables[i]))
        return out

    def orientation(self, a: str, b: str) -> str | None:
        """``"->"``/``"<-"`` relative to the name order ``(a, b)``, or the raw mark."""
        i, j = self.index(a), self.index(b)
        mark = self._marks.get(self._key(i, j))
        if mark in (FORWARD, BACKWARD) and i > j:
            return BACKWARD if mark == FORWARD else FORWARD
        return mark

    def is_acyclic(self) -> bool:
        n = len(self.variables)
        indeg = [len(self.parents(j)) for j in range(n)]
        stack = [j for j in range(n) if indeg[j] == 0]
        seen = 0
        while stack:
            i = stack.pop()
            seen += 1
            for j in self.children(i):
                indeg[j] -= 1
                if indeg[j] == 0:
                    stack.append(j)
        return seen == n

    def finalize(self):
        """Mark every edge left undirected as unresolved."""
        for key, mark in self._marks.items():
            if mark == UNDIRECTED:
                self._marks[key] = UNRESOLVED
        return self

    def __eq__(self, other):
        return (isinstance(other, MixedGraph) and self.variables == other.variables
                and self._marks == other._marks)

    def __repr__(self):
        return f"MixedGraph({self.to_text()})"

    # serialization -----------------------------------------------------------

    def edge_records(self):
        records = []
        for i, j, mark in self.edges():
            src, dst = (j, i) if mark == BACKWARD else (i, j)
            kind = {FORWARD: "directed", BACKWARD: "directed",
                    UNDIRECTED: "undirected", UNRESOLVED: "unresolved"}[mark]
            key = (i, j)
            records.append({
                "from": self.variables[src],
                "to": self.variables[dst],
                "mark": kind,
                "rho": _maybe_round(self.strengths.get(key)),
                "max_p": _maybe_round(self.max_p.get(key)),
            })
        return records

    def to_dict(self) -> dict:
        return {"variables": list(self.variables), "edges": self.edge_records(), "notes": list(self.notes)}

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, data: Mapping):
        g = cls(data["variables"])
        for e in data["edges"]:
            i, j = g.index(e["from"]), g.index(e["to"])
            mark = {"directed": FORWARD, "undirected": UNDIRECTED, "unresolved": UNRESOLVED}[e["mark"]]
            g.add_edge(i, j, mark)
            if e.get("rho") is not None:
                g.strengths[g._key(i, j)] = float(e["rho"])
            if e.get("max_p") is not None:
                g.max_p[g._key(i, j)] = float(e["max_p"])
        g.notes = list(data.get("notes", []))
        return g

    def to_dot(self) -> str:
        lines = ["digraph causal_graph {", "  node [shape=box];"]
        for v in self.variables:
            lines.append(f'  "{v}";')
        for rec in self.edge_records():
            label = "" if rec["rho"] is None else f'label="{rec["rho"]:.2f}", '
            if rec["mark"] == "directed":
                attrs = f"{label}dir=forward"
            elif rec["mark"] == "unresolved":
                attrs = f"{label}dir=both, arrowhead=odot, arrowtail=odot"
            else:
                attrs = f"{label}dir=none"
            lines.append(f'  "{rec["from"]}" -> "{rec["to"]}" [{attrs}];')
        lines.append("}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        parts = []
        for rec in self.edge_records():
            arrow = {"directed": "->", "undirected": "--", "unresolved": "o-o"}[rec["mark"]]
            parts.append(f"{rec['from']} {arrow} {rec['to']}")
        return ", ".join(parts)


def _maybe_round(value, digits=12):
    return None if value is None else round(float(value), digits)


# ---------------------------------------------------------------------------
# background knowledge

@dataclass(frozen=True)
class BackgroundKnowledge:
    """Orientation constraints.

    ``forbidden_edges`` holds ``(cause, effect)`` pairs that may not appear
    as ``cause -> effect``. Variables in ``required_sources`` may not be
    caused by any other variable and variables in ``required_sinks`` may not
    cause any other variable. A pair forbidden in both directions can not be
    adjacent at all.
    """

    forbidden_edges: frozenset = frozenset()
    required_sources: frozenset = frozenset()
    required_sinks: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "forbidden_edges", frozenset(tuple(p) for p in self.forbidden_edges))
        object.__setattr__(self, "required_sources", frozenset(self.required_sources))
        object.__setattr__(self, "required_sinks", frozenset(self.required_sinks))
        both = self.required_sources & self.required_sinks
        if both:
            raise ConfigError(f"variables cannot be both source and sink: {sorted(both)}")

    def forbids(self, cause: str, effect: str) -> bool:
        return ((cause, effect) in self.forbidden_edges or effect in self.required_sources
                or cause in self.required_sinks)

    def forbids_adjacency(self, a: str, b: str) -> bool:
        return self.forbids(a, b) and self.forbids(b, a)

    @property
    def empty(self) -> bool:
        return not (self.forbidden_edges or self.required_sources or self.required_sinks)

    def to_dict(self):
        return {
            "forbidden_edges": sorted(list(p) for p in self.forbidden_edges),
            "required_sources": sorted(self.required_sources),
            "required_sinks": sorted(self.required_sinks),
        }

    @classmethod
    def from_dict(cls, data: Mapping):
        return cls(
            frozenset(tuple(p) for p in data.get("forbidden_edges", ())),
            frozenset(data.get("required_sources", ())),
            frozenset(data.get("required_sinks", ())),
        )


def urban_form_knowledge(target="mean_vkt_km", center="distance_to_center_km", income="income"):
    """Constraints for the urban-form setting.

    The travel-distance target causes no feature, distance to the center is
    caused by nothing, and income is not caused by urban form (nor by the
    target), so it is a source as well.
    """
    return BackgroundKnowledge(required_sources=frozenset({center, income}),
                               required_sinks=frozenset({target}))


def apply_background_knowledge(graph: MixedGraph, knowledge: BackgroundKnowledge | None):
    """Orient edges as required by ``knowledge``; returns a new graph.

    Undirected or unresolved edges with exactly one permitted direction are
    oriented that way. A directed edge pointing in a forbidden direction is
    flipped (or dropped when neither direction is permitted) and the conflict
    is appended to ``graph.notes``.
    """
    g = graph.copy()
    if knowledge is None or knowledge.empty:
        return g
    names = g.variables
    for i, j, mark in graph.edges():
        a, b = names[i], names[j]
        fwd_ok = not knowledge.forbids(a, b)
        bwd_ok = not knowledge.forbids(b, a)
        if not fwd_ok and not bwd_ok:
            g.remove_edge(i, j)
            g.notes.append(f"knowledge forbids any edge {a} - {b}; edge removed")
            continue
        if mark in (UNDIRECTED, UNRESOLVED):
            if fwd_ok and not bwd_ok:
                g.orient(i, j)
            elif bwd_ok and not fwd_ok:
                g.orient(j, i)
        elif mark == FORWARD and not fwd_ok:
            g.orient(j, i)
            g.notes.append(f"conflict: {a} -> {b} contradicts knowledge; set to {b} -> {a}")
        elif mark == BACKWARD and not bwd_ok:
            g.orient(i, j)
            g.notes.append(f"conflict: {b} -> {a} contradicts knowledge; set to {a} -> {b}")
    return g


# ---------------------------------------------------------------------------
# skeleton

@dataclass
class SeparationSets:
    """Unordered pair -> conditioning sets under which the pair tested independent."""

    sets: dict = field(default_factory=dict)

    def add(self, i, j, Z):
        self.sets.setdefault(frozenset((i, j)), []).append(tuple(sorted(Z)))

    def get(self, i, j):
        return self.sets.get(frozenset((i, j)), [])

    def __contains__(self, pair):
        return frozenset(pair) in self.sets


def pc_skeleton(data, citest, alpha, knowledge: BackgroundKnowledge | None = None,
                variables=None, stable=True, exhaustive=True, max_cond=None):
    """Learn the undirected skeleton and separating sets.

    Parameters
    ----------
    data : array (n, p)
        Only its width is used when ``variables`` is given; the CI test is
        already bound to the data.
    citest : callable ``(x, y, Z) -> CiTestOutcome``
    alpha : float
        Independence is declared when ``p > alpha``.
    stable : bool
        Use the per-level adjacency snapshot (order independent). With
        ``False``, removals take effect immediately.
    exhaustive : bool
        Test every candidate set of a pair at the removal level instead of
        stopping at the first independent one.

    Returns
    -------
    graph : MixedGraph
        Undirected skeleton with per-edge strength (partial correlation of
        the test with maximal p-value) and the full test log.
    sepsets : SeparationSets
    """
    if not 0 < alpha < 1:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    p = np.asarray(data).shape[1] if variables is None else len(variables)
    variables = list(variables) if variables is not None else [f"X{k}" for k in range(p)]
    graph = MixedGraph.complete(variables)
    sepsets = SeparationSets()
    if knowledge is not None:
        for i, j in itertools.combinations(range(p), 2):
            if knowledge.forbids_adjacency(variables[i], variables[j]):
                graph.remove_edge(i, j)

    def run(i, j, Z):
        try:
            outcome = citest(i, j, Z)
        except Exception as exc:
            raise DataError(
                f"CI test failed for ({variables[i]}, {variables[j]} | {[variables[z] for z in Z]}): {exc}"
            ) from exc
        graph.test_log.setdefault((i, j), []).append(outcome)
        return outcome

    level = 0
    while max_cond is None or level <= max_cond:
        snapshot = {i: set(graph.neighbors(i)) for i in range(p)}
        pairs = [(i, j) for i, j, _ in graph.edges()]
        if not any(len(snapshot[i] - {j}) >= level or len(snapshot[j] - {i}) >= level for i, j in pairs):
            break
        removals = []
        for i, j in pairs:
            if not stable and not graph.adjacent(i, j):
                continue
            adj_i = (snapshot[i] if stable else set(graph.neighbors(i))) - {j}
            adj_j = (snapshot[j] if stable else set(graph.neighbors(j))) - {i}
            candidates = sorted(
                set(itertools.combinations(sorted(adj_i), level))
                | set(itertools.combinations(sorted(adj_j), level))
            )
            found = []
            for Z in candidates:
                outcome = run(i, j, Z)
                if outcome.p_value > alpha:
                    found.append(Z)
                    if not exhaustive:
                        break
            if found:
                removals.append((i, j, found))
                if not stable:
                    graph.remove_edge(i, j)
        for i, j, found in removals:
            graph.remove_edge(i, j)
            for Z in found:
                sepsets.add(i, j, Z)
        level += 1

    for i, j, _ in graph.edges():
        outcome = _max_p_outcome(graph.test_log.get((i, j), []))
        if outcome is not None:
            if outcome.partial_correlation is not None:
                graph.strengths[(i, j)] = outcome.partial_correlation
            graph.max_p[(i, j)] = outcome.p_value
    return graph, sepsets


def _max_p_outcome(outcomes):
    """Outcome with the largest p-value; ties go to the weakest statistic."""
    if not outcomes:
        return None

    def key(o):
        weak = abs(o.partial_correlation) if o.partial_correlation is not None else abs(o.statistic)
        return (-o.p_value, weak, len(o.condition_set), o.condition_set)

    return min(outcomes, key=key)


def link_strength(x, y, data, citest, graph: MixedGraph):
    """Partial correlation of ``x`` and ``y`` at the maximal p-value over tested sets.

    Uses the skeleton-phase test log when the graph has one; otherwise the
    pair is re-tested with every subset of both adjacency sets.
    """
    i, j = graph.index(x), graph.index(y)
    if not graph.adjacent(i, j):
        raise DataError(f"no edge between {graph.variables[i]} and {graph.variables[j]}")
    key = graph._key(i, j)
    outcomes = graph.test_log.get(key)
    if not outcomes:
        a, b = key
        sets = set()
        for side in (set(graph.neighbors(a)) - {b}, set(graph.neighbors(b)) - {a}):
            for r in range(len(side) + 1):
                sets.update(itertools.combinations(sorted(side), r))
        outcomes = [citest(a, b, Z) for Z in sorted(sets)]
    best = _max_p_outcome(outcomes)
    return best.partial_correlation


# ---------------------------------------------------------------------------
# orientation

def orient_colliders(graph: MixedGraph, sepsets: SeparationSets):
    """Orient ``i -> k <- j`` for unshielded triples with ``k`` in no separating set of ``(i, j)``.

    All proposals are collected from the unchanged input first. An edge that
    receives both directions is marked unresolved; a proposal against an edge
    that is already directed the other way is recorded in ``notes`` and the
    existing orientation is kept.
    """
    g = graph.copy()
    p = len(g.variables)
    proposals: dict[tuple[int, int], set] = {}
    for k in range(p):
        nbrs = graph.neighbors(k)
        for i, j in itertools.combinations(nbrs, 2):
            if graph.adjacent(i, j) or (i, j) not in sepsets:
                continue
            if any(k in Z for Z in sepsets.get(i, j)):
                continue
            for a in (i, j):
                proposals.setdefault(g._key(a, k), set()).add((a, k))
    for key, dirs in sorted(proposals.items()):
        a, b = key
        names = g.variables
        if len(dirs) > 1:
            g.set_unresolved(a, b)
            g.notes.append(f"collider conflict on {names[a]} - {names[b]}; marked unresolved")
            log.info("collider conflict on %s - %s", names[a], names[b])
            continue
        (src, dst), = dirs
        if graph.is_directed(dst, src):
            g.notes.append(
                f"conflict: collider wants {names[src]} -> {names[dst]} against existing orientation"
            )
            continue
        if graph.is_unresolved(src, dst):
            continue
        g.orient(src, dst)
    return g


def _meek_implies(g: MixedGraph, a, b) -> bool:
    """Whether one of Meek's rules R1-R4 orients the undirected edge ``a - b`` as ``a -> b``."""
    p = len(g.variables)
    # R1: c -> a - b, c and b nonadjacent
    if any(g.is_directed(c, a) and not g.adjacent(c, b) and c != b for c in range(p)):
        return True
    # R2: a -> c -> b with a - b
    if any(g.is_directed(a, c) and g.is_directed(c, b) for c in range(p)):
        return True
    # R3: a - c -> b, a - d -> b, c and d nonadjacent
    cands = [c for c in range(p) if g.is_undirected(a, c) and g.is_directed(c, b)]
    if any(not g.adjacent(c, d) for c, d in itertools.combinations(cands, 2)):
        return True
    # R4: a - c -> d -> b, a adjacent to d, c and b nonadjacent
    for c in range(p):
        if c == b or not g.is_undirected(a, c) or g.adjacent(c, b):
            continue
        if any(g.is_directed(c, d) and g.is_directed(d, b) and g.adjacent(a, d) for d in range(p)):
            return True
    return False


def apply_orientation_rules(graph: MixedGraph) -> MixedGraph:
    """Apply Meek's rules R1-R4 until nothing changes; leftover edges stay undirected.

    Each pass evaluates the rules for all undirected edges against the same
    snapshot and applies the proposals together, so the result does not
    depend on variable order. An edge proposed in both directions (possible
    only when the input orientations are mutually inconsistent) is marked
    unresolved.
    """
    g = graph.copy()
    while True:
        proposals = {}
        for i, j, mark in g.edges():
            if mark != UNDIRECTED:
                continue
            dirs = [(a, b) for a, b in ((i, j), (j, i)) if _meek_implies(g, a, b)]
            if dirs:
                proposals[(i, j)] = dirs
        if not proposals:
            return g
        for (i, j), dirs in proposals.items():
            if len(dirs) > 1:
                g.set_unresolved(i, j)
                g.notes.append(f"orientation rules conflict on {g.variables[i]} - {g.variables[j]}; "
                               "marked unresolved")
            else:
                g.orient(*dirs[0])


# ---------------------------------------------------------------------------
# full PC

def run_pc(data, variables, config: CiTestConfig | None = None,
           knowledge: BackgroundKnowledge | None = None, stable=True, exhaustive=True):
    """Skeleton, knowledge, colliders, Meek rules, knowledge again.

    Directed edges that still close a cycle (noisy collider sets can force
    one) are marked unresolved. Returns the final graph (undirected leftovers marked unresolved) and the
    separating sets.
    """
    config = config or CiTestConfig()
    data = np.asarray(data, dtype=float)
    citest = make_ci_test(data, config)
    skel, sepsets = pc_skeleton(data, citest, config.alpha, knowledge, variables,
                                stable=stable, exhaustive=exhaustive)
    g = apply_background_knowledge(skel, knowledge)
    g = orient_colliders(g, sepsets)
    g = apply_orientation_rules(g)
    g = apply_background_knowledge(g, knowledge)
    g = apply_orientation_rules(g)
    if not g.is_acyclic():
        _break_cycles(g)
    return g.finalize(), sepsets


class PCAlgorithm(BaseEstimator):
    """Estimator wrapper around :func:`run_pc`.

    ``fit(X)`` learns ``graph_`` (a :class:`MixedGraph`) and ``sepsets_``.
    Column names are taken from a DataFrame or from ``variable_names``.
    """

    def __init__(self, alpha=0.025, test_kind="robust_parcorr", knowledge=None, stable=True,
                 knn_k=10, n_permutations=500, k_perm=5, random_state=0, variable_names=None):
        self.alpha = alpha
        self.test_kind = test_kind
        self.knowledge = knowledge
        self.stable = stable
        self.knn_k = knn_k
        self.n_permutations = n_permutations
        self.k_perm = k_perm
        self.random_state = random_state
        self.variable_names = variable_names

    def fit(self, X, y=None):
        names = list(X.columns) if hasattr(X, "columns") else self.variable_names
        X = check_array(X, dtype=float, ensure_min_samples=4)
        names = list(names) if names is not None else [f"X{k}" for k in range(X.shape[1])]
        config = CiTestConfig(self.test_kind, self.alpha, self.knn_k, self.n_permutations,
                              self.k_perm, self.random_state)
        self.graph_, self.sepsets_ = run_pc(X, names, config, self.knowledge, stable=self.stable)
        self.n_features_in_ = X.shape[1]
        return self


# ---------------------------------------------------------------------------
# stability over resampled pools

@dataclass
class StabilityReport:
    seeds: list
    graphs: list
    consensus: MixedGraph
    votes: dict  # frozenset(name pair) -> Counter of orientation labels

    def to_dict(self):
        return {
            "seeds": list(self.seeds),
            "rounds": [g.to_dict() for g in self.graphs],
            "consensus": self.consensus.to_dict(),
            "orientation_votes": [
                {"pair": sorted(pair), "votes": dict(sorted(counter.items()))}
                for pair, counter in sorted(self.votes.items(), key=lambda kv: sorted(kv[0]))
            ],
        }


def _orientation_label(graph: MixedGraph, i, j):
    names = graph.variables
    if graph.is_directed(i, j):
        return f"{names[i]} -> {names[j]}"
    if graph.is_directed(j, i):
        return f"{names[j]} -> {names[i]}"
    return "unresolved"


def aggregate_rounds(graphs: Sequence[MixedGraph]):
    """Consensus of per-round graphs.

    Keeps edges present in every round. Orientation is the most frequent one
    across rounds; a tie for the top count leaves the edge unresolved.
    Strength is the mean over rounds and ``max_p`` the largest p-value seen.
    """
    variables = graphs[0].variables
    consensus = MixedGraph(variables)
    votes = {}
    for i, j, _ in graphs[0].edges():
        if not all(g.adjacent(i, j) for g in graphs):
            continue
        counter = Counter(_orientation_label(g, i, j) for g in graphs)
        pair = frozenset((variables[i], variables[j]))
        votes[pair] = counter
        ranked = counter.most_common()
        consensus.add_edge(i, j, UNDIRECTED)
        top = ranked[0]
        if len(ranked) > 1 and ranked[1][1] == top[1] or top[0] == "unresolved":
            consensus.set_unresolved(i, j)
        else:
            src, dst = top[0].split(" -> ")
            consensus.orient(variables.index(src), variables.index(dst))
        rhos = [g.strengths[(i, j)] for g in graphs if (i, j) in g.strengths]
        if rhos:
            consensus.strengths[(i, j)] = float(np.mean(rhos))
        ps = [g.max_p[(i, j)] for g in graphs if (i, j) in g.max_p]
        if ps:
            consensus.max_p[(i, j)] = float(max(ps))
    if not consensus.is_acyclic():
        _break_cycles(consensus)
    return consensus, votes


def _break_cycles(g: MixedGraph):
    """Mark directed edges lying on a directed cycle as unresolved."""
    p = len(g.variables)
    reach = np.eye(p, dtype=bool)
    for i, j, _ in g.edges():
        if g.is_directed(i, j):
            reach[i, j] = True
        elif g.is_directed(j, i):
            reach[j, i] = True
    for k in range(p):
        reach |= reach[:, [k]] & reach[[k], :]
    for i, j, _ in g.edges():
        for a, b in ((i, j), (j, i)):
            if g.is_directed(a, b) and reach[b, a]:
                g.set_unresolved(a, b)
                g.notes.append(f"{g.variables[a]} -> {g.variables[b]} lies on a cycle; marked unresolved")


def stability_analysis(city_datasets, variables, n_rounds=5, n_total=1542,
                       config: CiTestConfig | None = None, knowledge=None, seeds=None):
    """Run balanced pooling plus PC for several seeds and aggregate the graphs.

    ``seeds`` defaults to ``config.seed + r`` for round ``r``. The CI test of
    each round is seeded with the round seed.
    """
    from .dataset import balanced_pool

    config = config or CiTestConfig()
    seeds = list(seeds) if seeds is not None else [config.seed + r for r in range(n_rounds)]
    graphs = []
    for seed in seeds:
        pool = balanced_pool(city_datasets, n_total, seed, columns=tuple(variables))
        round_cfg = CiTestConfig(config.test_kind, config.alpha, config.knn_k,
                                 config.n_permutations, config.k_perm, seed)
        graph, _ = run_pc(pool.data, variables, round_cfg, knowledge)
        graphs.append(graph)
    consensus, votes = aggregate_rounds(graphs)
    return StabilityReport(seeds, graphs, consensus, votes)


def skeleton_f1(estimated: set, truth: set) -> float:
    """F1 score between two sets of unordered edges."""
    if not estimated and not truth:
        return 1.0
    tp = len(estimated & truth)
    if tp == 0:
        return 0.0
    precision = tp / len(estimated)
    recall = tp / len(truth)
    return 2 * precision * recall / (precision + recall)
