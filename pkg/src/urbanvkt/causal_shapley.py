"""Exact causal and marginal Shapley values with sampled value functions.

All ``2^d`` coalitions are enumerated. The value of a coalition ``S`` is the
mean model output over ``n_samples`` synthetic rows in which features in
``S`` keep the explained instance's values and the other features are drawn
from reference data:

* causal: components of the causal chain are filled in order. Out-of-coalition
  features of the first component come from a random reference row; those of
  later components come from a random one of the ``k`` reference rows nearest
  (in standardized units) to the already realized predecessor values.
* marginal: every out-of-coalition feature comes from one whole reference row.

The same random draws are reused for every coalition of an instance, which
makes the efficiency property exact and keeps differences between
coalitions low-variance.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from math import factorial
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator

from .exceptions import ConfigError, DataError

MAX_EXACT_FEATURES = 15
VALUE_KINDS = ("causal", "marginal")


@dataclass(frozen=True)
class CausalChain:
    """Ordered partition of feature indices; earlier components may cause later ones."""

    components: tuple

    def __post_init__(self):
        comps = tuple(tuple(int(f) for f in c) for c in self.components)
        if any(len(c) == 0 for c in comps):
            raise ConfigError("chain components must be nonempty")
        object.__setattr__(self, "components", comps)
        flat = [f for c in comps for f in c]
        if len(flat) != len(set(flat)):
            raise ConfigError("chain components overlap")

    @classmethod
    def from_order(cls, order: Sequence):
        """Build from a sequence of feature indices or of index groups."""
        return cls(tuple((c,) if np.isscalar(c) else tuple(c) for c in order))

    @classmethod
    def from_names(cls, feature_names: Sequence[str], order: Sequence, prepend_unlisted=True):
        """Chain over ``feature_names`` following ``order`` (names or groups of names).

        Features not mentioned in ``order`` form one extra root component
        when ``prepend_unlisted`` is set, otherwise an error is raised.
        """
        names = list(feature_names)
        groups = [[g] if isinstance(g, str) else list(g) for g in order]
        unknown = [n for g in groups for n in g if n not in names]
        if unknown:
            raise ConfigError(f"chain names not among model features: {unknown}")
        listed = {n for g in groups for n in g}
        rest = [n for n in names if n not in listed]
        if rest:
            if not prepend_unlisted:
                raise ConfigError(f"chain does not cover features {rest}")
            groups = [rest] + groups
        return cls(tuple(tuple(names.index(n) for n in g) for g in groups))

    @property
    def n_features(self):
        return sum(len(c) for c in self.components)

    def check_covers(self, d):
        if sorted(f for c in self.components for f in c) != list(range(d)):
            raise ConfigError(f"chain {self.components} does not partition {d} features")

    def predecessors(self, c) -> tuple:
        return tuple(f for comp in self.components[:c] for f in comp)

    def position(self, feature) -> int:
        for c, comp in enumerate(self.components):
            if feature in comp:
                return c
        raise KeyError(feature)


@dataclass(frozen=True)
class ShapleyConfig:
    n_samples: int = 200
    k_neighbors: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1 or self.k_neighbors < 1:
            raise ConfigError("n_samples and k_neighbors must be positive")


@dataclass
class ShapleyExplanation:
    """Attribution of one prediction.

    ``coalition_values[mask]`` holds ``v(S)`` for the coalition whose member
    bits are set in ``mask``; ``mc_se`` is the Monte-Carlo standard error of
    each attribution under the shared draws.
    """

    phi: np.ndarray
    base_value: float
    prediction: float
    value_kind: str
    n_samples: int
    seed: int
    mc_se: np.ndarray
    feature_names: tuple = ()
    coalition_values: np.ndarray = field(default=None, repr=False)

    @property
    def efficiency_gap(self) -> float:
        return float(abs(self.phi.sum() - (self.prediction - self.base_value)))

    def as_dict(self):
        names = self.feature_names or tuple(f"x{i}" for i in range(len(self.phi)))
        return dict(zip(names, self.phi.tolist()))


def _predict_fn(model):
    if callable(model) and not hasattr(model, "predict"):
        return lambda X: np.asarray(model(X), dtype=float)
    return lambda X: np.asarray(model.predict(X), dtype=float)


def shapley_weights(d):
    """Weight ``|S|! (d - |S| - 1)! / d!`` indexed by coalition size."""
    return np.array([factorial(s) * factorial(d - s - 1) / factorial(d) for s in range(d)])


class _Sampler:
    """Builds synthetic rows for coalitions of one instance under shared draws."""

    def __init__(self, reference, chain: CausalChain | None, k):
        self.reference = np.asarray(reference, dtype=float)
        if self.reference.ndim != 2 or len(self.reference) == 0:
            raise DataError("reference data must be a nonempty 2-D array")
        self.m, self.d = self.reference.shape
        self.chain = chain
        self.k = min(k, self.m)
        if chain is not None:
            chain.check_covers(self.d)
            mu = self.reference.mean(axis=0)
            sd = self.reference.std(axis=0)
            sd[sd == 0] = 1.0
            self._mu, self._sd = mu, sd
            self._trees = {}
            for c in range(1, len(chain.components)):
                pred = list(chain.predecessors(c))
                self._trees[c] = cKDTree((self.reference[:, pred] - mu[pred]) / sd[pred])

    def draws(self, n, rng):
        n_comp = len(self.chain.components) if self.chain is not None else 1
        rows = rng.integers(0, self.m, size=(n, n_comp))
        picks = rng.integers(0, self.k, size=(n, n_comp))
        return rows, picks

    def marginal_rows(self, x, member, draws):
        rows, _ = draws
        out = np.tile(x, (len(rows), 1))
        free = ~member
        out[:, free] = self.reference[rows[:, 0]][:, free]
        return out

    def causal_rows(self, x, member, draws):
        rows, picks = draws
        n = len(rows)
        out = np.tile(x, (n, 1))
        for c, comp in enumerate(self.chain.components):
            free = [f for f in comp if not member[f]]
            if not free:
                continue
            if c == 0:
                src = rows[:, 0]
            else:
                pred = list(self.chain.predecessors(c))
                q = (out[:, pred] - self._mu[pred]) / self._sd[pred]
                _, nbrs = self._trees[c].query(q, k=self.k)
                nbrs = nbrs.reshape(n, self.k)
                if np.any(nbrs >= self.m):
                    raise DataError("k-NN neighbourhood is empty")
                src = nbrs[np.arange(n), picks[:, c]]
            out[:, free] = self.reference[src][:, free]
        return out


def _explain(model, x, reference, chain, value_kind, config: ShapleyConfig, instance_key=0,
             feature_names=()):
    x = np.asarray(x, dtype=float).ravel()
    d = len(x)
    if d > MAX_EXACT_FEATURES:
        raise ConfigError(f"exact enumeration supports at most {MAX_EXACT_FEATURES} features, got {d}")
    reference = np.asarray(reference, dtype=float)
    if reference.ndim != 2 or reference.shape[1] != d:
        raise DataError(f"reference data must have shape (m, {d})")
    sampler = _Sampler(reference, chain if value_kind == "causal" else None, config.k_neighbors)
    predict = _predict_fn(model)
    rng = np.random.default_rng([config.seed, instance_key])
    n = config.n_samples
    draws = sampler.draws(n, rng)
    build = sampler.causal_rows if value_kind == "causal" else sampler.marginal_rows

    n_coal = 1 << d
    masks = np.array([[(s >> i) & 1 for i in range(d)] for s in range(n_coal)], dtype=bool)
    full = n_coal - 1
    batches = [build(x, masks[s], draws) for s in range(full)]
    outputs = np.empty((n_coal, n))
    if batches:
        # many synthetic rows repeat (shared draws, small neighbourhoods); predict each once
        stacked = np.vstack(batches)
        uniq, inverse = np.unique(stacked, axis=0, return_inverse=True)
        outputs[:full] = predict(uniq)[inverse.ravel()].reshape(full, n)
    prediction = float(predict(x[None, :])[0])
    outputs[full] = prediction
    # offset mean: coalitions whose samples are all identical get exactly that value
    values = outputs[:, 0] + (outputs - outputs[:, :1]).mean(axis=1)

    weights = shapley_weights(d)
    sizes = masks.sum(axis=1)
    phi = np.zeros(d)
    per_sample = np.zeros((d, n))
    for i in range(d):
        bit = 1 << i
        without = [s for s in range(n_coal) if not s & bit]
        w = weights[sizes[without]]
        with_i = [s | bit for s in without]
        phi[i] = float(np.dot(w, values[with_i] - values[without]))
        per_sample[i] = w @ (outputs[with_i] - outputs[without])
    mc_se = per_sample.std(axis=1, ddof=1) / np.sqrt(n) if n > 1 else np.full(d, np.nan)
    return ShapleyExplanation(phi, float(values[0]), prediction, value_kind, n, config.seed, mc_se,
                              tuple(feature_names), values)


def interventional_expectation(model, coalition, x, chain: CausalChain, reference_data,
                               n_samples=200, seed=0, k_neighbors=10, instance_key=0):
    """Value ``v(S)`` of one coalition under the causal sampling scheme.

    Uses the same draws as :func:`causal_shapley_values` with identical seed
    and ``instance_key``.
    """
    x = np.asarray(x, dtype=float).ravel()
    member = np.zeros(len(x), dtype=bool)
    member[list(coalition)] = True
    if member.all():
        return float(_predict_fn(model)(x[None, :])[0])
    sampler = _Sampler(reference_data, chain, k_neighbors)
    draws = sampler.draws(n_samples, np.random.default_rng([seed, instance_key]))
    return float(_predict_fn(model)(sampler.causal_rows(x, member, draws)).mean())


def causal_shapley_values(model, x, chain: CausalChain, reference_data, config: ShapleyConfig | None = None,
                          instance_key=0, feature_names=()) -> ShapleyExplanation:
    return _explain(model, x, reference_data, chain, "causal", config or ShapleyConfig(),
                    instance_key, feature_names)


def marginal_shapley_values(model, x, reference_data, config: ShapleyConfig | None = None,
                            instance_key=0, feature_names=()) -> ShapleyExplanation:
    return _explain(model, x, reference_data, None, "marginal", config or ShapleyConfig(),
                    instance_key, feature_names)


def permutation_shapley(value, d):
    """Shapley values by averaging marginal contributions over all orderings.

    ``value`` maps a frozenset coalition to its worth. Exponential in ``d``;
    meant as a reference for small ``d``.
    """
    phi = np.zeros(d)
    perms = list(itertools.permutations(range(d)))
    for perm in perms:
        members = set()
        for i in perm:
            before = value(frozenset(members))
            members.add(i)
            phi[i] += value(frozenset(members)) - before
    return phi / len(perms)


class ShapleyExplainer(BaseEstimator):
    """Explain many rows of a fitted model against reference data.

    Parameters
    ----------
    model : object with ``predict`` or a callable
    value_kind : {"causal", "marginal"}
    chain : CausalChain or None
        Required for causal values.
    n_samples, k_neighbors, random_state : sampling settings
    feature_names : sequence of str, optional
    """

    def __init__(self, model=None, value_kind="causal", chain=None, n_samples=200, k_neighbors=10,
                 random_state=0, feature_names=None):
        self.model = model
        self.value_kind = value_kind
        self.chain = chain
        self.n_samples = n_samples
        self.k_neighbors = k_neighbors
        self.random_state = random_state
        self.feature_names = feature_names

    def fit(self, X, y=None):
        if self.value_kind not in VALUE_KINDS:
            raise ConfigError(f"value_kind must be one of {VALUE_KINDS}")
        if self.value_kind == "causal" and self.chain is None:
            raise ConfigError("causal values need a chain")
        self.reference_ = np.asarray(X, dtype=float)
        if self.reference_.ndim != 2 or len(self.reference_) == 0:
            raise DataError("reference data must be a nonempty 2-D array")
        self.n_features_in_ = self.reference_.shape[1]
        return self

    def explain(self, X):
        """One :class:`ShapleyExplanation` per row; row ``r`` uses draw stream ``r``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        cfg = ShapleyConfig(self.n_samples, self.k_neighbors, self.random_state)
        names = tuple(self.feature_names or ())
        return [_explain(self.model, x, self.reference_, self.chain, self.value_kind, cfg, r, names)
                for r, x in enumerate(X)]

    def transform(self, X):
        """Attribution matrix of shape ``(n_rows, n_features)``."""
        return np.vstack([e.phi for e in self.explain(X)])


def explanations_to_frame(explanations: Sequence[ShapleyExplanation], ids=None, scale=1.0):
    """Tabulate explanations (one row each); ``scale`` converts units, e.g. km to g."""
    rows = []
    for r, e in enumerate(explanations):
        names = e.feature_names or tuple(f"x{i}" for i in range(len(e.phi)))
        row = {"taz_id": ids[r] if ids is not None else r, "base_value": e.base_value * scale}
        row.update({f"phi_{n}": v * scale for n, v in zip(names, e.phi)})
        row.update({"prediction": e.prediction * scale, "value_kind": e.value_kind, "seed": e.seed})
        rows.append(row)
    return pd.DataFrame(rows)


def mean_absolute_importance(explanations, normalize=False) -> dict:
    """Mean ``|phi|`` per feature across explanations.

    ``explanations`` is a sequence of :class:`ShapleyExplanation` or a mapping
    (e.g. city -> sequence) whose values are pooled.
    """
    if isinstance(explanations, Mapping):
        explanations = [e for group in explanations.values() for e in group]
    explanations = list(explanations)
    if not explanations:
        raise DataError("need at least one explanation")
    phis = np.vstack([e.phi for e in explanations])
    imp = np.abs(phis).mean(axis=0)
    if normalize:
        total = imp.sum()
        imp = imp / total if total > 0 else imp
    names = explanations[0].feature_names or tuple(f"x{i}" for i in range(phis.shape[1]))
    return dict(zip(names, imp.tolist()))
