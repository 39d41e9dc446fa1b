"""Exact likelihood evaluation and posterior queries for mixture evidence.

The marginal likelihood of a marker sums the peak-height likelihood over
every genotype combination of the unknown contributors.  That sum is
computed exactly by a forward pass over the allele ladder: each unknown
contributor's genotype is represented by the Markov chain of its partial
allele-count sums, with per-contributor state (S, n) taking one of six
reachable values, so the joint state space is 6^U for U unknowns.  The
evidence factor of an allele needs the effective counts of the allele
itself and of its stutter donor (one repeat unit above), so alleles are
traversed in an order that makes every stutter donor position-adjacent;
the factor is emitted once both counts are in scope.

Several traces that share unknown contributors are coupled by multiplying
their per-allele factors inside the same chain pass.  Forward-backward
sweeps yield presence posteriors and per-contributor count marginals, a
best-first search over the same chain yields exact k-best genotype
combinations, and a brute-force enumerator serves as the independent
verification oracle.

All accumulation is in log space; factors as small as e^-700 apiece do
not underflow intermediate results.
"""

from __future__ import annotations

import heapq
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import logsumexp

from .peakmodel import ModelParameters, gamma_log_cdf, gamma_log_pdf, gamma_log_sf
from .population import (
    SILENT_LABEL,
    FrequencyTable,
    GenotypeProfile,
    allele_repeat,
    canonical_allele,
    genotype_prior,
    stutter_successor,
)

__all__ = [
    "Trace",
    "Hypothesis",
    "EvidenceBundle",
    "MarkerChainPosterior",
    "InfeasibleConditioningError",
    "CombinationBudgetError",
    "marker_log_likelihood",
    "brute_force_log_likelihood",
    "total_log_likelihood",
    "presence_posteriors",
    "conditioned_presence",
    "marker_posterior",
    "top_k_marker_genotypes",
    "top_k_joint_profiles",
]


class InfeasibleConditioningError(ValueError):
    """Conditioning assignment has zero posterior probability."""


class CombinationBudgetError(ValueError):
    """Brute-force enumeration would exceed the combination budget."""


# ---------------------------------------------------------------------------
# Evidence containers


@dataclass(frozen=True)
class Trace:
    """Observed peak heights of one amplification run.

    heights maps marker -> {allele label: height}; alleles of a covered
    marker that carry no entry have height 0 (unobserved).  Markers absent
    from the mapping are not covered by this trace.  Heights strictly
    between 0 and the threshold are an ingestion error: the loader zeroes
    them before construction.
    """

    trace_id: str
    threshold: float
    heights: Mapping[str, Mapping[str, float]]

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError(f"threshold for {self.trace_id!r} must be positive")
        cleaned = {}
        for marker, peaks in self.heights.items():
            row = {}
            for allele, h in peaks.items():
                h = float(h)
                if h < 0:
                    raise ValueError(
                        f"negative height for {self.trace_id}/{marker}/{allele}"
                    )
                if 0.0 < h < self.threshold:
                    raise ValueError(
                        f"height {h} for {self.trace_id}/{marker}/{allele} lies in "
                        f"(0, C={self.threshold}); zero sub-threshold peaks at ingestion"
                    )
                row[canonical_allele(allele)] = h
            cleaned[marker] = row
        object.__setattr__(self, "heights", cleaned)

    def markers(self) -> tuple[str, ...]:
        return tuple(self.heights)

    def height(self, marker: str, allele: str) -> float:
        return self.heights.get(marker, {}).get(canonical_allele(allele), 0.0)


@dataclass(frozen=True)
class Hypothesis:
    """Contributor composition: known profiles plus unknown roles.

    trace_roles optionally restricts which roles contribute to which
    trace; roles shared between traces carry the same genotype in every
    trace they appear in.  By default every role contributes everywhere.
    """

    known: Mapping[str, GenotypeProfile]
    unknown: tuple[str, ...] = ()
    trace_roles: Mapping[str, tuple[str, ...]] | None = None

    def __post_init__(self):
        object.__setattr__(self, "unknown", tuple(self.unknown))
        if len(self.known) + len(self.unknown) == 0:
            raise ValueError("hypothesis needs at least one contributor")
        if len(set(self.unknown)) != len(self.unknown):
            raise ValueError(f"duplicate unknown role labels: {self.unknown}")
        overlap = set(self.known) & set(self.unknown)
        if overlap:
            raise ValueError(f"labels used for both known and unknown roles: {overlap}")
        if self.trace_roles is not None:
            roles = set(self.roles)
            fixed = {}
            for trace_id, sel in self.trace_roles.items():
                sel = set(sel)
                bad = sel - roles
                if bad:
                    raise ValueError(
                        f"trace {trace_id!r} references undeclared roles {sorted(bad)}"
                    )
                fixed[trace_id] = tuple(r for r in self.roles if r in sel)
            object.__setattr__(self, "trace_roles", fixed)

    @property
    def roles(self) -> tuple[str, ...]:
        return tuple(self.known) + self.unknown

    def roles_for(self, trace_id: str) -> tuple[str, ...]:
        if self.trace_roles is None or trace_id not in self.trace_roles:
            return self.roles
        return self.trace_roles[trace_id]


@dataclass(frozen=True)
class MarkerChainPosterior:
    """Posterior summary of one marker's genotype chain.

    presence maps each visible allele to P(Y_a = 1 | z), the probability
    that at least one contributor possesses it.  count_marginals gives,
    per unknown role, the posterior distribution of its allele count at
    every ladder position (including a silent one when present).
    top_genotypes ranks unknown genotype combinations by posterior
    probability, normalized by the marker likelihood.
    """

    marker: str
    log_likelihood: float
    presence: Mapping[str, float]
    count_marginals: Mapping[str, Mapping[str, tuple[float, float, float]]]
    top_genotypes: tuple[tuple[Mapping[str, tuple[str, str]], float], ...] = ()


# ---------------------------------------------------------------------------
# Chain structure

# Reachable per-contributor states (S, n): partial sum S and current count n <= S.
_STATES = ((0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2))
_STATE_INDEX = {s: i for i, s in enumerate(_STATES)}
# (S_prev, m) pairs with m <= 2 - S_prev, indexing per-step binomial log-pmfs.
_PAIRS = ((0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (2, 0))
_PAIR_INDEX = {p: i for i, p in enumerate(_PAIRS)}


def _binom_log_pmf_pairs(rate: float) -> np.ndarray:
    """log Bin(m; 2 - S, rate) for each (S, m) in _PAIRS."""
    out = np.empty(len(_PAIRS))
    lr = math.log(rate) if rate > 0 else -math.inf
    lq = math.log1p(-rate) if rate < 1 else -math.inf
    for i, (s, m) in enumerate(_PAIRS):
        n = 2 - s
        val = math.log(math.comb(n, m))
        if m:
            val += m * lr
        if n - m:
            val += (n - m) * lq
        out[i] = val
    return out


@dataclass(frozen=True)
class _Grouping:
    """Sorted-permutation bookkeeping for grouped log-sum-exp / max."""

    perm: np.ndarray
    starts: np.ndarray
    repeats: np.ndarray
    uniq: np.ndarray
    size: int

    @classmethod
    def build(cls, keys: np.ndarray, size: int) -> "_Grouping":
        perm = np.argsort(keys, kind="stable")
        sorted_keys = keys[perm]
        starts = np.flatnonzero(
            np.concatenate(([True], sorted_keys[1:] != sorted_keys[:-1]))
        )
        counts = np.diff(np.append(starts, len(keys)))
        return cls(perm=perm, starts=starts, repeats=counts,
                   uniq=sorted_keys[starts], size=size)

    def logsumexp(self, values: np.ndarray) -> np.ndarray:
        v = values[self.perm]
        mx = np.maximum.reduceat(v, self.starts)
        safe = np.where(np.isfinite(mx), mx, 0.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            sums = np.add.reduceat(
                np.exp(v - np.repeat(safe, self.repeats)), self.starts
            )
            grp = np.where(np.isfinite(mx), safe + np.log(sums), -np.inf)
        out = np.full(self.size, -np.inf)
        out[self.uniq] = grp
        return out

    def max(self, values: np.ndarray) -> np.ndarray:
        v = values[self.perm]
        out = np.full(self.size, -np.inf)
        out[self.uniq] = np.maximum.reduceat(v, self.starts)
        return out


@dataclass(frozen=True)
class _EdgeSet:
    """Transitions of one chain step: source state, joint draw, target state."""

    src: np.ndarray
    combo: np.ndarray
    dst: np.ndarray
    pair: np.ndarray  # (U, E) indices into _PAIRS
    by_dst: _Grouping
    by_src: _Grouping
    by_combo: _Grouping

    def log_trans(self, pair_lp: np.ndarray) -> np.ndarray:
        if self.pair.shape[0] == 0:
            return np.zeros(len(self.src))
        return pair_lp[self.pair].sum(axis=0)


def _build_edges(n_unknown: int) -> tuple[_EdgeSet, _EdgeSet]:
    n_states = 6**n_unknown
    n_combos = 3**n_unknown

    def build(sources, src_size):
        src_l, combo_l, dst_l = [], [], []
        pair_l = [[] for _ in range(n_unknown)]
        for sidx, per_contributor in sources:
            for draw in itertools.product(*per_contributor):
                combo = 0
                dst = 0
                for m, s_new, _ in draw:
                    combo = combo * 3 + m
                    dst = dst * 6 + _STATE_INDEX[(s_new, m)]
                src_l.append(sidx)
                combo_l.append(combo)
                dst_l.append(dst)
                for i, (m, _, s_prev) in enumerate(draw):
                    pair_l[i].append(_PAIR_INDEX[(s_prev, m)])
        src = np.array(src_l, dtype=np.int64)
        combo = np.array(combo_l, dtype=np.int64)
        dst = np.array(dst_l, dtype=np.int64)
        pair = np.array(pair_l, dtype=np.int64).reshape(n_unknown, len(src_l))
        return _EdgeSet(
            src=src, combo=combo, dst=dst, pair=pair,
            by_dst=_Grouping.build(dst, n_states),
            by_src=_Grouping.build(src, src_size),
            by_combo=_Grouping.build(combo, n_combos),
        )

    # draw entries are (m, S_new, S_prev)
    virtual = [(0, [[(m, m, 0) for m in range(3)] for _ in range(n_unknown)])]
    edges0 = build(virtual, 1)

    sources = []
    for sidx in range(n_states):
        rem, parts = sidx, []
        for _ in range(n_unknown):
            parts.append(rem % 6)
            rem //= 6
        parts.reverse()
        per = []
        for pstate in parts:
            s_prev = _STATES[pstate][0]
            per.append([(m, s_prev + m, s_prev) for m in range(3 - s_prev)])
        sources.append((sidx, per))
    edges = build(sources, n_states)
    return edges0, edges


@dataclass(frozen=True)
class _TraceView:
    """One trace's data for a marker, aligned to the internal position order."""

    trace_id: str
    threshold: float
    heights: np.ndarray
    observed: np.ndarray
    known_contributes: np.ndarray  # bool per known role
    unknown_contributes: np.ndarray  # bool per unknown role


@dataclass(frozen=True)
class _MarkerPlan:
    """Parameter-independent structure for one marker's chain."""

    marker: str
    labels: tuple[str, ...]          # ladder order
    order: np.ndarray                # internal position -> ladder index
    internal_labels: tuple[str, ...]
    silent: np.ndarray               # bool per internal position
    coupled: np.ndarray              # stutter donor sits at internal position p+1
    pair_lp: tuple[np.ndarray, ...]  # per step, log-pmfs over _PAIRS
    known_ids: tuple[str, ...]
    unknown_ids: tuple[str, ...]
    known_counts: np.ndarray         # (K, P) in internal order
    n_unknown: int
    n_states: int
    n_combos: int
    combo_counts: np.ndarray         # (C, U)
    state_ncombo: np.ndarray         # (n_states,) combo index of each state's n
    edges0: _EdgeSet
    edges: _EdgeSet
    traces: tuple[_TraceView, ...]


def _build_internal_order(ladder) -> np.ndarray:
    # Group alleles by fractional part so that within a group consecutive
    # repeat numbers (stutter partners) are position-adjacent; silent
    # first, non-numeric labels last.
    silent, numeric, other = [], [], []
    for idx, label in enumerate(ladder.alleles):
        if label == SILENT_LABEL:
            silent.append(idx)
            continue
        rep = allele_repeat(label)
        if rep is None:
            other.append(idx)
        else:
            numeric.append((rep - int(rep), rep, idx))
    numeric.sort()
    return np.array(silent + [idx for _, _, idx in numeric] + other, dtype=np.int64)


def _build_marker_plan(marker, freqs, hypothesis, traces) -> _MarkerPlan:
    ladder = freqs.ladder(marker)
    order = _build_internal_order(ladder)
    n_pos = len(order)
    internal_labels = tuple(ladder.alleles[i] for i in order)
    silent = np.array([lab == SILENT_LABEL for lab in internal_labels])

    pos_of = {int(l): p for p, l in enumerate(order)}
    succ = np.full(n_pos, -1, dtype=np.int64)
    for p, lab in enumerate(internal_labels):
        if silent[p]:
            continue
        s = stutter_successor(freqs, marker, lab)
        if s is not None:
            succ[p] = pos_of[int(s)]
    coupled = np.array([succ[p] == p + 1 for p in range(n_pos)])
    if np.any((succ >= 0) & ~coupled):
        raise AssertionError("internal order failed to make stutter donors adjacent")

    q = np.array([ladder.frequencies[i] for i in order], dtype=float)
    tails = np.cumsum(q[::-1])[::-1]
    pair_lp = tuple(
        _binom_log_pmf_pairs(min(q[p] / tails[p], 1.0)) for p in range(n_pos)
    )

    known_ids = tuple(hypothesis.known)
    known_counts = np.zeros((len(known_ids), n_pos), dtype=np.int64)
    for k, kid in enumerate(known_ids):
        counts = hypothesis.known[kid].counts(marker, ladder)
        known_counts[k] = [counts[i] for i in order]

    n_unknown = len(hypothesis.unknown)
    n_states = 6**n_unknown
    n_combos = 3**n_unknown
    combo_counts = np.zeros((n_combos, n_unknown), dtype=np.int64)
    for c in range(n_combos):
        rem = c
        for i in range(n_unknown - 1, -1, -1):
            combo_counts[c, i] = rem % 3
            rem //= 3
    state_ncombo = np.zeros(n_states, dtype=np.int64)
    for sidx in range(n_states):
        rem, parts = sidx, []
        for _ in range(n_unknown):
            parts.append(rem % 6)
            rem //= 6
        parts.reverse()
        cidx = 0
        for pstate in parts:
            cidx = cidx * 3 + _STATES[pstate][1]
        state_ncombo[sidx] = cidx

    edges0, edges = _build_edges(n_unknown)

    views = []
    for trace in traces:
        if marker not in trace.heights:
            continue
        row = trace.heights[marker]
        off_ladder = set(row) - set(ladder.alleles)
        if off_ladder:
            raise ValueError(
                f"trace {trace.trace_id!r} lists alleles {sorted(off_ladder)} "
                f"not on the {marker!r} ladder"
            )
        heights = np.array([row.get(lab, 0.0) for lab in internal_labels])
        roles = set(hypothesis.roles_for(trace.trace_id))
        views.append(
            _TraceView(
                trace_id=trace.trace_id,
                threshold=trace.threshold,
                heights=heights,
                observed=heights >= trace.threshold,
                known_contributes=np.array([r in roles for r in known_ids]),
                unknown_contributes=np.array(
                    [r in roles for r in hypothesis.unknown]
                ),
            )
        )

    return _MarkerPlan(
        marker=marker,
        labels=ladder.alleles,
        order=order,
        internal_labels=internal_labels,
        silent=silent,
        coupled=coupled,
        pair_lp=pair_lp,
        known_ids=known_ids,
        unknown_ids=tuple(hypothesis.unknown),
        known_counts=known_counts,
        n_unknown=n_unknown,
        n_states=n_states,
        n_combos=n_combos,
        combo_counts=combo_counts,
        state_ncombo=state_ncombo,
        edges0=edges0,
        edges=edges,
        traces=tuple(views),
    )


# ---------------------------------------------------------------------------
# Bundle


@dataclass(frozen=True)
class EvidenceBundle:
    """Everything one likelihood evaluation needs, immutable once built.

    Chain structure is precomputed per marker at construction; bundles
    derived via :meth:`with_parameters` share it, so parameter sweeps and
    optimizer loops pay the structural cost once.  Evaluation is pure and
    safe for concurrent read-only use.
    """

    traces: tuple[Trace, ...]
    frequencies: FrequencyTable
    hypothesis: Hypothesis
    parameters: ModelParameters
    _plans: Mapping[str, _MarkerPlan] = field(
        init=False, repr=False, compare=False, default=None
    )

    def __post_init__(self):
        object.__setattr__(self, "traces", tuple(self.traces))
        if not self.traces:
            raise ValueError("bundle needs at least one trace")
        ids = [t.trace_id for t in self.traces]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate trace ids: {ids}")
        table_markers = set(self.frequencies.marker_names())
        for trace in self.traces:
            missing = set(trace.markers()) - table_markers
            if missing:
                raise ValueError(
                    f"trace {trace.trace_id!r} covers markers {sorted(missing)} "
                    "absent from the frequency table"
                )
        for kid, profile in self.hypothesis.known.items():
            for trace in self.traces:
                for marker in trace.markers():
                    if marker not in profile.genotypes:
                        raise ValueError(
                            f"known contributor {kid!r} is untyped on marker "
                            f"{marker!r} present in trace {trace.trace_id!r}"
                        )
        _validate_parameters(self.parameters, self.hypothesis, self.traces)
        plans = {
            marker: _build_marker_plan(
                marker, self.frequencies, self.hypothesis, self.traces
            )
            for marker in self.frequencies.marker_names()
        }
        object.__setattr__(self, "_plans", plans)

    def with_parameters(self, parameters: ModelParameters) -> "EvidenceBundle":
        """Same evidence and hypothesis at new parameter values (shares structure)."""
        _validate_parameters(parameters, self.hypothesis, self.traces)
        clone = object.__new__(EvidenceBundle)
        object.__setattr__(clone, "traces", self.traces)
        object.__setattr__(clone, "frequencies", self.frequencies)
        object.__setattr__(clone, "hypothesis", self.hypothesis)
        object.__setattr__(clone, "parameters", parameters)
        object.__setattr__(clone, "_plans", self._plans)
        return clone

    def covered_markers(self) -> tuple[str, ...]:
        return tuple(
            m for m in self.frequencies.marker_names()
            if any(m in t.heights for t in self.traces)
        )

    def same_evidence(self, other: "EvidenceBundle") -> bool:
        return self.traces == other.traces and self.frequencies == other.frequencies


def _validate_parameters(params, hypothesis, traces):
    ids = {t.trace_id for t in traces}
    if set(params.rho) != ids:
        raise ValueError(
            f"parameters cover traces {sorted(params.rho)}, bundle has {sorted(ids)}"
        )
    for trace in traces:
        roles = hypothesis.roles_for(trace.trace_id)
        given = set(params.phi[trace.trace_id])
        if given != set(roles):
            raise ValueError(
                f"phi for trace {trace.trace_id!r} must cover exactly roles "
                f"{list(roles)}, got {sorted(given)}"
            )
    params.check_unknown_ordering(hypothesis.unknown)


# ---------------------------------------------------------------------------
# Evidence factors and chain sweeps


def _factor_tables(plan: _MarkerPlan, params: ModelParameters, replace_target=None):
    """Per-step evidence factor tables summed over traces.

    pairwise[t] is a (C, C) log-factor matrix for the stutter-coupled
    position t-1, indexed by (draw at t-1, draw at t); single[t] is a
    (C,) vector for an uncoupled position emitted at its own step.

    replace_target = (view index, position, mode) swaps one peak's factor:
    mode "survival" keeps only its observed-status (P(H >= C)), mode
    "flat" removes it entirely; used by the conditional-CDF diagnostic.
    """
    n_pos = len(plan.order)
    pairwise = [None] * n_pos
    single = [None] * n_pos
    for view_idx, view in enumerate(plan.traces):
        rho = params.rho_for(view.trace_id, plan.marker)
        eta = params.eta_for(view.trace_id)
        xi = params.xi_for_marker(view.trace_id, plan.marker)
        phi_map = params.phi[view.trace_id]
        phi_known = np.array(
            [phi_map[r] if c else 0.0
             for r, c in zip(plan.known_ids, view.known_contributes)]
        )
        phi_unknown = np.array(
            [phi_map[r] if c else 0.0
             for r, c in zip(plan.unknown_ids, view.unknown_contributes)]
        )
        b_known = (
            phi_known @ plan.known_counts if len(plan.known_ids) else np.zeros(n_pos)
        )
        dose = (
            plan.combo_counts @ phi_unknown if plan.n_unknown
            else np.zeros(plan.n_combos)
        )
        for p in range(n_pos):
            if plan.silent[p]:
                continue
            mode = None
            if replace_target is not None and replace_target[:2] == (view_idx, p):
                mode = replace_target[2]
            if plan.coupled[p]:
                d = (1.0 - xi) * (b_known[p] + dose)[:, None] \
                    + xi * (b_known[p + 1] + dose)[None, :]
                val = _peak_factor_array(view, p, rho * d, eta, mode)
                t = p + 1
                pairwise[t] = val if pairwise[t] is None else pairwise[t] + val
            else:
                d = (1.0 - xi) * (b_known[p] + dose)
                val = _peak_factor_array(view, p, rho * d, eta, mode)
                single[p] = val if single[p] is None else single[p] + val
    return pairwise, single


def _peak_factor_array(view, p, shapes, eta, mode=None):
    if mode == "flat":
        return np.zeros(np.shape(shapes))
    if mode == "survival":
        return gamma_log_sf(view.threshold, shapes, eta)
    if view.observed[p]:
        return gamma_log_pdf(view.heights[p], shapes, eta)
    return gamma_log_cdf(view.threshold, shapes, eta)


def _step_values(plan, t, pairwise, single, masks):
    """Per-edge log(transition * factors * mask) at step t, without lw."""
    edges = plan.edges0 if t == 0 else plan.edges
    vals = edges.log_trans(plan.pair_lp[t])
    if t > 0 and pairwise[t] is not None:
        src_combo = plan.state_ncombo[edges.src]
        vals = vals + pairwise[t].ravel()[src_combo * plan.n_combos + edges.combo]
    if single[t] is not None:
        vals = vals + single[t][edges.combo]
    if masks is not None and masks[t] is not None:
        vals = vals + masks[t][edges.combo]
    return edges, vals


def _forward(plan, pairwise, single, masks=None, keep=False):
    lw = np.zeros(1)
    history = []
    for t in range(len(plan.order)):
        edges, vals = _step_values(plan, t, pairwise, single, masks)
        lw = edges.by_dst.logsumexp(lw[edges.src] + vals)
        if keep:
            history.append(lw)
    return lw, history


def _backward(plan, pairwise, single, masks=None):
    n_pos = len(plan.order)
    lb = [None] * n_pos
    lb[n_pos - 1] = np.zeros(plan.n_states)
    for t in range(n_pos - 1, 0, -1):
        edges, vals = _step_values(plan, t, pairwise, single, masks)
        lb[t - 1] = edges.by_src.logsumexp(vals + lb[t][edges.dst])
    return lb


def _presence_masks(plan, assignments):
    """Translate allele -> present/absent assignments into per-step combo masks."""
    if not assignments:
        return None
    label_pos = {lab: p for p, lab in enumerate(plan.internal_labels)}
    masks = [None] * len(plan.order)
    known_any = plan.known_counts.sum(axis=0)
    combo_total = (
        plan.combo_counts.sum(axis=1) if plan.n_unknown else np.zeros(1, dtype=int)
    )
    for allele, value in assignments.items():
        lab = canonical_allele(allele)
        if lab not in label_pos:
            raise KeyError(f"allele {lab!r} not on the {plan.marker!r} ladder")
        p = label_pos[lab]
        present = _as_presence(value)
        if known_any[p] > 0:
            if not present:
                raise InfeasibleConditioningError(
                    f"allele {lab!r} is carried by a known contributor; "
                    "conditioning it absent has zero probability"
                )
            continue  # already certain
        if present and plan.n_unknown == 0:
            raise InfeasibleConditioningError(
                f"no contributor can possess allele {lab!r}"
            )
        mask = np.full(plan.n_combos, -np.inf)
        if present:
            mask[combo_total > 0] = 0.0
        else:
            mask[combo_total == 0] = 0.0
        masks[p] = mask if masks[p] is None else np.maximum(masks[p] + mask, -np.inf)
    return masks


def _as_presence(value) -> bool:
    if isinstance(value, str):
        v = value.strip().lower()
        if v in ("present", "1", "true", "yes"):
            return True
        if v in ("absent", "0", "false", "no"):
            return False
        raise ValueError(f"presence assignment must be present/absent, got {value!r}")
    return bool(value)


# ---------------------------------------------------------------------------
# Public queries


def _plan_for(bundle: EvidenceBundle, marker: str) -> _MarkerPlan:
    try:
        return bundle._plans[marker]
    except KeyError:
        raise KeyError(f"marker {marker!r} not in frequency table") from None


def marker_log_likelihood(bundle: EvidenceBundle, marker: str) -> float:
    """Exact log likelihood of one marker, marginalized over unknown genotypes."""
    plan = _plan_for(bundle, marker)
    pairwise, single = _factor_tables(plan, bundle.parameters)
    lw, _ = _forward(plan, pairwise, single)
    return float(logsumexp(lw))


def total_log_likelihood(
    bundle: EvidenceBundle, max_workers: int | None = None
) -> float:
    """Sum of marker log likelihoods over all markers covered by any trace."""
    markers = bundle.covered_markers()
    if max_workers and max_workers > 1 and len(markers) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            return float(
                sum(pool.map(lambda m: marker_log_likelihood(bundle, m), markers))
            )
    return float(sum(marker_log_likelihood(bundle, m) for m in markers))


def _chain_posterior(bundle, marker, assignments=None, k=0):
    plan = _plan_for(bundle, marker)
    pairwise, single = _factor_tables(plan, bundle.parameters)
    masks = _presence_masks(plan, assignments)
    lw_final, history = _forward(plan, pairwise, single, masks, keep=True)
    loglik = float(logsumexp(lw_final))
    if not np.isfinite(loglik):
        raise InfeasibleConditioningError(
            f"zero probability on marker {marker!r}"
            + (f" under conditioning {dict(assignments)!r}" if assignments else "")
        )
    lb = _backward(plan, pairwise, single, masks)

    n_pos = len(plan.order)
    known_any = plan.known_counts.sum(axis=0)
    presence = {}
    marginals = {role: {} for role in plan.unknown_ids}
    lw_prev = np.zeros(1)
    for t in range(n_pos):
        edges, vals = _step_values(plan, t, pairwise, single, masks)
        post = edges.by_combo.logsumexp(lw_prev[edges.src] + vals + lb[t][edges.dst])
        post = post - loglik
        lab = plan.internal_labels[t]
        if not plan.silent[t]:
            if known_any[t] > 0:
                presence[lab] = 1.0
            elif plan.n_unknown == 0:
                presence[lab] = 0.0
            else:
                presence[lab] = float(min(1.0, max(0.0, -np.expm1(post[0]))))
        for i, role in enumerate(plan.unknown_ids):
            probs = []
            for m in range(3):
                sel = plan.combo_counts[:, i] == m
                probs.append(
                    float(np.exp(logsumexp(post[sel]))) if sel.any() else 0.0
                )
            marginals[role][lab] = tuple(probs)
        lw_prev = history[t]

    ordered_presence = {lab: presence[lab] for lab in plan.labels if lab in presence}
    ordered_marginals = {
        role: {lab: vals[lab] for lab in plan.labels}
        for role, vals in marginals.items()
    }
    top = (
        _kbest_paths(plan, pairwise, single, masks, loglik, k) if k else ()
    )
    return MarkerChainPosterior(
        marker=marker,
        log_likelihood=loglik,
        presence=ordered_presence,
        count_marginals=ordered_marginals,
        top_genotypes=top,
    )


def presence_posteriors(bundle: EvidenceBundle, marker: str) -> Mapping[str, float]:
    """P(Y_a = 1 | z) per visible allele: at least one contributor carries a.

    For an observed peak, P(stutter | z) = 1 - P(Y_a = 1 | z); for an
    unobserved allele, P(dropout | z) = P(Y_a = 1 | z).
    """
    return _chain_posterior(bundle, marker).presence


def conditioned_presence(
    bundle: EvidenceBundle, marker: str, assignments: Mapping[str, object]
) -> MarkerChainPosterior:
    """Posterior and likelihood conditioned on stated presence/absence values.

    assignments maps allele label to 'present'/'absent' (or a boolean).
    Conditioning with zero posterior mass raises
    :class:`InfeasibleConditioningError`.
    """
    return _chain_posterior(bundle, marker, assignments=assignments)


def marker_posterior(
    bundle: EvidenceBundle, marker: str, k: int = 0,
    assignments: Mapping[str, object] | None = None,
) -> MarkerChainPosterior:
    """Full chain posterior for one marker, optionally with a k-best list."""
    return _chain_posterior(bundle, marker, assignments=assignments, k=k)


def top_k_marker_genotypes(bundle: EvidenceBundle, marker: str, k: int):
    """The k most probable unknown genotype combinations for one marker.

    Exact, computed by best-first extension over the chain; probabilities
    are normalized by the marker likelihood.  Asking for more combinations
    than exist returns every combination with positive posterior
    probability (impossible ones are omitted).
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    return _chain_posterior(bundle, marker, k=k).top_genotypes


def _kbest_paths(plan, pairwise, single, masks, loglik, k):
    if plan.n_unknown == 0:
        return (({}, 1.0),)
    n_pos = len(plan.order)

    step_edges = []
    step_vals = []
    for t in range(n_pos):
        edges, vals = _step_values(plan, t, pairwise, single, masks)
        step_edges.append(edges)
        step_vals.append(vals)

    # Max-product backward bounds make the best-first extension exact (A*).
    mb = [None] * n_pos
    mb[n_pos - 1] = np.zeros(plan.n_states)
    for t in range(n_pos - 1, 0, -1):
        edges = step_edges[t]
        mb[t - 1] = edges.by_src.max(step_vals[t] + mb[t][edges.dst])

    out_edges = [[] for _ in range(plan.n_states)]
    for e, s in enumerate(plan.edges.src):
        out_edges[int(s)].append(e)

    counter = itertools.count()
    heap = []
    edges0 = plan.edges0
    for e in range(len(edges0.src)):
        g = float(step_vals[0][e])
        bound = g + mb[0][int(edges0.dst[e])]
        if np.isfinite(bound):
            heapq.heappush(
                heap,
                (-bound, next(counter), 0, int(edges0.dst[e]), g,
                 (int(edges0.combo[e]),)),
            )
    results = []
    while heap and len(results) < k:
        _, _, t, state, g, draws = heapq.heappop(heap)
        if t == n_pos - 1:
            results.append((draws, g))
            continue
        for e in out_edges[state]:
            g2 = g + float(step_vals[t + 1][e])
            bound = g2 + mb[t + 1][int(plan.edges.dst[e])]
            if np.isfinite(bound):
                heapq.heappush(
                    heap,
                    (-bound, next(counter), t + 1, int(plan.edges.dst[e]), g2,
                     draws + (int(plan.edges.combo[e]),)),
                )

    ladder_pos = {lab: i for i, lab in enumerate(plan.labels)}
    out = []
    for draws, score in results:
        assignment = {}
        for i, role in enumerate(plan.unknown_ids):
            alleles = []
            for t, cidx in enumerate(draws):
                alleles.extend([plan.internal_labels[t]] * int(plan.combo_counts[cidx, i]))
            assignment[role] = tuple(sorted(alleles, key=ladder_pos.get))
        out.append((assignment, float(np.exp(score - loglik))))
    return tuple(out)


def top_k_joint_profiles(marker_lists, k: int):
    """Exact top-k full profiles from per-marker ranked genotype lists.

    marker_lists maps marker -> descending list of (assignment,
    probability).  The probability of a full profile is the product of
    its per-marker posteriors; the top-k of that product distribution is
    found by best-first search over the product lattice.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    markers = list(marker_lists)
    lists = []
    for m in markers:
        entries = list(marker_lists[m])
        if not entries:
            raise ValueError(f"empty ranked list for marker {m!r}")
        probs = [p for _, p in entries]
        if any(b > a + 1e-12 for a, b in zip(probs, probs[1:])):
            raise ValueError(f"ranked list for marker {m!r} is not sorted descending")
        lists.append(entries)

    def log_prob(ix):
        total = 0.0
        for lst, i in zip(lists, ix):
            p = lst[i][1]
            if p <= 0.0:
                return -np.inf
            total += math.log(p)
        return total

    start = tuple(0 for _ in markers)
    heap = [(-log_prob(start), start)]
    seen = {start}
    out = []
    while heap and len(out) < k:
        neg, ix = heapq.heappop(heap)
        if not np.isfinite(-neg):
            break
        profile = {m: lists[j][ix[j]][0] for j, m in enumerate(markers)}
        out.append((profile, float(math.exp(-neg))))
        for j in range(len(markers)):
            if ix[j] + 1 < len(lists[j]):
                child = ix[:j] + (ix[j] + 1,) + ix[j + 1:]
                if child not in seen:
                    seen.add(child)
                    heapq.heappush(heap, (-log_prob(child), child))
    return out


# ---------------------------------------------------------------------------
# Brute-force oracle


def _unknown_genotype_space(freqs, marker):
    ladder = freqs.ladder(marker)
    n = len(ladder.alleles)
    counts, priors, pairs = [], [], []
    for i in range(n):
        for j in range(i, n):
            vec = [0] * n
            vec[i] += 1
            vec[j] += 1
            counts.append(vec)
            priors.append(genotype_prior(vec, freqs, marker))
            pairs.append((ladder.alleles[i], ladder.alleles[j]))
    return np.array(counts, dtype=np.int64), np.array(priors), pairs


def brute_force_log_likelihood(
    bundle: EvidenceBundle,
    marker: str,
    max_combinations: int = 10**6,
    presence: Mapping[str, object] | None = None,
) -> float:
    """Marker log likelihood by exhaustive enumeration of unknown genotypes.

    Verification oracle for :func:`marker_log_likelihood`: sums the
    per-combination likelihood times the Hardy-Weinberg prior directly,
    without the chain factorization.  ``presence`` optionally restricts
    the sum to combinations consistent with stated presence/absence
    values, mirroring :func:`conditioned_presence`.
    """
    freqs = bundle.frequencies
    ladder = freqs.ladder(marker)
    hypothesis = bundle.hypothesis
    params = bundle.parameters
    n_unknown = len(hypothesis.unknown)
    geno_counts, geno_priors, _ = _unknown_genotype_space(freqs, marker)
    n_geno = len(geno_priors)
    total = n_geno**n_unknown if n_unknown else 1
    if total > max_combinations:
        raise CombinationBudgetError(
            f"{total} combinations exceed the budget of {max_combinations}"
        )

    n_pos = len(ladder.alleles)
    if n_unknown:
        idx = np.array(
            list(itertools.product(range(n_geno), repeat=n_unknown)), dtype=np.int64
        )
    else:
        idx = np.zeros((1, 0), dtype=np.int64)

    known_ids = tuple(hypothesis.known)
    known_counts = np.zeros((len(known_ids), n_pos), dtype=np.int64)
    for kk, kid in enumerate(known_ids):
        known_counts[kk] = hypothesis.known[kid].counts(marker, ladder)

    succ = np.full(n_pos, -1, dtype=np.int64)
    for p, lab in enumerate(ladder.alleles):
        if lab == SILENT_LABEL:
            continue
        s = stutter_successor(freqs, marker, lab)
        if s is not None:
            succ[p] = s

    loglik = np.zeros(total)
    for u in range(n_unknown):
        loglik += np.log(geno_priors[idx[:, u]])

    for trace in bundle.traces:
        if marker not in trace.heights:
            continue
        roles = set(hypothesis.roles_for(trace.trace_id))
        rho = params.rho_for(trace.trace_id, marker)
        eta = params.eta_for(trace.trace_id)
        xi = params.xi_for_marker(trace.trace_id, marker)
        phi_map = params.phi[trace.trace_id]
        b = np.zeros((total, n_pos))
        for kk, kid in enumerate(known_ids):
            if kid in roles:
                b += phi_map[kid] * known_counts[kk]
        for u, role in enumerate(hypothesis.unknown):
            if role in roles:
                b += phi_map[role] * geno_counts[idx[:, u]]
        b_succ = np.zeros_like(b)
        has = succ >= 0
        b_succ[:, has] = b[:, succ[has]]
        d = (1.0 - xi) * b + xi * b_succ
        row = trace.heights[marker]
        for p, lab in enumerate(ladder.alleles):
            if lab == SILENT_LABEL:
                continue
            z = row.get(lab, 0.0)
            shapes = rho * d[:, p]
            if z >= trace.threshold:
                loglik += gamma_log_pdf(z, shapes, eta)
            else:
                loglik += gamma_log_cdf(trace.threshold, shapes, eta)

    if presence:
        carried = np.broadcast_to(
            known_counts.sum(axis=0), (total, n_pos)
        ).astype(np.int64).copy()
        for u in range(n_unknown):
            carried += geno_counts[idx[:, u]]
        keep = np.ones(total, dtype=bool)
        for allele, value in presence.items():
            p = ladder.index(allele)
            keep &= (carried[:, p] > 0) == _as_presence(value)
        loglik = loglik[keep]
        if not keep.any() or not np.isfinite(logsumexp(loglik)):
            raise InfeasibleConditioningError(
                f"conditioning {dict(presence)!r} has zero probability on {marker!r}"
            )

    return float(logsumexp(loglik))
