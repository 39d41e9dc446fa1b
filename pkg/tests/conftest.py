"""Shared helpers: random case generation and an enumeration oracle.

The oracle here deliberately avoids the engine's chain machinery: it
enumerates unknown genotype combinations directly and scores them with
explicit gamma formulas, so engine results are checked against an
independent computation path.
"""

import itertools
import json
import math
from pathlib import Path

import numpy as np
import pytest
from scipy.special import gammainc, gammaln, logsumexp

import mixref as mx
from mixref import io

DATA = Path(__file__).parent / "data"


# ---------------------------------------------------------------------------
# Independent enumeration oracle


def oracle_log_pdf(z, shape, scale):
    if shape <= 0:
        return -np.inf
    return (shape - 1) * math.log(z) - z / scale - gammaln(shape) - shape * math.log(scale)


def oracle_log_cdf(c, shape, scale):
    if shape <= 0:
        return 0.0
    p = gammainc(shape, c / scale)
    if p > 0.0:
        return math.log(p)
    # deep lower tail: high-precision fallback
    import mpmath

    return float(
        mpmath.log(mpmath.gammainc(shape, 0, c / scale, regularized=True))
    )


def oracle_successor(freqs, marker):
    ladder = freqs.ladder(marker)
    succ = {}
    for lab in ladder.alleles:
        if lab == "0":
            continue
        s = mx.stutter_successor(freqs, marker, lab)
        succ[lab] = ladder.alleles[s] if s is not None else None
    return succ


def oracle_genotypes(freqs, marker):
    """All unknown genotypes as (counts dict, prior)."""
    ladder = freqs.ladder(marker)
    out = []
    for i, a in enumerate(ladder.alleles):
        for b in ladder.alleles[i:]:
            counts = {lab: 0 for lab in ladder.alleles}
            counts[a] += 1
            counts[b] += 1
            qa, qb = ladder.frequency(a), ladder.frequency(b)
            prior = qa * qa if a == b else 2 * qa * qb
            out.append((counts, prior))
    return out


def oracle_table(bundle, marker):
    """Per unknown-genotype-combination (counts-by-role, log weight)."""
    freqs = bundle.frequencies
    hyp = bundle.hypothesis
    params = bundle.parameters
    ladder = freqs.ladder(marker)
    succ = oracle_successor(freqs, marker)
    genos = oracle_genotypes(freqs, marker)
    combos = list(itertools.product(range(len(genos)), repeat=len(hyp.unknown)))
    table = []
    for combo in combos:
        logw = sum(math.log(genos[g][1]) for g in combo)
        counts = {}
        for kid, profile in hyp.known.items():
            vec = profile.counts(marker, ladder)
            counts[kid] = dict(zip(ladder.alleles, vec))
        for role, g in zip(hyp.unknown, combo):
            counts[role] = genos[g][0]
        for trace in bundle.traces:
            if marker not in trace.heights:
                continue
            roles = set(hyp.roles_for(trace.trace_id))
            rho = params.rho_for(trace.trace_id, marker)
            eta = params.eta_for(trace.trace_id)
            xi = params.xi_for_marker(trace.trace_id, marker)
            phi = params.phi[trace.trace_id]
            b = {
                lab: sum(
                    phi.get(r, 0.0) * counts[r][lab]
                    for r in counts
                    if r in roles
                )
                for lab in ladder.alleles
            }
            for lab in ladder.alleles:
                if lab == "0":
                    continue
                dval = (1 - xi) * b[lab]
                if succ[lab] is not None:
                    dval += xi * b[succ[lab]]
                z = trace.height(marker, lab)
                if z >= trace.threshold:
                    logw += oracle_log_pdf(z, rho * dval, eta)
                else:
                    logw += oracle_log_cdf(trace.threshold, rho * dval, eta)
        table.append((counts, logw))
    return table


def oracle_log_likelihood(bundle, marker):
    table = oracle_table(bundle, marker)
    return float(logsumexp([w for _, w in table]))


def oracle_presence(bundle, marker):
    table = oracle_table(bundle, marker)
    total = logsumexp([w for _, w in table])
    ladder = bundle.frequencies.ladder(marker)
    out = {}
    for lab in ladder.alleles:
        if lab == "0":
            continue
        present = [
            w for counts, w in table
            if sum(c[lab] for c in counts.values()) > 0
        ]
        out[lab] = float(np.exp(logsumexp(present) - total)) if present else 0.0
    return out


# ---------------------------------------------------------------------------
# Random case generation


LABEL_POOL = ["6", "7", "8", "9", "9.3", "10", "11", "12"]


def random_case(rng, max_alleles=5, max_unknowns=2, max_traces=2,
                allow_silent=True):
    """A random small evidence bundle with valid parameters."""
    n_alleles = int(rng.integers(2, max_alleles + 1))
    start = int(rng.integers(0, len(LABEL_POOL) - n_alleles))
    labels = LABEL_POOL[start:start + n_alleles]
    q = rng.dirichlet(np.ones(n_alleles) * 2.0)
    freqs = mx.FrequencyTable.from_dict({"M": dict(zip(labels, q))})
    if allow_silent and rng.random() < 0.25:
        freqs = mx.with_silent(freqs, float(rng.uniform(0.02, 0.2)))
    visible = [a for a in freqs.ladder("M").alleles if a != "0"]

    n_unknown = int(rng.integers(0, max_unknowns + 1))
    n_known = int(rng.integers(0 if n_unknown else 1, 3))
    known = {}
    for i in range(n_known):
        pair = rng.choice(visible, size=2, replace=True)
        known[f"K{i+1}"] = mx.GenotypeProfile.from_pairs({"M": tuple(pair)})
    unknown = tuple(f"U{i+1}" for i in range(n_unknown))
    roles = tuple(known) + unknown

    n_traces = int(rng.integers(1, max_traces + 1))
    trace_roles = None
    if n_traces > 1 and len(roles) >= 2 and rng.random() < 0.3:
        # one trace misses one role: exercises the cross-trace sharing map
        short = int(rng.integers(n_traces))
        dropped = roles[int(rng.integers(len(roles)))]
        trace_roles = {
            f"T{short+1}": tuple(r for r in roles if r != dropped)
        }
    traces, rho, phi = [], {}, {}
    for t in range(n_traces):
        tid = f"T{t+1}"
        heights = {}
        for a in visible:
            r = rng.random()
            if r < 0.45:
                continue
            heights[a] = float(rng.uniform(50, 1200)) if r < 0.9 else 0.0
        traces.append(mx.Trace(trace_id=tid, threshold=50.0,
                               heights={"M": heights}))
        rho[tid] = float(rng.uniform(10, 60))
        contributing = roles
        if trace_roles and tid in trace_roles:
            contributing = trace_roles[tid]
        k_here = sum(1 for r in contributing if r in known)
        w = rng.dirichlet(np.ones(len(contributing)))
        w = np.concatenate([w[:k_here], np.sort(w[k_here:])[::-1]])
        phi[tid] = {r: float(x) for r, x in zip(contributing, w)}
    params = mx.ModelParameters(
        rho=rho,
        eta=float(rng.uniform(15, 45)),
        xi=float(rng.uniform(0.0, 0.25)),
        phi=phi,
    )
    hypothesis = mx.Hypothesis(known=known, unknown=unknown,
                               trace_roles=trace_roles)
    return mx.EvidenceBundle(
        traces=tuple(traces), frequencies=freqs,
        hypothesis=hypothesis, parameters=params,
    )


# ---------------------------------------------------------------------------
# Published-case fixtures


@pytest.fixture(scope="session")
def pubcase():
    """Excerpt data (three markers, two traces) with combined-fit parameters."""
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        freqs = io.load_frequency_table(DATA / "pubcase_freqs.csv")
        profiles = io.load_profiles(DATA / "pubcase_profiles.csv")
        rows = io.read_trace_rows(DATA / "pubcase_traces.csv")
        traces = io.build_traces(rows, {"MC15": 50.0, "MC18": 50.0})
    case = io.load_case_definition(DATA / "pubcase_case.json")
    params = io.parameters_from_json(
        json.loads((DATA / "pubcase_params_defence.json").read_text())
    )
    return {
        "freqs": freqs,
        "profiles": profiles,
        "traces": traces,
        "case": case,
        "params": params,
    }


@pytest.fixture(scope="session")
def pubcase_defence_bundle(pubcase):
    hyp = io.build_hypothesis(
        pubcase["case"].hypotheses["defence"], pubcase["profiles"]
    )
    return mx.EvidenceBundle(
        traces=pubcase["traces"],
        frequencies=pubcase["freqs"],
        hypothesis=hyp,
        parameters=pubcase["params"],
    )
