"""Maximum-likelihood fitting, standard errors, and weight-of-evidence.

Parameters are estimated by maximizing the exact marginal likelihood over
the constrained space {rho > 0, eta > 0, xi in [0, 1), phi on the simplex
with unknown fractions non-increasing}.  The optimizer works in
unconstrained internal coordinates (logs, a logit, and a stick-breaking
transform whose unknown block is an ordered split), started from several
dispersed feasible points.  Approximate standard errors come from the
inverse numerical Hessian in the reporting parametrization (mu, sigma,
xi, phi), with boundary-active parameters handled by a restricted model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import minimize

from .engine import EvidenceBundle, Hypothesis, total_log_likelihood
from .peakmodel import ModelParameters, params_from_mean_cv
from .population import FrequencyTable, GenotypeProfile, match_probability

__all__ = [
    "FitSpecification",
    "FitResult",
    "fit",
    "standard_errors",
    "weight_of_evidence",
    "efficiency_loss",
    "generic_efficiency_loss",
    "profile_likelihood",
    "ProfileCurve",
    "contributor_sweep",
    "numeric_hessian",
    "numeric_gradient",
]

LOG10 = math.log(10.0)
_BOUNDARY_TOL = 1e-4
_PENALTY = 1e15


# ---------------------------------------------------------------------------
# Specification and result containers


@dataclass(frozen=True)
class FitSpecification:
    """What to fit and how.

    share
        Which of rho, eta, xi, phi use a single value across traces.
        Default shares eta and xi, leaving rho and phi per trace.
    fixed
        Overrides removed from the optimization, e.g.
        {"xi": 0.079, "eta": 28.8} or {"rho": {"T1": 30.0}} or
        {"phi": {"T1": {"K1": 0.8, "U1": 0.2}}}.  "mu" and "sigma" may be
        given together per trace instead of rho/eta.
    parametrization
        Internal coordinates: "rho_eta" (log rho, log eta) or "mu_sigma"
        (log sigma, log mu).  Both reach the same optimum.
    """

    bundle: EvidenceBundle
    share: frozenset[str] = frozenset({"eta", "xi"})
    fixed: Mapping[str, object] = field(default_factory=dict)
    parametrization: str = "rho_eta"
    tolerance: float = 1e-8
    max_iterations: int = 1000
    n_starts: int = 3
    seed: int = 0
    extra_starts: tuple[ModelParameters, ...] = ()
    compute_standard_errors: bool = True
    max_workers: int | None = None

    def __post_init__(self):
        bad = set(self.share) - {"rho", "eta", "xi", "phi"}
        if bad:
            raise ValueError(f"unknown share entries: {sorted(bad)}")
        if self.parametrization not in ("rho_eta", "mu_sigma"):
            raise ValueError(f"unknown parametrization {self.parametrization!r}")
        object.__setattr__(self, "share", frozenset(self.share))
        object.__setattr__(self, "extra_starts", tuple(self.extra_starts))


@dataclass(frozen=True)
class FitResult:
    """A fitted model with reporting-scale estimates and diagnostics."""

    parameters: ModelParameters
    log_likelihood: float
    log10_likelihood: float
    estimates: Mapping[str, Mapping[str, object]]
    standard_errors: Mapping[str, Mapping[str, object]] | None
    boundary: Mapping[str, Mapping[str, object]]
    converged: bool
    iterations: int
    n_evaluations: int
    final_gradient_norm: float | None
    hypothesis_id: str | None = None
    bundle: EvidenceBundle = field(repr=False, compare=False, default=None)


# ---------------------------------------------------------------------------
# Parameter structure: blocks of shared values and coordinate transforms


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def _logit(p):
    p = min(max(p, 1e-12), 1.0 - 1e-12)
    return math.log(p / (1.0 - p))


def _stick_break(thetas, n_items):
    # theta = 0 everywhere gives the uniform split
    weights = np.empty(n_items)
    rem = 1.0
    for j in range(n_items - 1):
        v = float(_sigmoid(thetas[j] - math.log(n_items - j - 1)))
        weights[j] = rem * v
        rem *= 1.0 - v
    weights[-1] = rem
    return weights


def _stick_invert(weights):
    n_items = len(weights)
    thetas = np.empty(max(n_items - 1, 0))
    rem = 1.0
    for j in range(n_items - 1):
        v = weights[j] / rem if rem > 0 else 0.0
        thetas[j] = _logit(v) + math.log(n_items - j - 1)
        rem -= weights[j]
    return thetas


def _phi_from_theta(theta, n_known, n_unknown):
    n_items = n_known + (1 if n_unknown else 0)
    outer = _stick_break(theta[: max(n_items - 1, 0)], n_items)
    if n_unknown == 0:
        return outer
    block = outer[-1]
    if n_unknown == 1:
        parts = np.array([block])
    else:
        ratios = _sigmoid(theta[n_items - 1:])
        u = np.concatenate([[1.0], np.cumprod(ratios)])
        parts = block * u / u.sum()
    return np.concatenate([outer[:-1], parts])


def _theta_from_phi(phi, n_known, n_unknown):
    phi = np.asarray(phi, dtype=float)
    n_items = n_known + (1 if n_unknown else 0)
    if n_unknown == 0:
        return _stick_invert(phi)
    block = max(phi[n_known:].sum(), 1e-12)
    outer = np.concatenate([phi[:n_known], [block]])
    theta = list(_stick_invert(outer))
    if n_unknown > 1:
        parts = np.maximum(phi[n_known:], 1e-15)
        for j in range(n_unknown - 1):
            theta.append(_logit(min(parts[j + 1] / parts[j], 1.0 - 1e-12)))
    return np.array(theta)


@dataclass(frozen=True)
class _Block:
    family: str
    traces: tuple[str, ...]
    fixed: float | None


@dataclass(frozen=True)
class _PhiBlock:
    traces: tuple[str, ...]
    roles: tuple[str, ...]
    n_known: int
    fixed: tuple[float, ...] | None

    @property
    def n_unknown(self):
        return len(self.roles) - self.n_known

    @property
    def n_free(self):
        if self.fixed is not None:
            return 0
        k, m = self.n_known, self.n_unknown
        if m == 0:
            return max(k - 1, 0)
        return k + m - 1


def _normalize_fixed(fixed, trace_ids):
    """Expand fixed overrides into per-family {trace: value} maps."""
    fixed = dict(fixed or {})
    out = {"rho": {}, "eta": {}, "xi": {}, "phi": {}}
    if ("mu" in fixed) != ("sigma" in fixed):
        raise ValueError("fix mu and sigma together (they determine rho and eta)")
    if "mu" in fixed:
        mu, sig = fixed.pop("mu"), fixed.pop("sigma")
        mu = {t: mu for t in trace_ids} if np.isscalar(mu) else dict(mu)
        sig = {t: sig for t in trace_ids} if np.isscalar(sig) else dict(sig)
        if set(mu) != set(sig):
            raise ValueError("mu and sigma overrides must cover the same traces")
        for t in mu:
            rho, eta = params_from_mean_cv(mu[t], sig[t])
            out["rho"][t] = rho
            out["eta"][t] = eta
    for family in ("rho", "eta", "xi"):
        if family in fixed:
            val = fixed.pop(family)
            vals = {t: val for t in trace_ids} if np.isscalar(val) else dict(val)
            out[family].update(vals)
    if "phi" in fixed:
        val = fixed.pop("phi")
        out["phi"] = {t: dict(v) for t, v in val.items()}
    if fixed:
        raise ValueError(f"unknown fixed-parameter keys: {sorted(fixed)}")
    return out


class _Structure:
    """Mapping between unconstrained coordinates and ModelParameters."""

    def __init__(self, spec: FitSpecification, mu_anchor: Mapping[int, str] | None = None):
        bundle = spec.bundle
        self.bundle = bundle
        self.mode = spec.parametrization
        self.trace_ids = tuple(t.trace_id for t in bundle.traces)
        self.hypothesis = bundle.hypothesis
        # per-marker overrides are data-level constants that survive the fit
        self.marker_rho = bundle.parameters.marker_rho
        self.marker_xi = bundle.parameters.marker_xi
        fixed = _normalize_fixed(spec.fixed, self.trace_ids)

        def scalar_blocks(family):
            groups = (
                [self.trace_ids] if family in spec.share
                else [(t,) for t in self.trace_ids]
            )
            blocks = []
            for traces in groups:
                vals = {fixed[family][t] for t in traces if t in fixed[family]}
                if len(vals) > 1:
                    raise ValueError(
                        f"conflicting fixed {family} values for shared traces {traces}"
                    )
                have = [t in fixed[family] for t in traces]
                if any(have) and not all(have):
                    raise ValueError(
                        f"fixed {family} must cover all traces sharing a value: {traces}"
                    )
                blocks.append(_Block(family, tuple(traces),
                                     vals.pop() if vals else None))
            return blocks

        self.rho_blocks = scalar_blocks("rho")
        self.eta_blocks = scalar_blocks("eta")
        self.xi_blocks = scalar_blocks("xi")

        phi_groups = (
            [self.trace_ids] if "phi" in spec.share
            else [(t,) for t in self.trace_ids]
        )
        self.phi_blocks = []
        for traces in phi_groups:
            role_sets = {self.hypothesis.roles_for(t) for t in traces}
            if len(role_sets) > 1:
                raise ValueError(
                    "phi can only be shared across traces with identical roles"
                )
            roles = role_sets.pop()
            n_known = sum(1 for r in roles if r in self.hypothesis.known)
            if tuple(r for r in roles if r in self.hypothesis.known) != roles[:n_known]:
                raise AssertionError("roles_for must list knowns first")
            fixed_vec = None
            have = [t in fixed["phi"] for t in traces]
            if any(have):
                if not all(have):
                    raise ValueError(
                        f"fixed phi must cover all traces sharing it: {traces}"
                    )
                vecs = []
                for t in traces:
                    fmap = fixed["phi"][t]
                    if set(fmap) != set(roles):
                        raise ValueError(
                            f"fixed phi for {t!r} must cover roles {list(roles)}"
                        )
                    vecs.append(tuple(float(fmap[r]) for r in roles))
                if len(set(vecs)) > 1:
                    raise ValueError(
                        f"conflicting fixed phi for shared traces {traces}"
                    )
                fixed_vec = vecs[0]
            self.phi_blocks.append(_PhiBlock(tuple(traces), roles, n_known, fixed_vec))

        # anchor trace for each eta block's mu coordinate in mu_sigma mode
        self.mu_anchor = {}
        for i, blk in enumerate(self.eta_blocks):
            anchor = (mu_anchor or {}).get(i, blk.traces[0])
            if anchor not in blk.traces:
                raise ValueError(f"mu anchor {anchor!r} not in eta block {blk.traces}")
            self.mu_anchor[i] = anchor

        self.n_free = (
            sum(b.fixed is None for b in self.rho_blocks)
            + sum(b.fixed is None for b in self.eta_blocks)
            + sum(b.fixed is None for b in self.xi_blocks)
            + sum(b.n_free for b in self.phi_blocks)
        )

    def _rho_block_of(self, trace_id):
        for b in self.rho_blocks:
            if trace_id in b.traces:
                return b
        raise KeyError(trace_id)

    def unpack(self, theta) -> ModelParameters:
        theta = np.asarray(theta, dtype=float)
        i = 0
        rho_vals = {}
        for b in self.rho_blocks:
            if b.fixed is not None:
                val = b.fixed
            elif self.mode == "rho_eta":
                val = math.exp(theta[i]); i += 1
            else:  # log sigma coordinate
                val = math.exp(-2.0 * theta[i]); i += 1
            for t in b.traces:
                rho_vals[t] = val
        eta_vals = {}
        for bi, b in enumerate(self.eta_blocks):
            if b.fixed is not None:
                val = b.fixed
            elif self.mode == "rho_eta":
                val = math.exp(theta[i]); i += 1
            else:  # log mu coordinate, anchored at one trace's rho
                val = math.exp(theta[i]) / rho_vals[self.mu_anchor[bi]]; i += 1
            for t in b.traces:
                eta_vals[t] = val
        xi_vals = {}
        for b in self.xi_blocks:
            if b.fixed is not None:
                val = b.fixed
            else:
                val = float(_sigmoid(theta[i])); i += 1
            for t in b.traces:
                xi_vals[t] = val
        phi_vals = {}
        for blk in self.phi_blocks:
            if blk.fixed is not None:
                vec = np.asarray(blk.fixed)
            else:
                nf = blk.n_free
                vec = _phi_from_theta(theta[i:i + nf], blk.n_known, blk.n_unknown)
                i += nf
            vec = np.maximum(vec, 0.0)
            vec = vec / vec.sum()
            for t in blk.traces:
                phi_vals[t] = dict(zip(blk.roles, (float(x) for x in vec)))
        if i != len(theta):
            raise AssertionError(f"consumed {i} of {len(theta)} coordinates")
        return ModelParameters(
            rho=rho_vals, eta=eta_vals, xi=xi_vals, phi=phi_vals,
            marker_rho=self.marker_rho, marker_xi=self.marker_xi,
        )

    def pack(self, params: ModelParameters) -> np.ndarray:
        theta = []
        for b in self.rho_blocks:
            if b.fixed is None:
                rho = params.rho[b.traces[0]]
                theta.append(
                    math.log(rho) if self.mode == "rho_eta"
                    else -0.5 * math.log(rho)
                )
        for bi, b in enumerate(self.eta_blocks):
            if b.fixed is None:
                eta = params.eta_for(b.traces[0])
                if self.mode == "rho_eta":
                    theta.append(math.log(eta))
                else:
                    theta.append(math.log(eta * params.rho[self.mu_anchor[bi]]))
        for b in self.xi_blocks:
            if b.fixed is None:
                theta.append(_logit(params.xi_for(b.traces[0])))
        for blk in self.phi_blocks:
            if blk.fixed is None:
                vec = [params.phi[blk.traces[0]][r] for r in blk.roles]
                theta.extend(_theta_from_phi(vec, blk.n_known, blk.n_unknown))
        return np.array(theta, dtype=float)


# ---------------------------------------------------------------------------
# Starting points


def _data_mu0(bundle, traces):
    vals = []
    for t in bundle.traces:
        if t.trace_id not in traces:
            continue
        for marker in t.markers():
            total = sum(t.heights[marker].values())
            if total > 0:
                vals.append(total / 2.0)
    if not vals:
        return 2.0 * max(t.threshold for t in bundle.traces)
    return float(np.mean(vals))


def _phi_policy(n_known, n_unknown, policy):
    k, m = n_known, n_unknown
    if k + m == 1:
        return np.ones(1)
    if policy == "equal":
        return np.full(k + m, 1.0 / (k + m))
    if policy == "known_heavy":
        known_mass = 0.9 if (k and m) else 1.0
    else:
        known_mass = 0.1 if (k and m) else 1.0
    out = np.empty(k + m)
    if k:
        out[:k] = known_mass / k
    block = 1.0 - known_mass if k else 1.0
    if m:
        ratio = 0.5 if policy == "known_heavy" else 0.4
        u = ratio ** np.arange(m)
        out[k:] = block * u / u.sum()
    return out


def _starting_points(spec: FitSpecification, structure: _Structure):
    bundle = spec.bundle
    starts = []
    mu_scale = [1.0]
    base = {}
    for b in structure.rho_blocks:
        base[("mu0", b.traces)] = _data_mu0(bundle, set(b.traces))
    policies = ["equal", "known_heavy", "unknown_heavy"]

    def build(policy, scale):
        rho_vals, eta_vals, xi_vals, phi_vals = {}, {}, {}, {}
        sigma0 = 0.25
        for b in structure.rho_blocks:
            mu0 = base[("mu0", b.traces)] * scale
            rho = b.fixed if b.fixed is not None else 1.0 / sigma0**2
            for t in b.traces:
                rho_vals[t] = rho
        for bi, b in enumerate(structure.eta_blocks):
            if b.fixed is not None:
                eta = b.fixed
            else:
                anchor = structure.mu_anchor[bi]
                mu0 = base[("mu0", structure._rho_block_of(anchor).traces)] * scale
                eta = mu0 / rho_vals[anchor]
            for t in b.traces:
                eta_vals[t] = eta
        for b in structure.xi_blocks:
            xi = b.fixed if b.fixed is not None else 0.05
            for t in b.traces:
                xi_vals[t] = xi
        for blk in structure.phi_blocks:
            if blk.fixed is not None:
                vec = blk.fixed
            else:
                vec = _phi_policy(blk.n_known, blk.n_unknown, policy)
            for t in blk.traces:
                phi_vals[t] = dict(zip(blk.roles, (float(x) for x in vec)))
        return ModelParameters(rho=rho_vals, eta=eta_vals, xi=xi_vals, phi=phi_vals)

    for policy in policies:
        starts.append(build(policy, 1.0))
    thetas = []
    seen = set()
    for p in starts:
        th = structure.pack(p)
        key = tuple(np.round(th, 9))
        if key not in seen:
            seen.add(key)
            thetas.append(th)
    scale_idx = 0
    scales = [0.5, 2.0, 0.25]
    while len(thetas) < min(spec.n_starts, 3) and scale_idx < len(scales):
        th = structure.pack(build("equal", scales[scale_idx]))
        scale_idx += 1
        key = tuple(np.round(th, 9))
        if key not in seen:
            seen.add(key)
            thetas.append(th)
    for extra in spec.extra_starts:
        th = structure.pack(extra)
        key = tuple(np.round(th, 9))
        if key not in seen:
            seen.add(key)
            thetas.append(th)
    if spec.n_starts > len(thetas):
        rng = np.random.default_rng(spec.seed)
        while len(thetas) < spec.n_starts:
            thetas.append(thetas[0] + rng.normal(0.0, 0.3, size=len(thetas[0])))
    return thetas


# ---------------------------------------------------------------------------
# Fitting


def fit(spec: FitSpecification, hypothesis_id: str | None = None) -> FitResult:
    """Maximize the total log likelihood under the specification's constraints.

    Deterministic given the specification (including its seed).  Runs a
    multistart local search from dispersed feasible points plus any
    extra_starts, keeps the best, and flags non-convergence rather than
    failing.  With every parameter fixed, returns the exact likelihood of
    the overrides.
    """
    structure = _Structure(spec)
    bundle = spec.bundle
    evals = [0]

    def objective(theta):
        evals[0] += 1
        try:
            params = structure.unpack(theta)
            ll = total_log_likelihood(
                bundle.with_parameters(params), spec.max_workers
            )
        except (ValueError, OverflowError, FloatingPointError):
            return _PENALTY
        if not np.isfinite(ll):
            return _PENALTY
        return -ll

    if structure.n_free == 0:
        params = structure.unpack(np.empty(0))
        ll = total_log_likelihood(bundle.with_parameters(params), spec.max_workers)
        return _finish(spec, structure, params, ll, True, 0, 1, None, hypothesis_id)

    best = None
    total_iters = 0
    for theta0 in _starting_points(spec, structure):
        res = minimize(
            objective,
            theta0,
            method="L-BFGS-B",
            options={
                "maxiter": spec.max_iterations,
                "ftol": spec.tolerance,
                "gtol": 1e-7,
                "eps": 1e-6,
                "maxcor": 25,
            },
        )
        total_iters += int(res.nit)
        if best is None or res.fun < best.fun:
            best = res
    if not best.success and best.fun < _PENALTY:
        polish = minimize(
            objective,
            best.x,
            method="Nelder-Mead",
            options={
                "maxiter": spec.max_iterations * 4,
                "fatol": max(abs(best.fun), 1.0) * spec.tolerance,
                "xatol": 1e-7,
            },
        )
        total_iters += int(polish.nit)
        if polish.fun <= best.fun:
            best = polish

    params = structure.unpack(best.x)
    ll = total_log_likelihood(bundle.with_parameters(params), spec.max_workers)
    grad = numeric_gradient(lambda th: -objective(th), best.x, rel_step=1e-5)
    converged = bool(
        (best.success or np.linalg.norm(grad) < 1e-2) and np.isfinite(ll)
    )
    return _finish(
        spec, structure, params, ll, converged,
        total_iters, evals[0], float(np.linalg.norm(grad)), hypothesis_id,
    )


def _finish(spec, structure, params, ll, converged, iters, evals, gnorm, hyp_id):
    estimates = _reporting_estimates(params, structure)
    boundary = _boundary_flags(params, structure)
    result = FitResult(
        parameters=params,
        log_likelihood=ll,
        log10_likelihood=ll / LOG10,
        estimates=estimates,
        standard_errors=None,
        boundary=boundary,
        converged=converged,
        iterations=iters,
        n_evaluations=evals,
        final_gradient_norm=gnorm,
        hypothesis_id=hyp_id,
        bundle=spec.bundle,
    )
    if spec.compute_standard_errors and structure.n_free > 0:
        ses = standard_errors(result, spec)
        result = replace(result, standard_errors=ses)
    return result


def _reporting_estimates(params, structure):
    out = {}
    for t in structure.trace_ids:
        out[t] = {
            "mu": params.mu_for(t),
            "sigma": params.sigma_for(t),
            "xi": params.xi_for(t),
            "phi": {
                r: params.phi[t][r]
                for r in structure.hypothesis.roles_for(t)
            },
        }
    return out


def _boundary_flags(params, structure):
    flags = {}
    for t in structure.trace_ids:
        xi_flag = params.xi_for(t) < _BOUNDARY_TOL
        phi_flags = {}
        roles = structure.hypothesis.roles_for(t)
        unknowns = [r for r in roles if r in structure.hypothesis.unknown]
        vals = params.phi[t]
        for i, r in enumerate(unknowns):
            at_zero = vals[r] < _BOUNDARY_TOL
            tied = (
                i + 1 < len(unknowns)
                and abs(vals[r] - vals[unknowns[i + 1]]) < _BOUNDARY_TOL
            ) or (
                i > 0 and abs(vals[r] - vals[unknowns[i - 1]]) < _BOUNDARY_TOL
            )
            phi_flags[r] = bool(at_zero or tied)
        for r in roles:
            phi_flags.setdefault(r, False)
        flags[t] = {"xi": bool(xi_flag), "phi": phi_flags}
    return flags


# ---------------------------------------------------------------------------
# Numerical derivatives


def numeric_gradient(f, x, rel_step=1e-4, abs_floor=1e-6):
    """Central-difference gradient with per-coordinate relative steps."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    h = np.maximum(rel_step * np.abs(x), abs_floor)
    g = np.empty(n)
    for i in range(n):
        e = np.zeros(n)
        e[i] = h[i]
        g[i] = (f(x + e) - f(x - e)) / (2.0 * h[i])
    return g


def numeric_hessian(f, x, rel_step=1e-4, abs_floor=1e-6):
    """Central-difference Hessian with per-coordinate relative steps.

    Steps are max(rel_step * |x_i|, abs_floor) per coordinate, diagonal
    terms from the three-point second difference and off-diagonals from
    the four-point cross difference.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    h = np.maximum(rel_step * np.abs(x), abs_floor)
    H = np.empty((n, n))
    f0 = f(x)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h[i]
        H[i, i] = (f(x + ei) - 2.0 * f0 + f(x - ei)) / h[i] ** 2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = h[j]
            val = (
                f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
            ) / (4.0 * h[i] * h[j])
            H[i, j] = H[j, i] = val
    return H


def _numeric_jacobian(f, x, rel_step=1e-4, abs_floor=1e-6):
    x = np.asarray(x, dtype=float)
    n = len(x)
    h = np.maximum(rel_step * np.abs(x), abs_floor)
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = h[i]
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2.0 * h[i]))
    return np.column_stack(cols) if cols else np.empty((0, 0))


# ---------------------------------------------------------------------------
# Standard errors in the reporting parametrization


class _ReportingChart:
    """Free reporting coordinates (sigma, mu, xi, phi) around a fitted point.

    Boundary-active parameters are restricted: unknown fractions within
    tolerance of zero are fixed there, runs of tied unknown fractions
    collapse to a single unit that moves together, and xi at zero is
    fixed.  Each phi block's roles partition into units (single roles or
    tied groups); all units but the heaviest are free coordinates and the
    heaviest completes the simplex.  The chart maps a free coordinate
    vector to ModelParameters and to the full list of reported quantities
    for delta-method standard errors.
    """

    def __init__(self, structure: _Structure, params: ModelParameters):
        self.structure = structure
        self.params = params
        self.coords = []
        self.values = []
        for b in structure.rho_blocks:
            if b.fixed is None:
                self.coords.append(("sigma", b.traces))
                self.values.append(params.sigma_for(b.traces[0]))
        for bi, b in enumerate(structure.eta_blocks):
            if b.fixed is None:
                self.coords.append(("mu", structure.mu_anchor[bi]))
                self.values.append(params.mu_for(structure.mu_anchor[bi]))
        self.xi_free = []
        for b in structure.xi_blocks:
            free = b.fixed is None and params.xi_for(b.traces[0]) >= _BOUNDARY_TOL
            self.xi_free.append(free)
            if free:
                self.coords.append(("xi", b.traces))
                self.values.append(params.xi_for(b.traces[0]))
        # phi: partition each block's roles into units; the heaviest unit
        # is dependent, zero-pinned roles are excluded, the rest are free
        self.phi_layout = []
        for blk in structure.phi_blocks:
            if blk.fixed is not None:
                self.phi_layout.append((blk, None))
                continue
            vec = np.array([params.phi[blk.traces[0]][r] for r in blk.roles])
            n = len(blk.roles)
            zero = [
                i for i in range(blk.n_known, n) if vec[i] < _BOUNDARY_TOL
            ]
            units = []
            run = []
            for i in range(n):
                if i in zero:
                    continue
                is_unknown = i >= blk.n_known
                if (
                    run
                    and is_unknown
                    and run[-1] >= blk.n_known
                    and abs(vec[i] - vec[run[-1]]) < _BOUNDARY_TOL
                ):
                    run.append(i)
                else:
                    if run:
                        units.append(tuple(run))
                    run = [i]
            if run:
                units.append(tuple(run))
            if not units:
                raise ValueError("every fraction at zero; simplex cannot close")
            masses = [len(u) * vec[u[0]] for u in units]
            dep = int(np.argmax(masses))
            for ui, unit in enumerate(units):
                if ui == dep:
                    continue
                self.coords.append(("phi", (blk.traces, unit)))
                self.values.append(vec[unit[0]])
            self.phi_layout.append((blk, (vec, zero, units, dep)))
        self.values = np.array(self.values, dtype=float)

    def build_params(self, v) -> ModelParameters:
        structure = self.structure
        vals = list(v)
        cursor = 0
        rho_vals, eta_vals, xi_vals, phi_vals = {}, {}, {}, {}
        for b in structure.rho_blocks:
            if b.fixed is not None:
                rho = b.fixed
            else:
                sigma = vals[cursor]; cursor += 1
                if sigma <= 0:
                    raise ValueError("sigma stepped out of range")
                rho = 1.0 / sigma**2
            for t in b.traces:
                rho_vals[t] = rho
        for bi, b in enumerate(structure.eta_blocks):
            if b.fixed is not None:
                eta = b.fixed
            else:
                mu = vals[cursor]; cursor += 1
                eta = mu / rho_vals[structure.mu_anchor[bi]]
                if eta <= 0:
                    raise ValueError("eta stepped out of range")
            for t in b.traces:
                eta_vals[t] = eta
        for b, free in zip(structure.xi_blocks, self.xi_free):
            if b.fixed is not None:
                xi = b.fixed
            elif free:
                xi = vals[cursor]; cursor += 1
            else:
                xi = self.params.xi_for(b.traces[0])
            for t in b.traces:
                xi_vals[t] = xi
        for blk, layout in self.phi_layout:
            if layout is None:
                vec = np.asarray(blk.fixed, dtype=float)
            else:
                base, zero, units, dep = layout
                vec = base.copy()
                for i in zero:
                    vec[i] = 0.0
                other_mass = 0.0
                for ui, unit in enumerate(units):
                    if ui == dep:
                        continue
                    uval = vals[cursor]; cursor += 1
                    for i in unit:
                        vec[i] = uval
                    other_mass += len(unit) * uval
                dep_unit = units[dep]
                dep_val = (1.0 - other_mass) / len(dep_unit)
                if dep_val < 0:
                    raise ValueError("phi stepped off the simplex")
                for i in dep_unit:
                    vec[i] = dep_val
            for t in blk.traces:
                phi_vals[t] = dict(zip(blk.roles, (float(x) for x in vec)))
        if cursor != len(vals):
            raise AssertionError("reporting chart consumed wrong coordinate count")
        return ModelParameters(
            rho=rho_vals, eta=eta_vals, xi=xi_vals, phi=phi_vals,
            marker_rho=structure.marker_rho, marker_xi=structure.marker_xi,
        )

    def report_vector(self, v):
        params = self.build_params(v)
        out = []
        for t in self.structure.trace_ids:
            out.append(params.mu_for(t))
            out.append(params.sigma_for(t))
            out.append(params.xi_for(t))
            for r in self.structure.hypothesis.roles_for(t):
                out.append(params.phi[t][r])
        return np.array(out)

    def report_labels(self):
        labels = []
        for t in self.structure.trace_ids:
            labels.append((t, "mu", None))
            labels.append((t, "sigma", None))
            labels.append((t, "xi", None))
            for r in self.structure.hypothesis.roles_for(t):
                labels.append((t, "phi", r))
        return labels


def standard_errors(result: FitResult, spec: FitSpecification):
    """Approximate standard errors from the inverse Hessian at the fit.

    The Hessian of the log likelihood is taken by central differences in
    the reporting parametrization (mu, sigma, xi, phi), boundary-active
    parameters restricted as flagged; reported quantities that are
    functions of several coordinates (for example sigma of a non-anchor
    trace under a shared eta) get delta-method errors.  Parameters fixed
    by override carry no standard error.  A non-invertible Hessian yields
    None for every free parameter.
    """
    structure = _Structure(spec)
    chart = _ReportingChart(structure, result.parameters)
    trace_ids = structure.trace_ids
    empty = {
        t: {"mu": None, "sigma": None, "xi": None,
            "phi": {r: None for r in structure.hypothesis.roles_for(t)}}
        for t in trace_ids
    }
    if len(chart.values) == 0:
        return empty

    bundle = spec.bundle

    def ll_of(v):
        try:
            params = chart.build_params(v)
        except ValueError:
            return -_PENALTY
        return total_log_likelihood(bundle.with_parameters(params), spec.max_workers)

    hessian = numeric_hessian(ll_of, chart.values)
    try:
        cov = np.linalg.inv(-hessian)
    except np.linalg.LinAlgError:
        return empty
    diag = np.diag(cov)
    if not np.all(np.isfinite(diag)):
        return empty

    jac = _numeric_jacobian(chart.report_vector, chart.values)
    var = np.einsum("ij,jk,ik->i", jac, cov, jac)
    labels = chart.report_labels()

    out = {t: {"mu": None, "sigma": None, "xi": None, "phi": {}} for t in trace_ids}
    fixed = _normalize_fixed(spec.fixed, trace_ids)
    for (t, kind, role), v in zip(labels, var):
        se = float(math.sqrt(v)) if v >= 0 and np.isfinite(v) else None
        if kind == "phi":
            for blk, lay in chart.phi_layout:
                if t in blk.traces:
                    if lay is None:  # fixed by override
                        se = None
                    else:
                        _, zero, _, _ = lay
                        if blk.roles.index(role) in zero:
                            se = None
                    break
            out[t]["phi"][role] = se
        elif kind == "xi":
            if t in fixed["xi"] or (result.parameters.xi_for(t) < _BOUNDARY_TOL):
                se = None
            out[t]["xi"] = se
        elif kind == "mu":
            if t in fixed["rho"] and t in fixed["eta"]:
                se = None
            out[t]["mu"] = se
        elif kind == "sigma":
            if t in fixed["rho"]:
                se = None
            out[t]["sigma"] = se
    return out


# ---------------------------------------------------------------------------
# Weight of evidence


def weight_of_evidence(fit_p: FitResult, fit_d: FitResult) -> float:
    """log10 L(Hp) - log10 L(Hd) in bans, for fits on the same evidence."""
    if fit_p.bundle is None or fit_d.bundle is None:
        raise ValueError("fit results must carry their evidence bundles")
    if not fit_p.bundle.same_evidence(fit_d.bundle):
        raise ValueError("weight of evidence needs both fits on the same evidence")
    return fit_p.log10_likelihood - fit_d.log10_likelihood


def efficiency_loss(
    woe: float,
    suspect_profile: GenotypeProfile,
    freqs: FrequencyTable,
    markers: Sequence[str] | None = None,
) -> float:
    """Bans lost relative to a perfect single-source match: -log10 pi_s - WoE.

    Nonnegative whenever the hypothesis pair replaces the suspect by a
    random unknown, also with parameters estimated per hypothesis.
    """
    profile = suspect_profile
    if markers is not None:
        profile = GenotypeProfile(
            genotypes={
                m: suspect_profile.genotypes[m]
                for m in markers
                if m in suspect_profile.genotypes
            }
        )
    pi = match_probability(profile, freqs)
    return -math.log10(pi) - woe


def generic_efficiency_loss(top_posterior: float) -> float:
    """Bans lost without a named suspect: -log10 of the top deconvolution posterior."""
    if top_posterior <= 0.0:
        raise ValueError("top posterior probability must be positive")
    if top_posterior > 1.0 + 1e-9:
        raise ValueError(f"posterior probability above one: {top_posterior}")
    return -math.log10(min(top_posterior, 1.0))


# ---------------------------------------------------------------------------
# Profile likelihood


@dataclass(frozen=True)
class ProfileCurve:
    """Profile log10 likelihood over a grid, with a likelihood-ratio interval."""

    parameter: str
    grid: tuple[float, ...]
    log10_likelihood: tuple[float, ...]
    converged: tuple[bool, ...]
    max_log10_likelihood: float
    interval95: tuple[float, float] | None

    DROP95 = 0.5 * 3.841458820694124 / LOG10  # chi2_1(0.95) / 2, in bans


def _parse_parameter_name(name, trace_ids):
    base, _, trace = name.partition("@")
    base = base.strip()
    if base not in ("xi", "eta", "rho", "mu", "sigma"):
        raise ValueError(f"cannot profile parameter {name!r}")
    trace = trace.strip() or None
    if trace is not None and trace not in trace_ids:
        raise ValueError(f"unknown trace {trace!r} in parameter name {name!r}")
    return base, trace


def profile_likelihood(spec: FitSpecification, name: str, grid) -> ProfileCurve:
    """Fix one scalar parameter at each grid value and maximize the rest.

    ``name`` is one of xi, eta, rho, mu, sigma, optionally trace-qualified
    as "mu@T1".  The 95% interval inverts the likelihood-ratio test:
    grid values whose profile stays within chi2_1(0.95)/(2 ln 10) = 0.834
    bans of the maximum, with linear interpolation at the crossings.
    """
    trace_ids = tuple(t.trace_id for t in spec.bundle.traces)
    base, trace = _parse_parameter_name(name, trace_ids)
    mode = "mu_sigma" if base in ("mu", "sigma") else "rho_eta"
    targets = [trace] if trace else list(trace_ids)

    points = []
    conv = []
    prev_params = None
    for value in grid:
        fixed = dict(spec.fixed)
        if base in ("mu", "sigma"):
            # fix the named quantity and let its partner stay free: handled
            # by fixing the matching internal coordinate below
            pass
        extra = list(spec.extra_starts)
        if prev_params is not None:
            extra.append(prev_params)
        sub = replace(
            spec,
            fixed=_with_scalar_fixed(fixed, base, targets, value, trace_ids, spec),
            parametrization=mode,
            extra_starts=tuple(extra),
            compute_standard_errors=False,
        )
        try:
            res = _fit_profile_point(sub, base, targets, value)
            points.append(res.log10_likelihood)
            conv.append(res.converged)
            prev_params = res.parameters
        except ValueError:
            points.append(-np.inf)
            conv.append(False)
    points = tuple(float(p) for p in points)
    gmax = max(points)
    threshold = gmax - ProfileCurve.DROP95
    interval = _lr_interval(tuple(grid), points, threshold)
    return ProfileCurve(
        parameter=name,
        grid=tuple(float(g) for g in grid),
        log10_likelihood=points,
        converged=tuple(conv),
        max_log10_likelihood=gmax,
        interval95=interval,
    )


def _with_scalar_fixed(fixed, base, targets, value, trace_ids, spec):
    fixed = dict(fixed)
    if base in ("rho", "eta", "xi"):
        cur = dict(fixed.get(base, {})) if isinstance(fixed.get(base), Mapping) else {}
        if base in fixed and np.isscalar(fixed[base]):
            raise ValueError(f"{base} is already fixed by override")
        share_all = base in spec.share
        if share_all:
            fixed[base] = value
        else:
            for t in targets:
                cur[t] = value
            fixed[base] = cur
    return fixed


def _fit_profile_point(sub, base, targets, value):
    if base in ("rho", "eta", "xi"):
        return fit(sub)
    # mu/sigma: fix the matching coordinate via a coordinate-pinned fit
    return _fit_with_pinned(sub, base, targets, value)


def _fit_with_pinned(spec, base, targets, value):
    structure = _Structure(spec, mu_anchor=_anchor_for(spec, base, targets))
    pinned = []
    for i, (kind, traces) in enumerate(_coordinate_names(structure)):
        if kind == base and targets[0] in traces:
            pinned.append((i, math.log(value)))
    if not pinned:
        raise ValueError(f"parameter {base}@{targets[0]} is not free in this fit")
    return _fit_reduced(spec, structure, dict(pinned))


def _anchor_for(spec, base, targets):
    if base != "mu":
        return None
    structure = _Structure(spec)
    anchors = {}
    for bi, b in enumerate(structure.eta_blocks):
        if targets[0] in b.traces:
            anchors[bi] = targets[0]
    return anchors


def _coordinate_names(structure):
    names = []
    for b in structure.rho_blocks:
        if b.fixed is None:
            names.append(("sigma" if structure.mode == "mu_sigma" else "rho",
                          b.traces))
    for bi, b in enumerate(structure.eta_blocks):
        if b.fixed is None:
            if structure.mode == "mu_sigma":
                names.append(("mu", (structure.mu_anchor[bi],)))
            else:
                names.append(("eta", b.traces))
    for b in structure.xi_blocks:
        if b.fixed is None:
            names.append(("xi", b.traces))
    for blk in structure.phi_blocks:
        for _ in range(blk.n_free):
            names.append(("phi", blk.traces))
    return names


def _fit_reduced(spec, structure, pinned):
    bundle = spec.bundle
    evals = [0]
    free_idx = [i for i in range(structure.n_free) if i not in pinned]

    def expand(sub):
        full = np.empty(structure.n_free)
        for i, v in pinned.items():
            full[i] = v
        full[free_idx] = sub
        return full

    def objective(sub):
        evals[0] += 1
        try:
            params = structure.unpack(expand(sub))
            ll = total_log_likelihood(bundle.with_parameters(params), spec.max_workers)
        except (ValueError, OverflowError, FloatingPointError):
            return _PENALTY
        return -ll if np.isfinite(ll) else _PENALTY

    if not free_idx:
        params = structure.unpack(expand(np.empty(0)))
        ll = total_log_likelihood(bundle.with_parameters(params), spec.max_workers)
        return _finish(
            replace(spec, compute_standard_errors=False),
            structure, params, ll, True, 0, 1, None, None,
        )
    starts = [th[free_idx] for th in _starting_points(spec, structure)]
    best = None
    iters = 0
    for s0 in starts:
        res = minimize(
            objective, s0, method="L-BFGS-B",
            options={"maxiter": spec.max_iterations, "ftol": spec.tolerance,
                     "gtol": 1e-7, "eps": 1e-6},
        )
        iters += int(res.nit)
        if best is None or res.fun < best.fun:
            best = res
    params = structure.unpack(expand(best.x))
    ll = total_log_likelihood(bundle.with_parameters(params), spec.max_workers)
    return _finish(
        replace(spec, compute_standard_errors=False),
        structure, params, ll, bool(best.success and np.isfinite(ll)),
        iters, evals[0], None, None,
    )


def _lr_interval(grid, values, threshold):
    inside = [g for g, v in zip(grid, values) if v >= threshold]
    if not inside:
        return None
    lo, hi = min(inside), max(inside)
    pairs = sorted(zip(grid, values))
    for (g1, v1), (g2, v2) in zip(pairs, pairs[1:]):
        if v1 < threshold <= v2:
            lo = min(lo, g1 + (threshold - v1) / (v2 - v1) * (g2 - g1))
        if v1 >= threshold > v2:
            hi = max(hi, g1 + (threshold - v1) / (v2 - v1) * (g2 - g1))
    return (float(lo), float(hi))


# ---------------------------------------------------------------------------
# Contributor-count sweep


def contributor_sweep(
    spec: FitSpecification,
    max_unknowns: int,
    min_unknowns: int | None = None,
) -> tuple[dict, ...]:
    """Refit with increasing numbers of unknown contributors.

    Returns one record per count with the maximized log10 likelihood; the
    previous optimum (extended with a vanishing fraction for the new
    unknown) seeds each refit, so the maximized likelihood is
    non-decreasing up to optimizer tolerance.
    """
    bundle = spec.bundle
    hyp = bundle.hypothesis
    base_unknowns = len(hyp.unknown)
    start = base_unknowns if min_unknowns is None else min_unknowns
    if max_unknowns < start:
        raise ValueError("max unknowns below the starting count")
    rows = []
    prev = None
    for count in range(start, max_unknowns + 1):
        swept = _with_unknown_count(bundle, count)
        extra = list(spec.extra_starts) if count == base_unknowns else []
        if prev is not None:
            carried = _extend_parameters(
                prev.parameters, swept.hypothesis, bundle.traces
            )
            if carried is not None:
                extra.append(carried)
        sub = replace(
            spec, bundle=swept, extra_starts=tuple(extra),
            compute_standard_errors=False,
        )
        res = fit(sub)
        rows.append(
            {
                "unknowns": count,
                "contributors": len(hyp.known) + count,
                "log10_likelihood": res.log10_likelihood,
                "converged": res.converged,
                "result": res,
            }
        )
        prev = res
    return tuple(rows)


def _with_unknown_count(bundle: EvidenceBundle, count: int) -> EvidenceBundle:
    hyp = bundle.hypothesis
    labels = list(hyp.unknown[:count])
    nxt = 1
    while len(labels) < count:
        cand = f"U{nxt}"
        nxt += 1
        if cand not in labels and cand not in hyp.known:
            labels.append(cand)
    trace_roles = None
    if hyp.trace_roles is not None:
        trace_roles = {
            t: tuple(r for r in roles if r in hyp.known) + tuple(labels)
            for t, roles in hyp.trace_roles.items()
        }
    new_hyp = Hypothesis(
        known=dict(hyp.known), unknown=tuple(labels), trace_roles=trace_roles
    )
    params = _uniform_parameters(new_hyp, bundle)
    return EvidenceBundle(
        traces=bundle.traces,
        frequencies=bundle.frequencies,
        hypothesis=new_hyp,
        parameters=params,
    )


def _uniform_parameters(hyp, bundle):
    rho, phi = {}, {}
    for t in bundle.traces:
        rho[t.trace_id] = 30.0
        roles = hyp.roles_for(t.trace_id)
        phi[t.trace_id] = {r: 1.0 / len(roles) for r in roles}
    return ModelParameters(
        rho=rho, eta=30.0, xi=0.05, phi=phi,
        marker_rho=bundle.parameters.marker_rho,
        marker_xi=bundle.parameters.marker_xi,
    )


def _extend_parameters(params, new_hyp, traces):
    eps = 1e-9
    phi = {}
    for t in traces:
        tid = t.trace_id
        roles = new_hyp.roles_for(tid)
        old = params.phi.get(tid, {})
        new_roles = [r for r in roles if r not in old]
        old_unknown = [
            old[r] for r in roles if r in old and r in new_hyp.unknown
        ]
        step = eps
        if old_unknown:
            step = min(eps, min(max(v, 1e-300) for v in old_unknown) * 0.5)
        adds = {}
        cur = step
        for r in new_roles:
            adds[r] = cur
            cur *= 0.5
        total_add = sum(adds.values())
        vec = {}
        for r in roles:
            if r in old:
                vec[r] = old[r] * (1.0 - total_add)
            else:
                vec[r] = adds[r]
        norm = sum(vec.values())
        phi[tid] = {r: v / norm for r, v in vec.items()}
    try:
        return ModelParameters(rho=dict(params.rho), eta=params.eta,
                               xi=params.xi, phi=phi,
                               marker_rho=params.marker_rho,
                               marker_xi=params.marker_xi)
    except ValueError:
        return None
