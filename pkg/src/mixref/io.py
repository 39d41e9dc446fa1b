"""CSV and JSON ingestion and report rendering.

File formats (all UTF-8, headers required):

* frequency CSV: marker, allele, frequency
* profile CSV: individual, marker, allele1, allele2
* trace CSV: trace_id, marker, allele, height
* case JSON: hypotheses (known ids, unknown count or labels, optional
  per-trace roles), per-trace thresholds, optional silent frequency and
  sharing constraints
* parameter JSON: xi and eta (global or per trace), per-trace mu/sigma
  or rho, and per-trace phi
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .engine import Hypothesis, Trace
from .peakmodel import ModelParameters
from .population import FrequencyTable, GenotypeProfile, canonical_allele

__all__ = [
    "LoadError",
    "load_frequency_table",
    "load_profiles",
    "read_trace_rows",
    "build_traces",
    "write_trace_csv",
    "CaseDefinition",
    "load_case_definition",
    "parameters_from_json",
    "parameters_to_json",
    "fit_report",
    "render_fit_table",
]


class LoadError(ValueError):
    """A data file is missing, malformed, or internally inconsistent."""


def _open_csv(path, required):
    path = Path(path)
    if not path.exists():
        raise LoadError(f"{required} not found: {path}")
    handle = path.open(newline="", encoding="utf-8")
    reader = csv.DictReader(handle)
    if reader.fieldnames is None:
        handle.close()
        raise LoadError(f"{required} {path} is empty")
    return handle, reader


def load_frequency_table(path) -> FrequencyTable:
    """Read a frequency CSV; per-marker frequencies are normalized to sum 1.

    A deviation of the raw sum from 1 beyond 5% is an error; smaller
    deviations are rescaled (with a warning beyond 1e-6).
    """
    handle, reader = _open_csv(path, "frequency table")
    data: dict[str, dict[str, float]] = {}
    with handle:
        _require(reader, {"marker", "allele", "frequency"}, path)
        for i, row in enumerate(reader, start=2):
            try:
                marker = row["marker"].strip()
                allele = canonical_allele(row["allele"])
                freq = float(row["frequency"])
            except (KeyError, ValueError, AttributeError) as exc:
                raise LoadError(f"{path}:{i}: bad frequency row: {row}") from exc
            if freq <= 0:
                raise LoadError(f"{path}:{i}: frequency must be positive: {freq}")
            if allele in data.setdefault(marker, {}):
                raise LoadError(f"{path}:{i}: duplicate allele {allele} for {marker}")
            data[marker][allele] = freq
    if not data:
        raise LoadError(f"frequency table {path} has no rows")
    for marker, freqs in data.items():
        total = sum(freqs.values())
        if abs(total - 1.0) > 0.05:
            raise LoadError(
                f"frequencies for {marker!r} sum to {total:.4f}; not a distribution"
            )
        if abs(total - 1.0) > 1e-6:
            warnings.warn(
                f"frequencies for {marker!r} sum to {total:.6f}; rescaling to 1",
                stacklevel=2,
            )
        data[marker] = {a: q / total for a, q in freqs.items()}
    return FrequencyTable.from_dict(data)


def load_profiles(path) -> dict[str, GenotypeProfile]:
    """Read a profile CSV into {individual: GenotypeProfile}."""
    handle, reader = _open_csv(path, "profile file")
    rows: dict[str, dict[str, tuple[str, str]]] = {}
    with handle:
        _require(reader, {"individual", "marker", "allele1", "allele2"}, path)
        for i, row in enumerate(reader, start=2):
            try:
                who = row["individual"].strip()
                marker = row["marker"].strip()
                pair = (row["allele1"], row["allele2"])
            except (KeyError, AttributeError) as exc:
                raise LoadError(f"{path}:{i}: bad profile row: {row}") from exc
            if marker in rows.setdefault(who, {}):
                raise LoadError(f"{path}:{i}: duplicate marker {marker} for {who}")
            rows[who][marker] = pair
    return {
        who: GenotypeProfile.from_pairs(markers) for who, markers in rows.items()
    }


def read_trace_rows(path) -> dict[str, dict[str, dict[str, float]]]:
    """Read a trace CSV into {trace_id: {marker: {allele: height}}}."""
    handle, reader = _open_csv(path, "trace file")
    rows: dict[str, dict[str, dict[str, float]]] = {}
    with handle:
        _require(reader, {"trace_id", "marker", "allele", "height"}, path)
        for i, row in enumerate(reader, start=2):
            try:
                tid = row["trace_id"].strip()
                marker = row["marker"].strip()
                allele = canonical_allele(row["allele"])
                height = float(row["height"])
            except (KeyError, ValueError, AttributeError) as exc:
                raise LoadError(f"{path}:{i}: bad trace row: {row}") from exc
            if height < 0:
                raise LoadError(f"{path}:{i}: negative height {height}")
            marker_rows = rows.setdefault(tid, {}).setdefault(marker, {})
            if allele in marker_rows:
                raise LoadError(
                    f"{path}:{i}: duplicate height for {tid}/{marker}/{allele}"
                )
            marker_rows[allele] = height
    return rows


def build_traces(
    rows: Mapping[str, Mapping[str, Mapping[str, float]]],
    thresholds: Mapping[str, float],
) -> tuple[Trace, ...]:
    """Assemble Trace records, zeroing sub-threshold heights with a warning."""
    traces = []
    for tid, markers in rows.items():
        if tid not in thresholds:
            raise LoadError(f"no detection threshold given for trace {tid!r}")
        c = float(thresholds[tid])
        cleaned = {}
        for marker, peaks in markers.items():
            row = {}
            for allele, h in peaks.items():
                if 0.0 < h < c:
                    warnings.warn(
                        f"{tid}/{marker}/{allele}: height {h} below threshold "
                        f"{c}; treated as dropout (height 0)",
                        stacklevel=2,
                    )
                    h = 0.0
                row[allele] = h
            cleaned[marker] = row
        traces.append(Trace(trace_id=tid, threshold=c, heights=cleaned))
    return tuple(traces)


def write_trace_csv(traces: Sequence[Trace], path) -> None:
    """Emit traces in the ingestion schema, one row per recorded peak."""
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["trace_id", "marker", "allele", "height"])
        for trace in traces:
            for marker in trace.markers():
                for allele, h in trace.heights[marker].items():
                    writer.writerow([trace.trace_id, marker, allele, h])


def _require(reader, columns, path):
    have = {c.strip() for c in reader.fieldnames or ()}
    missing = columns - have
    if missing:
        raise LoadError(f"{path}: missing columns {sorted(missing)}")


# ---------------------------------------------------------------------------
# Case definition JSON


@dataclass(frozen=True)
class CaseDefinition:
    """Parsed case JSON: hypotheses by id plus per-trace thresholds."""

    hypotheses: Mapping[str, Mapping[str, object]]
    thresholds: Mapping[str, float]
    q0: float
    share: tuple[str, ...] | None


def load_case_definition(path) -> CaseDefinition:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"hypothesis file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}: invalid JSON: {exc}") from exc
    if "hypotheses" not in doc or not isinstance(doc["hypotheses"], dict):
        raise LoadError(f"{path}: needs a 'hypotheses' object")
    thresholds = {}
    for tid, spec in (doc.get("traces") or {}).items():
        if isinstance(spec, Mapping) and "threshold" in spec:
            thresholds[tid] = float(spec["threshold"])
    share = doc.get("share")
    return CaseDefinition(
        hypotheses=doc["hypotheses"],
        thresholds=thresholds,
        q0=float(doc.get("q0", 0.0)),
        share=tuple(share) if share is not None else None,
    )


def build_hypothesis(
    spec: Mapping[str, object], profiles: Mapping[str, GenotypeProfile]
) -> Hypothesis:
    """Instantiate one hypothesis block against loaded profiles."""
    known_ids = list(spec.get("known", ()))
    missing = [k for k in known_ids if k not in profiles]
    if missing:
        raise LoadError(f"hypothesis references unknown individuals {missing}")
    unknowns = spec.get("unknowns", 0)
    if isinstance(unknowns, int):
        labels = tuple(f"U{i+1}" for i in range(unknowns))
    else:
        labels = tuple(str(u) for u in unknowns)
    trace_roles = spec.get("trace_roles")
    return Hypothesis(
        known={k: profiles[k] for k in known_ids},
        unknown=labels,
        trace_roles={t: tuple(r) for t, r in trace_roles.items()}
        if trace_roles
        else None,
    )


# ---------------------------------------------------------------------------
# Parameter JSON


def parameters_from_json(doc: Mapping[str, object]) -> ModelParameters:
    """Parse a parameter document.

    Per trace, rho may be given directly, or derived as mu/eta when eta is
    stated (globally or per trace), or as 1/sigma^2 with eta = mu*sigma^2.
    """
    if "traces" not in doc:
        raise LoadError("parameter JSON needs a 'traces' object")
    global_eta = doc.get("eta")
    global_xi = doc.get("xi")
    rho, eta, xi, phi = {}, {}, {}, {}
    for tid, tr in doc["traces"].items():
        t_eta = tr.get("eta", global_eta)
        if t_eta is None and "mu" in tr and "sigma" in tr:
            t_eta = float(tr["mu"]) * float(tr["sigma"]) ** 2
        if t_eta is None:
            raise LoadError(f"trace {tid!r}: no eta (directly or via mu, sigma)")
        t_eta = float(t_eta)
        if "rho" in tr:
            t_rho = float(tr["rho"])
        elif "mu" in tr:
            t_rho = float(tr["mu"]) / t_eta
        elif "sigma" in tr:
            t_rho = 1.0 / float(tr["sigma"]) ** 2
        else:
            raise LoadError(f"trace {tid!r}: no rho, mu, or sigma")
        t_xi = tr.get("xi", global_xi)
        if t_xi is None:
            raise LoadError(f"trace {tid!r}: no xi (directly or globally)")
        if "phi" not in tr:
            raise LoadError(f"trace {tid!r}: no phi")
        rho[tid] = t_rho
        eta[tid] = t_eta
        xi[tid] = float(t_xi)
        phi[tid] = {str(r): float(v) for r, v in tr["phi"].items()}
    marker_rho = doc.get("marker_rho")
    marker_xi = doc.get("marker_xi")
    return ModelParameters(
        rho=rho,
        eta=eta,
        xi=xi,
        phi=phi,
        marker_rho={m: dict(v) for m, v in marker_rho.items()} if marker_rho else None,
        marker_xi={m: float(v) for m, v in marker_xi.items()} if marker_xi else None,
    )


def parameters_to_json(params: ModelParameters) -> dict:
    out = {"traces": {}}
    for tid in params.rho:
        out["traces"][tid] = {
            "rho": params.rho[tid],
            "eta": params.eta_for(tid),
            "mu": params.mu_for(tid),
            "sigma": params.sigma_for(tid),
            "xi": params.xi_for(tid),
            "phi": dict(params.phi[tid]),
        }
    return out


# ---------------------------------------------------------------------------
# Fit reports


def fit_report(result, hypothesis_id=None) -> dict:
    """JSON-serializable report: estimate/SE/boundary per parameter per trace."""
    ses = result.standard_errors
    report = {
        "hypothesis": hypothesis_id or result.hypothesis_id,
        "log10_likelihood": result.log10_likelihood,
        "converged": result.converged,
        "iterations": result.iterations,
        "evaluations": result.n_evaluations,
        "gradient_norm": result.final_gradient_norm,
        "traces": {},
    }
    for tid, est in result.estimates.items():
        se = (ses or {}).get(tid, {})
        flags = result.boundary.get(tid, {})
        block = {}
        for name in ("mu", "sigma", "xi"):
            block[name] = {
                "estimate": est[name],
                "se": se.get(name),
                "boundary": bool(flags.get(name, False)),
            }
        block["phi"] = {
            role: {
                "estimate": val,
                "se": (se.get("phi") or {}).get(role),
                "boundary": bool((flags.get("phi") or {}).get(role, False)),
            }
            for role, val in est["phi"].items()
        }
        report["traces"][tid] = block
    report["parameters"] = parameters_to_json(result.parameters)
    return report


def _fmt(x, kind="estimate"):
    if x is None:
        return "-"
    if kind == "prob":
        return f"{x:.3f}"
    if kind == "bans":
        return f"{x:.1f}"
    return f"{float(x):.3g}"


def render_fit_table(report: Mapping[str, object]) -> str:
    """Text table (Parameter / Est. / SE per trace) from a fit report dict."""
    traces = list(report["traces"])
    rows = []
    param_names = ["mu", "sigma", "xi"]
    roles = []
    for tid in traces:
        for role in report["traces"][tid]["phi"]:
            if role not in roles:
                roles.append(role)
    header = ["Parameter"]
    for tid in traces:
        header += [f"{tid} Est.", f"{tid} SE"]
    rows.append(header)
    for name in param_names:
        row = [name]
        for tid in traces:
            cell = report["traces"][tid].get(name)
            row += [_fmt(cell["estimate"]), _fmt(cell["se"])]
            if cell.get("boundary"):
                row[-2] += "*"
        rows.append(row)
    for role in roles:
        row = [f"phi[{role}]"]
        for tid in traces:
            cell = (report["traces"][tid]["phi"] or {}).get(role)
            if cell is None:
                row += ["-", "-"]
            else:
                row += [_fmt(cell["estimate"]), _fmt(cell["se"])]
                if cell.get("boundary"):
                    row[-2] += "*"
        rows.append(row)
    rows.append(
        ["log10 L", _fmt(report["log10_likelihood"], "bans")]
        + [""] * (2 * len(traces) - 1)
    )
    widths = [max(len(str(r[i])) for r in rows if i < len(r)) for i in range(len(header))]
    lines = []
    for r in rows:
        line = "  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip()
        lines.append(line)
    note = "* at or near a parameter-space boundary (restricted-model SE or none)"
    if any("*" in str(c) for r in rows for c in r):
        lines.append(note)
    return "\n".join(lines)
