"""Inference engine against enumeration oracles and structural invariants."""

import math

import numpy as np
import pytest
from scipy.special import logsumexp

import mixref as mx
from mixref.engine import InfeasibleConditioningError

from conftest import (
    oracle_log_cdf,
    oracle_log_likelihood,
    oracle_log_pdf,
    oracle_presence,
    oracle_table,
    random_case,
)


def single_trace_bundle(freqs, hypothesis, heights, params, threshold=50.0):
    trace = mx.Trace(trace_id="T1", threshold=threshold, heights={"M": heights})
    return mx.EvidenceBundle(
        traces=(trace,), frequencies=freqs, hypothesis=hypothesis,
        parameters=params,
    )


class TestMarkerLogLikelihood:
    def test_single_known_het_no_marginalization(self):
        freqs = mx.FrequencyTable.from_dict({"M": {"8": 0.5, "9": 0.5}})
        k1 = mx.GenotypeProfile.from_pairs({"M": ("8", "9")})
        params = mx.ModelParameters(
            rho={"T1": 25.0}, eta=20.0, xi=0.0, phi={"T1": {"K1": 1.0}}
        )
        b = single_trace_bundle(
            freqs, mx.Hypothesis(known={"K1": k1}), {"8": 430.0, "9": 380.0}, params
        )
        got = mx.marker_log_likelihood(b, "M")
        want = oracle_log_pdf(430.0, 25.0, 20.0) + oracle_log_pdf(380.0, 25.0, 20.0)
        assert got == pytest.approx(want, rel=1e-12)

    def test_observed_peak_with_zero_dose_is_impossible(self):
        freqs = mx.FrequencyTable.from_dict({"M": {"8": 0.5, "9": 0.5}})
        k1 = mx.GenotypeProfile.from_pairs({"M": ("8", "8")})
        params = mx.ModelParameters(
            rho={"T1": 25.0}, eta=20.0, xi=0.0, phi={"T1": {"K1": 1.0}}
        )
        b = single_trace_bundle(
            freqs, mx.Hypothesis(known={"K1": k1}), {"8": 430.0, "9": 380.0}, params
        )
        assert mx.marker_log_likelihood(b, "M") == -np.inf

    def test_all_dropout_is_log_dropout_probability(self):
        freqs = mx.FrequencyTable.from_dict({"M": {"8": 0.5, "9": 0.5}})
        k1 = mx.GenotypeProfile.from_pairs({"M": ("8", "9")})
        params = mx.ModelParameters(
            rho={"T1": 25.0}, eta=20.0, xi=0.0, phi={"T1": {"K1": 1.0}}
        )
        b = single_trace_bundle(
            freqs, mx.Hypothesis(known={"K1": k1}), {"8": 0.0, "9": 0.0}, params
        )
        got = mx.marker_log_likelihood(b, "M")
        want = 2 * oracle_log_cdf(50.0, 25.0, 20.0)
        assert got == pytest.approx(want, rel=1e-12)
        assert got < 0.0
        # with an enormous threshold dropout is certain and the factor -> 1
        b2 = single_trace_bundle(
            freqs, mx.Hypothesis(known={"K1": k1}), {"8": 0.0, "9": 0.0},
            params, threshold=1e9,
        )
        assert mx.marker_log_likelihood(b2, "M") == pytest.approx(0.0, abs=1e-9)

    def test_no_underflow_with_extreme_factors(self):
        # every unobserved factor near e^-700: the total stays finite and
        # matches enumeration, far below linear-space representability
        freqs = mx.FrequencyTable.from_dict(
            {"M": {str(a): 1.0 / 6 for a in range(7, 13)}}
        )
        k1 = mx.GenotypeProfile.from_pairs({"M": ("7", "8")})
        params = mx.ModelParameters(
            rho={"T1": 4000.0}, eta=1.0, xi=0.0,
            phi={"T1": {"K1": 0.7, "U1": 0.3}},
        )
        heights = {str(a): 0.0 for a in range(7, 13)}
        b = single_trace_bundle(
            freqs, mx.Hypothesis(known={"K1": k1}, unknown=("U1",)),
            heights, params,
        )
        dp = mx.marker_log_likelihood(b, "M")
        assert np.isfinite(dp)
        assert dp < -1300.0  # far below log(realmin)
        assert dp == pytest.approx(oracle_log_likelihood(b, "M"), rel=1e-9)

    def test_hypothesis_without_contributors_rejected(self):
        with pytest.raises(ValueError):
            mx.Hypothesis(known={}, unknown=())

    def test_known_missing_marker_rejected(self):
        freqs = mx.FrequencyTable.from_dict(
            {"M": {"8": 0.5, "9": 0.5}, "M2": {"8": 1.0}}
        )
        k1 = mx.GenotypeProfile.from_pairs({"M": ("8", "9")})
        params = mx.ModelParameters(
            rho={"T1": 25.0}, eta=20.0, xi=0.0, phi={"T1": {"K1": 1.0}}
        )
        trace = mx.Trace(
            trace_id="T1", threshold=50.0,
            heights={"M": {"8": 430.0}, "M2": {"8": 100.0}},
        )
        with pytest.raises(ValueError, match="untyped"):
            mx.EvidenceBundle(
                traces=(trace,), frequencies=freqs,
                hypothesis=mx.Hypothesis(known={"K1": k1}), parameters=params,
            )

    def test_off_ladder_trace_allele_rejected(self):
        freqs = mx.FrequencyTable.from_dict({"M": {"8": 0.5, "9": 0.5}})
        k1 = mx.GenotypeProfile.from_pairs({"M": ("8", "9")})
        params = mx.ModelParameters(
            rho={"T1": 25.0}, eta=20.0, xi=0.0, phi={"T1": {"K1": 1.0}}
        )
        with pytest.raises(ValueError, match="not on the"):
            single_trace_bundle(
                freqs, mx.Hypothesis(known={"K1": k1}), {"12": 430.0}, params
            )


class TestOracleEquivalence:
    def test_random_instances_match_both_oracles(self):
        rng = np.random.default_rng(42)
        for _ in range(40):
            b = random_case(rng)
            dp = mx.marker_log_likelihood(b, "M")
            bf = mx.brute_force_log_likelihood(b, "M")
            enum = oracle_log_likelihood(b, "M")
            if enum == -np.inf:
                # structurally impossible evidence; all paths must agree
                assert dp == -np.inf and bf == -np.inf
                continue
            scale = max(abs(enum), 1.0)
            assert abs(dp - enum) <= 1e-9 * scale
            assert abs(bf - enum) <= 1e-9 * scale

    def test_no_unknowns_exact_equality(self):
        rng = np.random.default_rng(1)
        b = random_case(rng, max_unknowns=0)
        assert mx.brute_force_log_likelihood(b, "M") == pytest.approx(
            mx.marker_log_likelihood(b, "M"), rel=1e-14
        )

    def test_fractional_ladder_stutter_topology(self):
        # TH01-like ladder: 9 stutters from 10 across the 9.3 position
        freqs = mx.FrequencyTable.from_dict(
            {"M": {"8": 0.2, "9": 0.25, "9.3": 0.35, "10": 0.2}}
        )
        k1 = mx.GenotypeProfile.from_pairs({"M": ("9.3", "10")})
        params = mx.ModelParameters(
            rho={"T1": 30.0}, eta=25.0, xi=0.12,
            phi={"T1": {"K1": 0.75, "U1": 0.25}},
        )
        b = single_trace_bundle(
            freqs, mx.Hypothesis(known={"K1": k1}, unknown=("U1",)),
            {"8": 90.0, "9": 130.0, "9.3": 700.0, "10": 540.0}, params,
        )
        dp = mx.marker_log_likelihood(b, "M")
        enum = oracle_log_likelihood(b, "M")
        assert dp == pytest.approx(enum, rel=1e-12)

    def test_marker_overrides_respected(self):
        freqs = mx.FrequencyTable.from_dict({"M": {"8": 0.4, "9": 0.6}})
        params = mx.ModelParameters(
            rho={"T1": 30.0}, eta=25.0, xi=0.1,
            phi={"T1": {"U1": 1.0}},
            marker_rho={"M": {"T1": 18.0}}, marker_xi={"M": 0.02},
        )
        b = single_trace_bundle(
            freqs, mx.Hypothesis(known={}, unknown=("U1",)),
            {"8": 200.0, "9": 350.0}, params,
        )
        assert mx.marker_log_likelihood(b, "M") == pytest.approx(
            oracle_log_likelihood(b, "M"), rel=1e-12
        )

    def test_budget_error(self):
        rng = np.random.default_rng(5)
        b = random_case(rng, max_unknowns=2)
        if len(b.hypothesis.unknown) < 2:
            b = random_case(np.random.default_rng(11), max_unknowns=2)
        with pytest.raises(mx.CombinationBudgetError):
            mx.brute_force_log_likelihood(b, "M", max_combinations=1)


class TestMultiTrace:
    def test_disjoint_unknowns_factorize(self):
        freqs = mx.FrequencyTable.from_dict({"M": {"8": 0.3, "9": 0.3, "10": 0.4}})
        k1 = mx.GenotypeProfile.from_pairs({"M": ("8", "9")})
        hyp = mx.Hypothesis(
            known={"K1": k1},
            unknown=("U1", "U2"),
            trace_roles={"T1": ("K1", "U1"), "T2": ("K1", "U2")},
        )
        t1 = mx.Trace(trace_id="T1", threshold=50.0,
                      heights={"M": {"8": 420.0, "9": 260.0, "10": 110.0}})
        t2 = mx.Trace(trace_id="T2", threshold=50.0,
                      heights={"M": {"8": 380.0, "9": 300.0}})
        params = mx.ModelParameters(
            rho={"T1": 25.0, "T2": 32.0}, eta=22.0, xi=0.07,
            phi={"T1": {"K1": 0.8, "U1": 0.2}, "T2": {"K1": 0.7, "U2": 0.3}},
        )
        joint = mx.EvidenceBundle(
            traces=(t1, t2), frequencies=freqs, hypothesis=hyp, parameters=params
        )
        got = mx.total_log_likelihood(joint)

        sep = 0.0
        for trace, role in ((t1, "U1"), (t2, "U2")):
            hyp_one = mx.Hypothesis(known={"K1": k1}, unknown=(role,))
            params_one = mx.ModelParameters(
                rho={trace.trace_id: params.rho[trace.trace_id]},
                eta=22.0, xi=0.07,
                phi={trace.trace_id: params.phi[trace.trace_id]},
            )
            one = mx.EvidenceBundle(
                traces=(trace,), frequencies=freqs,
                hypothesis=hyp_one, parameters=params_one,
            )
            sep += mx.total_log_likelihood(one)
        assert got == pytest.approx(sep, rel=1e-12)

    def test_shared_unknown_couples_traces(self):
        rng = np.random.default_rng(17)
        for _ in range(10):
            b = random_case(rng, max_traces=2)
            if len(b.traces) < 2 or not b.hypothesis.unknown:
                continue
            assert mx.marker_log_likelihood(b, "M") == pytest.approx(
                oracle_log_likelihood(b, "M"), rel=1e-9
            )

    def test_zero_marker_trace_changes_nothing(self):
        freqs = mx.FrequencyTable.from_dict({"M": {"8": 0.5, "9": 0.5}})
        k1 = mx.GenotypeProfile.from_pairs({"M": ("8", "9")})
        hyp = mx.Hypothesis(known={"K1": k1}, unknown=("U1",))
        t1 = mx.Trace(trace_id="T1", threshold=50.0,
                      heights={"M": {"8": 420.0}})
        empty = mx.Trace(trace_id="T2", threshold=50.0, heights={})
        p1 = mx.ModelParameters(
            rho={"T1": 25.0}, eta=22.0, xi=0.05,
            phi={"T1": {"K1": 0.8, "U1": 0.2}},
        )
        p2 = mx.ModelParameters(
            rho={"T1": 25.0, "T2": 30.0}, eta=22.0, xi=0.05,
            phi={"T1": {"K1": 0.8, "U1": 0.2}, "T2": {"K1": 0.5, "U1": 0.5}},
        )
        b1 = mx.EvidenceBundle(traces=(t1,), frequencies=freqs,
                               hypothesis=hyp, parameters=p1)
        b2 = mx.EvidenceBundle(traces=(t1, empty), frequencies=freqs,
                               hypothesis=hyp, parameters=p2)
        assert mx.total_log_likelihood(b1) == pytest.approx(
            mx.total_log_likelihood(b2), rel=1e-12
        )

    def test_parallel_evaluation_matches_serial(self):
        freqs = mx.FrequencyTable.from_dict(
            {f"M{i}": {"8": 0.3, "9": 0.3, "10": 0.4} for i in range(6)}
        )
        k1 = mx.GenotypeProfile.from_pairs(
            {f"M{i}": ("8", "9") for i in range(6)}
        )
        hyp = mx.Hypothesis(known={"K1": k1}, unknown=("U1",))
        heights = {f"M{i}": {"8": 400.0, "9": 300.0 + 10 * i} for i in range(6)}
        trace = mx.Trace(trace_id="T1", threshold=50.0, heights=heights)
        params = mx.ModelParameters(
            rho={"T1": 25.0}, eta=22.0, xi=0.05,
            phi={"T1": {"K1": 0.8, "U1": 0.2}},
        )
        b = mx.EvidenceBundle(traces=(trace,), frequencies=freqs,
                              hypothesis=hyp, parameters=params)
        assert mx.total_log_likelihood(b, max_workers=4) == pytest.approx(
            mx.total_log_likelihood(b), rel=1e-14
        )


class TestPresencePosteriors:
    def test_known_carrier_is_certain(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            b = random_case(rng)
            if not b.hypothesis.known:
                continue
            if oracle_log_likelihood(b, "M") == -np.inf:
                continue
            pres = mx.presence_posteriors(b, "M")
            for kid, profile in b.hypothesis.known.items():
                for a in profile.genotypes["M"]:
                    assert pres[a] == 1.0

    def test_matches_enumeration(self):
        rng = np.random.default_rng(23)
        checked = 0
        while checked < 25:
            b = random_case(rng)
            if not b.hypothesis.unknown:
                continue
            if oracle_log_likelihood(b, "M") == -np.inf:
                continue
            pres = mx.presence_posteriors(b, "M")
            want = oracle_presence(b, "M")
            for a, p in pres.items():
                assert p == pytest.approx(want[a], abs=1e-9)
            checked += 1

    def test_no_unknowns_non_carried_allele(self):
        freqs = mx.FrequencyTable.from_dict({"M": {"8": 0.5, "9": 0.5}})
        k1 = mx.GenotypeProfile.from_pairs({"M": ("8", "8")})
        params = mx.ModelParameters(
            rho={"T1": 25.0}, eta=20.0, xi=0.1, phi={"T1": {"K1": 1.0}}
        )
        b = single_trace_bundle(
            freqs, mx.Hypothesis(known={"K1": k1}), {"8": 430.0}, params
        )
        pres = mx.presence_posteriors(b, "M")
        assert pres["8"] == 1.0
        assert pres["9"] == 0.0


class TestConditionedPresence:
    def _bundle(self):
        freqs = mx.FrequencyTable.from_dict(
            {"M": {"8": 0.3, "9": 0.3, "10": 0.4}}
        )
        k1 = mx.GenotypeProfile.from_pairs({"M": ("9", "10")})
        params = mx.ModelParameters(
            rho={"T1": 28.0}, eta=24.0, xi=0.08,
            phi={"T1": {"K1": 0.7, "U1": 0.3}},
        )
        return single_trace_bundle(
            freqs, mx.Hypothesis(known={"K1": k1}, unknown=("U1",)),
            {"8": 120.0, "9": 600.0, "10": 480.0}, params,
        )

    def test_empty_assignment_is_identity(self):
        b = self._bundle()
        plain = mx.marker_posterior(b, "M")
        cond = mx.conditioned_presence(b, "M", {})
        assert cond.log_likelihood == pytest.approx(plain.log_likelihood, rel=1e-12)
        for a in plain.presence:
            assert cond.presence[a] == pytest.approx(plain.presence[a], abs=1e-12)

    def test_conditioning_certainty_is_identity(self):
        b = self._bundle()
        plain = mx.marker_posterior(b, "M")
        cond = mx.conditioned_presence(b, "M", {"9": "present"})
        assert cond.log_likelihood == pytest.approx(plain.log_likelihood, rel=1e-12)

    def test_absent_conditioning_matches_filtered_enumeration(self):
        b = self._bundle()
        cond = mx.conditioned_presence(b, "M", {"8": "absent"})
        bf = mx.brute_force_log_likelihood(b, "M", presence={"8": False})
        assert cond.log_likelihood == pytest.approx(bf, rel=1e-12)
        assert cond.presence["8"] == pytest.approx(0.0, abs=1e-12)
        # enumeration posterior for the conditioned chain
        table = [
            (counts, w) for counts, w in oracle_table(b, "M")
            if sum(c["8"] for c in counts.values()) == 0
        ]
        total = logsumexp([w for _, w in table])
        for a in ("9", "10"):
            want = [
                w for counts, w in table
                if sum(c[a] for c in counts.values()) > 0
            ]
            want = float(np.exp(logsumexp(want) - total)) if want else 0.0
            assert cond.presence[a] == pytest.approx(want, abs=1e-9)

    def test_conditioning_never_raises_likelihood(self):
        b = self._bundle()
        plain = mx.marker_posterior(b, "M").log_likelihood
        for combo in ({"8": False}, {"8": True}, {"8": True, "9": True}):
            cond = mx.conditioned_presence(b, "M", combo)
            assert cond.log_likelihood <= plain + 1e-12

    def test_zero_probability_conditioning_raises(self):
        b = self._bundle()
        with pytest.raises(InfeasibleConditioningError):
            mx.conditioned_presence(b, "M", {"9": "absent"})

    def test_random_conditioning_matches_filtered_enumeration(self):
        rng = np.random.default_rng(53)
        checked = 0
        while checked < 12:
            b = random_case(rng, allow_silent=False)
            if not b.hypothesis.unknown:
                continue
            if oracle_log_likelihood(b, "M") == -np.inf:
                continue
            ladder = b.frequencies.ladder("M")
            carried = set()
            for profile in b.hypothesis.known.values():
                carried.update(profile.genotypes["M"])
            free = [a for a in ladder.alleles if a not in carried]
            if not free:
                continue
            allele = free[int(rng.integers(len(free)))]
            for value in (False, True):
                try:
                    cond = mx.conditioned_presence(b, "M", {allele: value})
                except InfeasibleConditioningError:
                    with pytest.raises(InfeasibleConditioningError):
                        mx.brute_force_log_likelihood(
                            b, "M", presence={allele: value}
                        )
                    continue
                bf = mx.brute_force_log_likelihood(
                    b, "M", presence={allele: value}
                )
                assert cond.log_likelihood == pytest.approx(bf, rel=1e-9)
                want = 1.0 if value else 0.0
                assert cond.presence[allele] == pytest.approx(want, abs=1e-9)
            checked += 1


class TestTopK:
    def test_no_unknowns_single_empty_combination(self):
        freqs = mx.FrequencyTable.from_dict({"M": {"8": 0.5, "9": 0.5}})
        k1 = mx.GenotypeProfile.from_pairs({"M": ("8", "9")})
        params = mx.ModelParameters(
            rho={"T1": 25.0}, eta=20.0, xi=0.0, phi={"T1": {"K1": 1.0}}
        )
        b = single_trace_bundle(
            freqs, mx.Hypothesis(known={"K1": k1}), {"8": 430.0, "9": 380.0}, params
        )
        assert mx.top_k_marker_genotypes(b, "M", 3) == (({}, 1.0),)

    def test_evidence_free_marker_returns_prior(self):
        freqs = mx.FrequencyTable.from_dict(
            {"M": {"8": 0.5, "9": 0.5}, "M2": {"8": 0.5, "9": 0.5}}
        )
        k1 = mx.GenotypeProfile.from_pairs({"M": ("8", "9"), "M2": ("8", "9")})
        params = mx.ModelParameters(
            rho={"T1": 25.0}, eta=20.0, xi=0.0,
            phi={"T1": {"K1": 0.7, "U1": 0.3}},
        )
        # trace covers only M, so M2's posterior is the Hardy-Weinberg prior
        b = single_trace_bundle(
            freqs, mx.Hypothesis(known={"K1": k1}, unknown=("U1",)),
            {"8": 430.0, "9": 380.0}, params,
        )
        top = mx.top_k_marker_genotypes(b, "M2", 10)
        probs = {tuple(a["U1"]): p for a, p in top}
        assert probs[("8", "9")] == pytest.approx(0.5, abs=1e-12)
        assert probs[("8", "8")] == pytest.approx(0.25, abs=1e-12)
        assert probs[("9", "9")] == pytest.approx(0.25, abs=1e-12)

    def test_matches_enumeration_ranking_and_sums_to_one(self):
        rng = np.random.default_rng(29)
        checked = 0
        while checked < 15:
            b = random_case(rng, max_unknowns=2)
            if not b.hypothesis.unknown:
                continue
            if oracle_log_likelihood(b, "M") == -np.inf:
                continue
            table = oracle_table(b, "M")
            total = logsumexp([w for _, w in table])
            top = mx.top_k_marker_genotypes(b, "M", 10**6)
            probs = [p for _, p in top]
            assert probs == sorted(probs, reverse=True)
            assert sum(probs) == pytest.approx(1.0, abs=1e-9)
            enum_sorted = sorted(
                (float(np.exp(w - total)) for _, w in table), reverse=True
            )
            for got_p, want_p in zip(probs[:8], enum_sorted[:8]):
                assert got_p == pytest.approx(want_p, abs=1e-9)
            checked += 1

    def test_k_beyond_space_returns_all(self):
        freqs = mx.FrequencyTable.from_dict({"M": {"8": 0.5, "9": 0.5}})
        params = mx.ModelParameters(
            rho={"T1": 25.0}, eta=20.0, xi=0.0, phi={"T1": {"U1": 1.0}}
        )
        b = single_trace_bundle(
            freqs, mx.Hypothesis(known={}, unknown=("U1",)), {"8": 430.0}, params
        )
        top = mx.top_k_marker_genotypes(b, "M", 50)
        # (9,9) has zero posterior (observed peak, zero dose) and is omitted
        assert len(top) == 2
        assert {tuple(a["U1"]) for a, _ in top} == {("8", "8"), ("8", "9")}


class TestTopKJointProfiles:
    def test_product_of_modes_is_top(self):
        lists = {
            "M1": [({"U1": ("8", "9")}, 0.6), ({"U1": ("8", "8")}, 0.4)],
            "M2": [({"U1": ("9", "9")}, 0.7), ({"U1": ("8", "9")}, 0.3)],
        }
        top = mx.top_k_joint_profiles(lists, 1)
        assert top[0][1] == pytest.approx(0.42)
        assert top[0][0]["M1"]["U1"] == ("8", "9")

    def test_exhaustive_sum_and_order(self):
        lists = {
            "M1": [("a", 0.5), ("b", 0.3), ("c", 0.2)],
            "M2": [("x", 0.9), ("y", 0.1)],
        }
        top = mx.top_k_joint_profiles(lists, 100)
        probs = [p for _, p in top]
        assert len(top) == 6
        assert probs == sorted(probs, reverse=True)
        assert sum(probs) == pytest.approx(1.0, rel=1e-9)

    def test_degenerate_modes(self):
        lists = {"M1": [("a", 1.0)], "M2": [("b", 1.0)]}
        top = mx.top_k_joint_profiles(lists, 5)
        assert top == [({"M1": "a", "M2": "b"}, 1.0)]

    def test_rejects_unsorted_list(self):
        with pytest.raises(ValueError):
            mx.top_k_joint_profiles({"M1": [("a", 0.1), ("b", 0.9)]}, 1)


class TestSilentAlleles:
    def test_silent_count_marginals_sum_to_one(self):
        freqs = mx.with_silent(
            mx.FrequencyTable.from_dict({"M": {"8": 0.6, "9": 0.4}}), 0.1
        )
        params = mx.ModelParameters(
            rho={"T1": 25.0}, eta=20.0, xi=0.0, phi={"T1": {"U1": 1.0}}
        )
        b = single_trace_bundle(
            freqs, mx.Hypothesis(known={}, unknown=("U1",)), {"8": 300.0}, params
        )
        post = mx.marker_posterior(b, "M")
        sil = post.count_marginals["U1"]["0"]
        assert sum(sil) == pytest.approx(1.0, abs=1e-9)
        assert sil[1] + sil[2] > 0.0  # silent partner plausible for a lone peak
        assert mx.marker_log_likelihood(b, "M") == pytest.approx(
            oracle_log_likelihood(b, "M"), rel=1e-12
        )

    def test_higher_peak_lowers_silent_posterior(self):
        freqs = mx.with_silent(
            mx.FrequencyTable.from_dict({"M": {"8": 0.6, "9": 0.4}}), 0.1
        )
        params = mx.ModelParameters(
            rho={"T1": 2.0}, eta=500.0, xi=0.0, phi={"T1": {"U1": 1.0}}
        )

        def silent_mass(height):
            b = single_trace_bundle(
                freqs, mx.Hypothesis(known={}, unknown=("U1",)),
                {"8": height}, params,
            )
            m = mx.marker_posterior(b, "M").count_marginals["U1"]["0"]
            return m[1] + m[2]

        assert silent_mass(2400.0) < silent_mass(900.0)
