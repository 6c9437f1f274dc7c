import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adprog.cohort import SubjectRecord, apply_missing_mask
from adprog.estimation import (NonIdentifiableError, ParamTable, alpha_objective,
                               alpha_withY_objective, atrophy_features, beta_objective,
                               collect_transitions, estimate_alpha1_alpha2gamma,
                               estimate_alpha_withY, estimate_beta, estimate_gamma_withY,
                               estimate_params, estimators_inverse_square, fit_param_table,
                               gamma_objective)
from adprog.model import Demographics, default_graph

from oracles import FIELDS, simulate


@pytest.fixture
def noiseless(rng):
    return [simulate(rng, sid=str(i)) for i in range(12)]


# beta --------------------------------------------------------------------------

def test_beta_round_trip(noiseless):
    assert estimate_beta(noiseless, amyloid="observed") == pytest.approx(0.05, abs=1e-12)


def test_beta_from_accumulated_amyloid(noiseless):
    assert estimate_beta(noiseless, amyloid="phi") == pytest.approx(0.05, abs=1e-10)


def test_beta_uniform_amyloid_not_identifiable(rng):
    r = simulate(rng)
    r.D[:] = 0.1
    with pytest.raises(NonIdentifiableError):
        estimate_beta([r], amyloid="observed")


def test_beta_on_synthetic_cohort_is_accurate(cohort):
    table = fit_param_table(cohort, ("feature_a", "feature_b"))
    from adprog.cohort import CohortConfig, true_params
    cfg = CohortConfig()
    for rec in cohort[:40]:
        est, truth = table.for_record(rec), true_params(cfg, rec)
        for name in ("alpha1", "alpha2_gamma", "beta"):
            assert (getattr(est, name) - getattr(truth, name)) ** 2 < 1e-4


# alpha1, alpha2*gamma ----------------------------------------------------------

def test_alpha_round_trip(noiseless):
    a1, a2g = estimate_alpha1_alpha2gamma(noiseless, amyloid="observed")
    assert a1 == pytest.approx(0.5, abs=1e-10)
    assert a2g == pytest.approx(0.1, abs=1e-10)


def test_alpha_agrees_with_grid_oracle(rng):
    # noisy cognition so the minimum is not exactly on the generator values
    recs = [simulate(rng, sid=str(i)) for i in range(10)]
    for r in recs:
        r.C[:] = r.C + rng.normal(0, 0.3, r.C.shape)
    a1, a2g = estimate_alpha1_alpha2gamma(recs, amyloid="observed")
    tr = collect_transitions(recs, ("X", "D", "C"), "observed")
    f1, f2 = atrophy_features(tr)
    d1 = np.linspace(5.0, 15.0, 401)       # 1/(alpha2 gamma)
    d2 = np.linspace(0.3, 0.7, 401)        # alpha1
    L = alpha_objective(d1[:, None], d2[None, :], f1, f2, tr.C)
    i, j = np.unravel_index(np.argmin(L), L.shape)
    # the valley is elongated, so allow two cells and check the objective too
    assert abs(1 / a2g - d1[i]) <= 2 * (d1[1] - d1[0])
    assert abs(a1 - d2[j]) <= 2 * (d2[1] - d2[0])
    assert alpha_objective(1 / a2g, a1, f1, f2, tr.C) <= L[i, j]


def test_alpha_zero_cognition_not_identifiable(rng):
    r = simulate(rng)
    r.C[:] = 0.0
    with pytest.raises(NonIdentifiableError, match="K4 and K5"):
        estimate_alpha1_alpha2gamma([r], amyloid="observed")


def test_inverse_square_round_trip(rng):
    recs = [simulate(rng, p=2, sid=str(i)) for i in range(8)]
    a1, a2g = estimators_inverse_square(recs, amyloid="observed")
    assert a1 == pytest.approx(0.5, abs=1e-10)
    assert a2g == pytest.approx(0.1, abs=1e-10)


def test_inverse_square_on_linear_data_runs(noiseless):
    a1, a2g = estimators_inverse_square(noiseless, amyloid="observed")
    assert np.isfinite(a1) and np.isfinite(a2g)


# with activity data --------------------------------------------------------------

def test_gamma_and_alpha_with_activity(noiseless):
    assert estimate_gamma_withY(noiseless) == pytest.approx(1.0, abs=1e-12)
    a1, a2 = estimate_alpha_withY(noiseless, amyloid="observed")
    assert a1 == pytest.approx(0.5, abs=1e-10)
    assert a2 == pytest.approx(0.1, abs=1e-10)


def test_gamma_nonunit(rng):
    recs = [simulate(rng, gamma=2.0, sid=str(i)) for i in range(4)]
    assert estimate_gamma_withY(recs) == pytest.approx(2.0, rel=1e-12)


def test_zero_activity_not_identifiable(rng):
    r = simulate(rng)
    r.Y[:] = 0.0
    with pytest.raises(NonIdentifiableError):
        estimate_gamma_withY([r])


def _noisy(rng, n=6):
    recs = [simulate(rng, sid=str(i)) for i in range(n)]
    for r in recs:
        r.C[:] += rng.normal(0, 0.2, r.C.shape)
        r.X[1:] += rng.normal(0, 0.01, r.X[1:].shape)
        r.D[1:] += rng.normal(0, 0.005, r.D[1:].shape)
    return recs


@pytest.mark.parametrize("eps", [1e-3, 1e-2])
def test_closed_forms_beat_local_probes(rng, eps):
    recs = _noisy(rng)
    g = default_graph()
    b = estimate_beta(recs, amyloid="observed")
    trd = collect_transitions(recs, ("D",), "observed", change="D")
    for s in (-1, 1):
        assert beta_objective(b, trd, g) <= beta_objective(b + s * eps, trd, g)
    gm = estimate_gamma_withY(recs)
    for s in (-1, 1):
        assert gamma_objective(gm, recs) <= gamma_objective(gm + s * eps, recs)
    a1, a2 = estimate_alpha_withY(recs, amyloid="observed")
    trx = collect_transitions(recs, ("X", "D", "Y"), "observed")
    base = alpha_withY_objective(a1, a2, trx)
    for d1 in (-eps, 0, eps):
        for d2 in (-eps, 0, eps):
            assert base <= alpha_withY_objective(a1 + d1, a2 + d2, trx)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_closed_form_is_argmin_under_random_perturbation(seed):
    rng = np.random.default_rng(seed)
    recs = _noisy(rng)
    g = default_graph()
    trd = collect_transitions(recs, ("D",), "observed", change="D")
    trx = collect_transitions(recs, ("X", "D", "C"), "observed")
    f1, f2 = atrophy_features(trx)
    b = estimate_beta(recs, amyloid="observed")
    a1, a2g = estimate_alpha1_alpha2gamma(recs, amyloid="observed")
    u = rng.uniform(0.9, 1.1, (200, 3))
    lb = beta_objective(b, trd, g)
    assert all(lb <= beta_objective(b * k, trd, g) + 1e-12 for k in u[:, 0])
    la = alpha_objective(1 / a2g, a1, f1, f2, trx.C)
    lp = alpha_objective(u[:, 1] / a2g, a1 * u[:, 2], f1, f2, trx.C)
    assert np.all(la <= lp + 1e-9 * abs(la))


# masks, scaling and grouping ------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), hidden=st.integers(1, 4))
def test_unavailable_visits_are_ignored(seed, hidden):
    rng = np.random.default_rng(seed)
    recs = _noisy(rng, 4)
    ref = estimate_params(recs, amyloid="observed")
    # splice a garbage visit behind a false flag into each subject
    spliced = []
    for r in recs:
        ins = hidden
        years = np.concatenate([r.years[:ins] * 2, [2 * r.years[ins - 1] + 1], r.years[ins:] * 2])
        arrays = {f: np.insert(getattr(r, f), ins, 1e3 * rng.standard_normal(getattr(r, f)[0].shape),
                               axis=0) for f in FIELDS}
        avail = {f: np.insert(r.available[f], ins, False) for f in FIELDS}
        spliced.append(SubjectRecord(r.id, r.demographics, years, *(arrays[f] for f in FIELDS),
                                     avail))
    # the splice doubled every gap, which halves each rate
    got = estimate_params(spliced, amyloid="observed")
    for name in ("alpha1", "alpha2_gamma", "beta"):
        assert getattr(got, name) == pytest.approx(getattr(ref, name) / 2, rel=1e-9)


def test_mask_removes_visits_not_values(uniform_cohort):
    masked = apply_missing_mask(uniform_cohort, seed=9)
    trimmed = []
    for r in masked:
        keep = r.available["X"] | r.available["C"]
        trimmed.append(SubjectRecord(r.id, r.demographics, r.years[keep],
                                     *(getattr(r, f)[keep] for f in FIELDS),
                                     {f: r.available[f][keep] for f in FIELDS}))
    a, b = estimate_params(masked), estimate_params(trimmed)
    assert a == b


@pytest.mark.parametrize("k", [2, 3])
def test_time_scaling(rng, k):
    recs = _noisy(rng)
    stretched = [SubjectRecord(r.id, r.demographics, r.years * k, r.X, r.phi, r.D, r.Y, r.C,
                               dict(r.available)) for r in recs]
    ref = estimate_params(recs, amyloid="observed")
    got = estimate_params(stretched, amyloid="observed")
    for name in ("alpha1", "alpha2_gamma", "beta"):
        assert getattr(got, name) == pytest.approx(getattr(ref, name) / k, rel=1e-10)


def test_clones_match_single_subject(rng):
    r = _noisy(rng, 1)[0]
    clones = [r.copy() for _ in range(5)]
    for c, i in zip(clones, range(5)):
        c.id = f"c{i}"
    one, many = estimate_params([r], amyloid="observed"), estimate_params(clones, amyloid="observed")
    for name in ("alpha1", "alpha2_gamma", "beta"):
        assert getattr(many, name) == pytest.approx(getattr(one, name), rel=1e-12)


# group table ---------------------------------------------------------------------------

def test_eight_groups_recover_generator_map(cohort):
    from adprog.cohort import CohortConfig, true_params
    table = fit_param_table(cohort, ("feature_a", "feature_b"))
    assert len(table.entries) == 8
    cfg = CohortConfig()
    for rec in cohort:
        truth = true_params(cfg, rec)
        est = table.for_record(rec)
        assert est.beta == pytest.approx(truth.beta, abs=1e-8)
        assert est.alpha1 == pytest.approx(truth.alpha1, abs=1e-8)
        assert est.alpha2_gamma == pytest.approx(truth.alpha2_gamma, abs=1e-8)


def test_pooled_identity(uniform_cohort):
    table = fit_param_table(uniform_cohort, ())
    assert list(table.entries) == [()]
    assert table.entries[()] == estimate_params(uniform_cohort)
    assert table.pooled == table.entries[()]


def test_masked_group_error_within_scale(cohort):
    from adprog.cohort import CohortConfig, true_params
    cfg = CohortConfig()
    keys = ("feature_a", "feature_b")
    full = fit_param_table(cohort, keys)
    masked = fit_param_table(apply_missing_mask(cohort, seed=5), keys)

    def sq(table):
        err = []
        for rec in cohort:
            t, e = true_params(cfg, rec), table.for_record(rec)
            err += [(getattr(t, n) - getattr(e, n)) ** 2 for n in ("alpha1", "alpha2_gamma", "beta")]
        return float(np.mean(err))

    assert sq(full) <= sq(masked) < 1e-2


def test_missing_group_falls_back_to_pooled(cohort):
    table = fit_param_table(cohort[:40], ("feature_a",))
    p = table.lookup(Demographics(extra={"feature_a": 99}))
    assert p == table.pooled
    assert [99] in table.metadata["fallbacks"]


def test_unidentifiable_group_omitted(rng):
    good = [simulate(rng, sid=str(i), extra={"g": 0}) for i in range(3)]
    bad = simulate(rng, sid="b", extra={"g": 1})
    bad.C[:] = 0.0
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        table = fit_param_table(good + [bad], ("g",), amyloid="observed")
    assert (0,) in table.entries and (1,) not in table.entries
    assert table.metadata["omitted_groups"] == [[1]]
    assert any("omitted" in str(x.message) for x in w)


def test_param_table_round_trip(tmp_path, cohort):
    table = fit_param_table(cohort, ("feature_a", "feature_b"), fold=2)
    table.save(tmp_path / "t.json")
    back = ParamTable.load(tmp_path / "t.json")
    assert back.keys == table.keys and back.entries == table.entries
    assert back.pooled == table.pooled and back.metadata["fold"] == 2
