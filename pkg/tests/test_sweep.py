import math

import pytest

from qkdsim.sweep import SweepPoint, SweepSpec, fit_slope, run_point, sweep_distance

SMALL = SweepSpec(losses=(10.0, 14.0, 18.0), modes=("SINGLE_PHOTON", "WCP_WORSTCASE"),
                  target_clicks=2e4)


def test_reproducible_and_parallel_equal():
    a = sweep_distance(SMALL, master_seed=3)
    b = sweep_distance(SMALL, master_seed=3, jobs=2)
    assert repr(a.rows()) == repr(b.rows())


def test_seed_changes_points():
    a = sweep_distance(SMALL, master_seed=3).rows()
    b = sweep_distance(SMALL, master_seed=4).rows()
    assert [r["rate"] for r in a] != [r["rate"] for r in b]


def test_single_photon_slope():
    res = sweep_distance(SMALL, master_seed=0)
    assert res.fits["SINGLE_PHOTON"].slope == pytest.approx(1.0, abs=0.15)
    assert res.fits["WCP_WORSTCASE"].slope > 1.5


def test_fit_exact_power_law():
    pts = [SweepPoint(i, "DECOY", 10.0 * i, 10.0 ** -i, 0.5, 1, rate=3 * (10.0 ** -i) ** 2)
           for i in range(1, 5)]
    f = fit_slope(pts)
    assert f.slope == pytest.approx(2.0) and f.points == 4


def test_fit_skips_failed_points():
    pts = [SweepPoint(i, "DECOY", i, math.exp(-i), 0.5, 1, rate=math.exp(-i)) for i in range(3)]
    pts.append(SweepPoint(3, "DECOY", 3, math.exp(-3), 0.5, 1, error="BoundUnavailable: x"))
    assert fit_slope(pts).points == 3
    assert fit_slope(pts[:2]) is None


def test_bad_point_is_reported_not_raised():
    spec = SweepSpec(losses=(10.0, 20.0, 30.0), mu_signal=0.1, mu_decoy=0.1, modes=("DECOY",))
    pt = run_point((spec, 0, "DECOY", 10.0, 1))
    assert pt.error.startswith("BoundUnavailable")


def test_spec_validation():
    with pytest.raises(ValueError):
        SweepSpec(losses=(1.0, 2.0))
    with pytest.raises(ValueError):
        SweepSpec(modes=("FANCY",))


def test_dps_series_is_fitted():
    spec = SweepSpec(losses=(10.0, 14.0, 18.0), modes=(), dps_mu=0.2, dps_target_clicks=3000,
                     dps_chunk=400_000)
    res = sweep_distance(spec, master_seed=1)
    assert {p.mode for p in res.points} == {"DPS"} and not any(p.error for p in res.points)
    assert res.fits["DPS"].points == 3 and res.fits["DPS"].slope > 0
