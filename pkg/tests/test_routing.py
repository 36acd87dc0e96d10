import json
import logging

import numpy as np
import oracles
import pytest

from adnet.errors import CalibrationError, ContractError, DimensionError
from adnet.routing import (
    Branch,
    CalibrationRecord,
    ADNetPipeline,
    RandomRoutingPipeline,
    adnet_restore,
    calibrate_threshold,
    collect_calibration_records,
    grayscale,
    laplacian_variance,
    load_tau,
    route,
    save_tau,
    write_calibration_report,
)
from adnet.synth import DatasetManifest, SynthParams, build_dataset, gaussian_blur, random_payloads, render_qr


def records(dec, non):
    return [CalibrationRecord(f"d{i}", v, True) for i, v in enumerate(dec)] + \
           [CalibrationRecord(f"n{i}", v, False) for i, v in enumerate(non)]


class TestLaplacianVariance:
    def test_impulse(self):
        img = np.zeros((5, 5))
        img[2, 2] = 1.0
        assert abs(laplacian_variance(img) - 20 / 9) <= 1e-9

    def test_constant_zero(self):
        assert laplacian_variance(np.full((7, 9, 3), 0.3)) == pytest.approx(0.0, abs=1e-20)

    def test_luma(self):
        img = np.zeros((1, 1, 3))
        img[0, 0] = (1, 1, 1)
        assert grayscale(img)[0, 0] == pytest.approx(1.0)
        img[0, 0] = (1, 0, 0)
        assert grayscale(img)[0, 0] == pytest.approx(0.299)

    def test_matches_loop_oracle(self, rng):
        for _ in range(20):
            img = rng.uniform(size=(9, 11, 3))
            assert laplacian_variance(img) == pytest.approx(oracles.laplacian_variance(grayscale(img)), abs=1e-12)

    def test_decreases_with_blur(self):
        for p in random_payloads(np.random.default_rng(3), 10, 8):
            img = render_qr(p)
            lv = [laplacian_variance(gaussian_blur(img, s)) for s in (0.5, 1.0, 2.0)]
            assert lv[0] > lv[1] > lv[2]

    def test_too_small(self):
        with pytest.raises(DimensionError):
            laplacian_variance(np.zeros((2, 5)))


class TestCalibration:
    def test_worked_examples(self, caplog):
        cal = calibrate_threshold(records([120, 150], [60, 80]))
        assert cal.tau == 100 and cal.separable
        with caplog.at_level(logging.WARNING):
            cal = calibrate_threshold(records([50, 150], [90]))
        assert cal.tau == 70 and not cal.separable
        assert "overlap" in caplog.text

    @pytest.mark.parametrize("dec,non", [([1.0], []), ([], [1.0])])
    def test_empty_class(self, dec, non):
        with pytest.raises(CalibrationError, match="enlarge"):
            calibrate_threshold(records(dec, non))

    def test_negative_score(self):
        with pytest.raises(ContractError):
            CalibrationRecord("x", -0.1, True)

    def test_randomized_midpoints(self, rng):
        for _ in range(50):
            dec = list(rng.uniform(0, 10, size=rng.integers(1, 8)))
            non = list(rng.uniform(0, 10, size=rng.integers(1, 8)))
            cal = calibrate_threshold(records(dec, non))
            assert cal.tau == (min(dec) + max(non)) / 2
            assert cal.separable == (min(dec) > max(non))

    def test_separable_sets_route_by_label(self, rng):
        for _ in range(50):
            cut = rng.uniform(1, 9)
            recs = records(rng.uniform(cut, 10, size=5), rng.uniform(0, cut, size=5))
            cal = calibrate_threshold(recs)
            assert cal.separable
            for r in recs:
                assert (route(r.lv_score, cal.tau).branch is Branch.MILD) == r.decodable

    def test_report_and_tau_store(self, tmp_path):
        recs = records([3.0], [1.0])
        cal = calibrate_threshold(recs)
        data = json.loads(write_calibration_report(recs, cal, tmp_path / "cal.json").read_text())
        assert data["calibration"]["tau"] == 2.0 and len(data["records"]) == 2
        save_tau(cal.tau, tmp_path / "tau.json", source="test")
        assert load_tau(tmp_path / "tau.json") == 2.0


class TestRoute:
    @pytest.mark.parametrize("v,branch", [(150, Branch.MILD), (100, Branch.SEVERE), (50, Branch.SEVERE),
                                          (np.nextafter(100, 200), Branch.MILD)])
    def test_strict_threshold(self, v, branch):
        d = route(v, 100)
        assert d.branch is branch and d.v == v and d.tau == 100

    def test_network_names(self):
        assert Branch.MILD.network == "LENet" and Branch.SEVERE.network == "EG-Restormer"

    @pytest.mark.parametrize("v,tau", [(float("nan"), 1.0), (1.0, float("nan")), (float("inf"), 1.0)])
    def test_non_finite(self, v, tau):
        with pytest.raises(ContractError):
            route(v, tau)


class Recorder:
    def __init__(self, fn):
        self.fn, self.calls = fn, 0

    def __call__(self, image):
        self.calls += 1
        return self.fn(image)


SHARP = render_qr("ROUTE-ME")
GRAY = np.full_like(SHARP, 0.5)


class TestAdnetRestore:
    def test_mild_decodes_at_lenet(self, decoder):
        le, eg = Recorder(lambda x: x), Recorder(lambda x: GRAY)
        out = adnet_restore(SHARP, le, eg, tau=0.0, decoder=decoder)
        assert out.trace == ["LE"] and out.decode.payload == "ROUTE-ME"
        assert (le.calls, eg.calls) == (1, 0)

    def test_mild_failure_reroutes_original(self, decoder):
        seen = []
        le = Recorder(lambda x: GRAY)
        eg = Recorder(lambda x: seen.append(x) or x)
        out = adnet_restore(SHARP, le, eg, tau=0.0, decoder=decoder)
        assert out.trace == ["LE", "EG"] and out.decode.payload == "ROUTE-ME"
        assert seen[0] is SHARP

    def test_severe_skips_lenet(self, decoder):
        le, eg = Recorder(lambda x: x), Recorder(lambda x: x)
        out = adnet_restore(SHARP, le, eg, tau=1e9, decoder=decoder)
        assert out.trace == ["EG"] and le.calls == 0
        assert out.decision.branch is Branch.SEVERE

    def test_both_fail_returns_eg_output(self, decoder):
        out = adnet_restore(SHARP, lambda x: GRAY, lambda x: GRAY * 0.9, tau=0.0, decoder=decoder)
        assert out.trace == ["LE", "EG"] and not out.decode.ok
        assert np.array_equal(out.image, GRAY * 0.9)

    def test_pipeline_wrapper(self, decoder):
        pipe = ADNetPipeline(lambda x: x, lambda x: x, tau=0.0, decoder=decoder)
        assert pipe(SHARP).trace == ["LE"]

    def test_random_routing_never_reroutes(self, decoder):
        pipe = RandomRoutingPipeline(lambda x: GRAY, lambda x: GRAY, seed=1, decoder=decoder)
        traces = [pipe(SHARP).trace for _ in range(20)]
        assert all(len(t) == 1 for t in traces)
        assert {t[0] for t in traces} == {"LE", "EG"}


@pytest.fixture(scope="module")
def spread(tmp_path_factory):
    root = tmp_path_factory.mktemp("cal")
    return build_dataset(root, 0, 20, params=SynthParams(min_extent=3, max_extent=19), seed=8)[1]


class TestCollect:
    def test_records_reproducible(self, spread, decoder):
        a = collect_calibration_records(spread, lambda x: x, decoder)
        b = collect_calibration_records(spread, lambda x: x, decoder)
        assert a == b and len(a) == 20
        assert all(r.lv_score >= 0 for r in a)

    def test_all_decodable_cannot_calibrate(self, spread, decoder):
        sharp = {spread.load_pair(i)[1].tobytes(): spread.load_pair(i)[0] for i in range(len(spread))}
        recs = collect_calibration_records(spread, lambda x: sharp[x.tobytes()], decoder)
        assert all(r.decodable for r in recs)
        with pytest.raises(CalibrationError):
            calibrate_threshold(recs)

    def test_empty_manifest(self, decoder):
        assert collect_calibration_records(DatasetManifest(split="test", entries=[]), lambda x: x, decoder) == []
