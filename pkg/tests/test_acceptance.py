"""Acceptance suite. Each test carries a ``criterion`` marker and is reported in the terminal summary.

The desk-scale end-to-end run trains for real (about ten minutes on one core).
"""

import struct
import time

import numpy as np
import oracles
import pytest

from adnet.diagnostics import TOLERANCE, gradient_suite
from adnet.errors import FormatError, IncompatibleError, ManifestError
from adnet.metrics import PSNR_CAP, evaluate, psnr, ssim
from adnet.models import build_model, desk_eg_restormer, desk_lenet, load_checkpoint, save_checkpoint
from adnet.nn import EGA, EGAB
from adnet.routing import (
    ADNetPipeline,
    Branch,
    CalibrationRecord,
    RandomRoutingPipeline,
    calibrate_threshold,
    collect_calibration_records,
    laplacian_variance,
    route,
)
from adnet.synth import (
    SynthParams,
    build_dataset,
    gaussian_blur,
    random_payloads,
    read_manifest,
    render_qr,
    write_manifest,
)
from adnet.tensor import AdamW, Tensor, l1_loss
from adnet.trainer import desk_lenet_training, train

DATA_SEED = 2024


def img4(a):
    return Tensor(np.asarray(a, dtype=np.float64)[None, None])


@pytest.mark.criterion("gradient suite: all ops, blocks and desk models within 1e-4, under 2 min")
def test_gradient_suite():
    start = time.perf_counter()
    results = gradient_suite()
    elapsed = time.perf_counter() - start
    names = {r.name for r in results}
    assert {"EGA", "EGAB", "SGDB", "ESAB", "EG-Restormer (desk)", "LENet (desk)"} <= names
    worst = max(results, key=lambda r: r.max_rel_error)
    print(f"\ngradient suite: {len(results)} checks, worst {worst.name} {worst.max_rel_error:.2e}, {elapsed:.1f}s")
    assert worst.max_rel_error <= TOLERANCE
    assert elapsed < 120


@pytest.mark.criterion("EGAB with zero edge weight equals plain transposed attention bit-exactly (100 float32 inputs)")
def test_egab_reduction():
    rng = np.random.default_rng(7)
    block = EGAB(8, heads=2, rng=rng)
    assert block.edge_weight.data[0] == 0.0
    for i in range(100):
        x = rng.standard_normal((1, 8, 8, 8)).astype(np.float32)
        a = block(Tensor(x)).data
        b = block(Tensor(x), edge_guided=False).data
        assert a.dtype == np.float32
        assert a.tobytes() == b.tobytes(), f"input {i}"
    # the plain path really is the dense reference without edge modulation
    x = rng.standard_normal((1, 8, 8, 8))
    ref = oracles.egab(block.astype(np.float64), x)
    np.testing.assert_allclose(block(Tensor(x), edge_guided=False).data, ref, atol=1e-6)


@pytest.mark.criterion("EGA: constant to zero, axis and diagonal steps select their Sobel map, fixtures within 1e-6")
def test_ega_fixtures():
    ega = EGA()
    for value in (0.0, 0.7):
        np.testing.assert_allclose(ega(img4(np.full((6, 6), value))).data, 0.0, atol=1e-6)

    # vertical edge: the horizontal-gradient kernel answers 4 on both step columns
    x = np.zeros((5, 5))
    x[:, 2:] = 1.0
    resp = ega.responses(img4(x)).data[0]
    assert np.all(np.argmax(resp[:, :, 1:3], axis=0) == 0)
    expected = np.zeros((5, 5))
    expected[:, 1:3] = 4.0 / (4.0 + 1e-8)
    np.testing.assert_allclose(ega(img4(x)).data[0, 0], expected, atol=1e-6)

    resp = ega.responses(img4(x.T)).data[0]
    assert np.all(np.argmax(resp[:, 1:3, :], axis=0) == 1)
    np.testing.assert_allclose(ega(img4(x.T)).data[0, 0], expected.T, atol=1e-6)

    i, j = np.indices((6, 6))
    for diag in ((j > i).astype(float), (i + j > 5).astype(float)):
        resp = ega.responses(img4(diag)).data[0]
        ref_resp, ref_map = oracles.edge_map(diag)
        np.testing.assert_allclose(resp, ref_resp, atol=1e-6)
        inner = np.zeros_like(diag, dtype=bool)
        inner[1:-1, 1:-1] = True
        edge = inner & (ref_resp.max(axis=0) > 0)
        assert edge.any()
        assert np.all(resp[2:].max(axis=0)[edge] > resp[:2].max(axis=0)[edge])
        np.testing.assert_allclose(ega(img4(diag)).data[0, 0], ref_map, atol=1e-6)


def _records(dec, non):
    return [CalibrationRecord(f"d{i}", float(v), True) for i, v in enumerate(dec)] + \
           [CalibrationRecord(f"n{i}", float(v), False) for i, v in enumerate(non)]


@pytest.mark.criterion("threshold is the hand-computed midpoint on 50 sets; strict v > tau routing; separable sets route by label")
def test_threshold_and_routing():
    rng = np.random.default_rng(11)
    for _ in range(50):
        dec = rng.uniform(0, 0.2, size=rng.integers(1, 12))
        non = rng.uniform(0, 0.2, size=rng.integers(1, 12))
        cal = calibrate_threshold(_records(dec, non))
        assert cal.tau == (sorted(dec)[0] + sorted(non)[-1]) / 2

    tau = 0.05
    below, above = np.nextafter(tau, 0.0), np.nextafter(tau, 1.0)
    assert route(tau, tau).branch is Branch.SEVERE
    assert route(below, tau).branch is Branch.SEVERE
    assert route(above, tau).branch is Branch.MILD
    assert route(0.0, 0.0).branch is Branch.SEVERE

    for _ in range(50):
        cut = rng.uniform(0.01, 0.2)
        recs = _records(rng.uniform(cut, 0.3, size=6), rng.uniform(0.0, cut, size=6))
        cal = calibrate_threshold(recs)
        assert cal.separable
        for r in recs:
            assert (route(r.lv_score, cal.tau).branch is Branch.MILD) == r.decodable


@pytest.mark.criterion("LV: 5x5 impulse gives 20/9 within 1e-9; strictly decreasing over sigma 0.5, 1, 2 on 10 QR fixtures")
def test_laplacian_variance():
    impulse = np.zeros((5, 5))
    impulse[2, 2] = 1.0
    assert abs(laplacian_variance(impulse) - 20 / 9) <= 1e-9
    assert abs(oracles.laplacian_variance(impulse) - 20 / 9) <= 1e-9
    for payload in random_payloads(np.random.default_rng(5), 10, 10):
        img = render_qr(payload)
        lv = [laplacian_variance(gaussian_blur(img, s)) for s in (0.5, 1.0, 2.0)]
        assert lv[0] > lv[1] > lv[2], payload


@pytest.mark.criterion("PSNR/SSIM match direct recomputation within 1e-9 dB / 1e-6 on 100 pairs; identical images hit cap / 1.0")
def test_metric_oracles():
    rng = np.random.default_rng(3)
    for _ in range(100):
        h, w = rng.integers(11, 24, size=2)
        a = rng.uniform(size=(h, w))
        b = np.clip(a + rng.normal(0, rng.uniform(0.01, 0.3), size=(h, w)), 0, 1)
        assert abs(psnr(a, b) - oracles.psnr(a, b)) <= 1e-9
        assert abs(ssim(a, b) - oracles.ssim_gray(a, b)) <= 1e-6
        assert psnr(a, a) == PSNR_CAP
        assert ssim(a, a) == 1.0


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """200/40 synthetic pairs and a desk LENet trained with the library defaults."""
    root = tmp_path_factory.mktemp("desk")
    train_m, test_m = build_dataset(root / "data", 200, 40, SynthParams(), seed=DATA_SEED)
    config = desk_lenet_training()
    start = time.perf_counter()
    result = train(config, train_m, test_m, out_dir=root / "run")
    elapsed = time.perf_counter() - start
    return {"root": root, "train": train_m, "test": test_m, "result": result, "seconds": elapsed}


@pytest.mark.criterion("desk end-to-end: L1 halves, PSNR +1 dB, restored DR above blurred DR, training under 30 min")
def test_desk_end_to_end(desk_run, decoder):
    res = desk_run["result"]
    blurred = evaluate(lambda im: im, desk_run["test"], decoder, name="identity").aggregates
    restored = evaluate(res.model.restore, desk_run["test"], decoder, name="lenet").aggregates
    print(f"\ntrain {desk_run['seconds']:.0f}s  L1 {res.probe_l1_initial:.4f} -> {res.probe_l1_final:.4f}  "
          f"PSNR {blurred['mean_psnr']:.2f} -> {restored['mean_psnr']:.2f}  "
          f"DR {blurred['dr_percent']:.1f} -> {restored['dr_percent']:.1f}")
    checks = {
        "training under 30 min": desk_run["seconds"] < 30 * 60,
        "(a) probe L1 at most half": res.probe_l1_final <= 0.5 * res.probe_l1_initial,
        "(b) PSNR gain of 1 dB": restored["mean_psnr"] >= blurred["mean_psnr"] + 1.0,
        "(c) restored DR above blurred DR": restored["dr_percent"] > blurred["dr_percent"],
    }
    for name, ok in checks.items():
        print(f"  {'ok  ' if ok else 'FAIL'} {name}")
    assert all(checks.values()), [name for name, ok in checks.items() if not ok]


class GroundTruthModel:
    """Strong-model stand-in: returns the sharp image after a fixed delay."""

    def __init__(self, manifest, delay=0.1):
        self.delay = delay
        self.table = {}
        for i in range(len(manifest)):
            sharp, blurred = manifest.load_pair(i)
            self.table[blurred.tobytes()] = sharp

    def __call__(self, image):
        time.sleep(self.delay)
        return self.table[np.asarray(image, dtype=np.float32).tobytes()]


@pytest.mark.criterion("ADNet ordering: DR equals strong-only, lower mean time than a 100 ms strong model, random routing DR not above")
def test_adnet_ordering(desk_run, decoder):
    lenet = desk_run["result"].model.restore
    strong = GroundTruthModel(desk_run["test"])
    recs = collect_calibration_records(desk_run["train"], lenet, decoder)
    tau = calibrate_threshold(recs).tau

    strong_only = evaluate(strong, desk_run["test"], decoder, name="strong").aggregates
    routed = evaluate(ADNetPipeline(lenet, strong, tau), desk_run["test"], decoder, name="adnet")
    rand = evaluate(RandomRoutingPipeline(lenet, strong, seed=1), desk_run["test"], decoder, name="random").aggregates
    agg = routed.aggregates
    mild_hits = sum(r.trace == ["LE"] for r in routed.rows)
    print(f"\ntau {tau:.5f}  LENet-only acceptances {mild_hits}/{agg['count']}  "
          f"DR strong {strong_only['dr_percent']:.1f} adnet {agg['dr_percent']:.1f} random {rand['dr_percent']:.1f}  "
          f"time strong {strong_only['avg_time_s']:.3f}s adnet {agg['avg_time_s']:.3f}s")
    assert agg["dr_percent"] == strong_only["dr_percent"]
    assert agg["avg_time_s"] < strong_only["avg_time_s"]
    assert rand["dr_percent"] <= agg["dr_percent"]


@pytest.mark.criterion("persistence: checkpoint and manifest round trips bit-exact, corrupted files rejected with typed errors")
def test_persistence(tmp_path):
    rng = np.random.default_rng(9)
    for make in (desk_lenet, desk_eg_restormer):
        model = build_model(make())
        for p in model.parameters():
            p.data = p.data + rng.standard_normal(p.shape).astype(np.float32) * 0.01
        opt = AdamW(model.parameters(), lr=1e-3)
        x = Tensor(rng.uniform(size=(1, 3, 16, 16)).astype(np.float32))
        l1_loss(model(x), x).backward()
        opt.step()
        path = save_checkpoint(model, tmp_path / f"{make.__name__}.ckpt", step=3, optimizer=opt.state)
        ck = load_checkpoint(path, expected_config=make())
        a, b = model.state_dict(), ck.build().state_dict()
        assert list(a) == list(b) and all(a[k].tobytes() == b[k].tobytes() for k in a)
        assert all(m.tobytes() == n.tobytes() for m, n in zip(ck.optimizer.m, opt.state.m))
        assert ck.step == 3

        blob = path.read_bytes()
        for name, bad in (("truncated", blob[:len(blob) // 2]), ("magic", b"XXXXXXXX" + blob[8:]),
                          ("data", blob[:-2] + bytes([blob[-2] ^ 0x55]) + blob[-1:]),
                          ("version", blob[:8] + struct.pack("<I", 999) + blob[12:])):
            (tmp_path / "bad.ckpt").write_bytes(bad)
            with pytest.raises((FormatError, IncompatibleError)):
                load_checkpoint(tmp_path / "bad.ckpt")
    with pytest.raises(IncompatibleError):
        load_checkpoint(tmp_path / "desk_lenet.ckpt", expected_config=desk_eg_restormer())

    train_m, _ = build_dataset(tmp_path / "ds", 4, 2, SynthParams(), seed=1)
    again = read_manifest(tmp_path / "ds" / "train")
    assert again.to_dict() == train_m.to_dict()
    manifest_file = tmp_path / "ds" / "train" / "manifest"
    assert write_manifest(again, tmp_path / "copy").read_bytes() == manifest_file.read_bytes()
    text = manifest_file.read_text()
    manifest_file.write_text(text[: len(text) // 2])
    with pytest.raises(ManifestError):
        read_manifest(tmp_path / "ds" / "train")
