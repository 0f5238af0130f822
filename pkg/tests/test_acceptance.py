"""Acceptance suite: one test per criterion, summarized at the end of the run.

Run alone with ``pytest tests/test_acceptance.py -v``; each criterion prints a
PASS/FAIL line in the "acceptance criteria" summary section.
"""

import random
import time
import warnings

import numpy as np
import pytest
from PIL import Image

from apkforge import axml, classifier as clf, dex, enhance, fusion, pipeline
from apkforge.byteplot import bytes_to_gray
from apkforge.errors import BlockTooLarge, ForgeError
from apkforge.pipeline import PipelineConfig

import builders as b
import oracles
from test_axml import GOLDEN

pytestmark = pytest.mark.acceptance


def _pngs(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


def test_c1_full_scale_results(criterion):
    criterion("1 full-scale CNN accuracy on CICMalDroid 2020 (97.131% / 97.256%)")
    pytest.skip("needs the CICMalDroid 2020 corpus and deep CNN training; "
                "not reproducible at desk scale, criteria 2-9 substitute")


def test_c2_pipeline_determinism(criterion, tmp_path):
    criterion("2 pipeline determinism, repeat runs and workers 4 vs 1, < 30 s")
    t0 = time.perf_counter()
    b.write_corpus(tmp_path / "in", per_class=6, seed=21)
    (tmp_path / "in" / "sms" / "fixture.apk").write_bytes(b.sms_apk())
    pipeline.run_pipeline(tmp_path / "in", tmp_path / "a", PipelineConfig(workers=1))
    pipeline.run_pipeline(tmp_path / "in", tmp_path / "b", PipelineConfig(workers=1))
    pipeline.run_pipeline(tmp_path / "in", tmp_path / "c", PipelineConfig(workers=4))
    a = _pngs(tmp_path / "a")
    assert sum(n.endswith(".png") for n in a) == 13
    assert a == _pngs(tmp_path / "b")
    assert a == _pngs(tmp_path / "c")
    assert time.perf_counter() - t0 < 30


def test_c3_kernel_oracle_equivalence(criterion):
    criterion("3 canny/equalize exact, adaptive +-1, lanczos identity and halving +-1 vs naive references, < 60 s")
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_adaptive = 0
    for k in range(100):
        if k % 2:
            img = rng.integers(0, 256, (64, 64), dtype=np.uint8)
        else:
            img = np.kron(rng.integers(0, 256, (8, 8), dtype=np.uint8), np.ones((8, 8), np.uint8))
        assert np.array_equal(enhance.canny(img), oracles.canny_ref(img)), f"canny image {k}"
        assert np.array_equal(enhance.equalize_hist(img), oracles.equalize_ref(img)), f"equalize image {k}"
        ours = enhance.adaptive_threshold(img).astype(int)
        ref, mean = oracles.adaptive_ref(img)
        thr_ours = np.floor(enhance.local_mean(img, 11) + 0.5)
        thr_ref = np.floor(mean + 0.5)
        worst_adaptive = max(worst_adaptive, int(np.abs(thr_ours - thr_ref).max()))
        # outputs may only disagree where the thresholds do
        assert np.all((ours == ref) | (thr_ours != thr_ref))
        assert set(np.unique(ours)) <= {0, 255}
    assert worst_adaptive <= 1

    ident = rng.integers(0, 256, (256, 256), dtype=np.uint8)
    assert np.array_equal(fusion.lanczos_resize(ident, 256, 256), ident)
    ramp = np.tile((np.arange(512) * 255 // 511).astype(np.uint8), (512, 1))
    ours = fusion.lanczos_resize(ramp, 256, 256).astype(int)
    ref = oracles.lanczos_ref(ramp, 256, 256).astype(int)
    assert np.abs(ours - ref).max() <= 1
    assert time.perf_counter() - t0 < 60


def test_c4_enhancement_contracts(criterion, tmp_path):
    criterion("4 binary canny/adaptive outputs, monotone equalize on 1000 histograms, constant-image cases")
    fixtures = [b.sms_apk()] + [b.synthetic_apk(k, random.Random(i)) for i, k in enumerate(["sms", "clean"] * 3)]
    for data in fixtures:
        feat = pipeline.extract_features(data)
        for payload in (feat.dex, feat.manifest, feat.api):
            gray = bytes_to_gray(payload)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", BlockTooLarge)
                for out in (enhance.canny(gray), enhance.adaptive_threshold(gray)):
                    assert set(np.unique(out)) <= {0, 255}

    rng = np.random.default_rng(77)
    for _ in range(1000):
        counts = rng.integers(0, 6, 256) * (rng.random(256) < rng.random())
        if not counts.any():
            counts[rng.integers(256)] = 1
        lut = enhance.equalize_lut(np.repeat(np.arange(256, dtype=np.uint8), counts)[None, :])
        present = np.flatnonzero(counts)
        assert np.all(np.diff(lut[present].astype(int)) >= 0)

    for v in (0, 1, 128, 200, 255):
        const = np.full((24, 24), v, np.uint8)
        assert not enhance.canny(const).any()
        assert (enhance.adaptive_threshold(const) == 255).all()
        assert np.array_equal(enhance.equalize_hist(const), const)


def test_c5_channel_separation(criterion, tmp_path):
    criterion("5 PNG channels equal resized enhanced planes; masks zero excluded planes")
    b.write_corpus(tmp_path / "in", per_class=3, seed=5)
    (tmp_path / "in" / "sms" / "fixture.apk").write_bytes(b.sms_apk())
    for mask in ("rgb", "r", "g", "b", "rg", "gb", "rb"):
        cfg = pipeline.config_from_dict({"channels": mask})
        out = tmp_path / f"out_{mask}"
        records = pipeline.run_pipeline(tmp_path / "in", out, cfg)
        assert all(r.status == "Ok" for r in records)
        for r in records:
            rgb = np.asarray(Image.open(out / r.output_png))
            feat = pipeline.extract_features((tmp_path / "in" / r.apk_path).read_bytes(), cfg)
            planes, _ = pipeline.enhanced_planes(feat, cfg)
            for k, (ch, name) in enumerate(zip("rgb", ("dex", "manifest", "api"))):
                if ch in mask:
                    assert np.array_equal(rgb[..., k], planes[name]), (r.apk_path, ch)
                else:
                    assert not rgb[..., k].any(), (r.apk_path, ch)


def test_c6_parser_correctness_and_fuzz(criterion):
    criterion("6 DEX call list, AXML golden bytes, 10,000-iteration fuzz raises only typed errors, < 120 s")
    t0 = time.perf_counter()
    d = b.sms_dex()
    report = dex.scan_invokes(d, dex.parse_dex(d))
    assert report.invoked == ["Landroid/telephony/SmsManager;->sendTextMessage(VLLLLL)"]
    rich = b.build_dex([b.ClassDef("LA;", [
        b.Method("a", [b.SMS_SEND, b.DEVICE_ID, b.THIRD_PARTY], filler=True),
        b.Method("b", [b.URL_OPEN, b.LOG_D], range_form=True, filler=True)])])
    assert dex.scan_invokes(rich, dex.parse_dex(rich)).invoked == [
        "Landroid/telephony/SmsManager;->sendTextMessage(VLLLLL)",
        "Landroid/telephony/TelephonyManager;->getDeviceId(L)",
        "Landroid/util/Log;->d(ILL)",
        "Ljava/net/URL;->openConnection(L)",
    ]
    for name, node in (("sms_manifest", b.sms_manifest()), ("rich_manifest", b.rich_manifest())):
        doc = axml.decode_axml(b.build_axml(node))
        assert axml.manifest_text_bytes(doc) == (GOLDEN / f"{name}.xml").read_bytes()

    rng = random.Random(10_000)
    seeds_dex = [rich, d]
    seeds_axml = [b.build_axml(b.rich_manifest()), b.build_axml(b.sms_manifest(), utf8=True)]
    typed = clean = 0
    for i in range(10_000):
        for seeds, fn in ((seeds_dex, lambda x: dex.scan_invokes(x, dex.parse_dex(x))),
                          (seeds_axml, axml.decode_axml)):
            buf = bytearray(seeds[i % len(seeds)])
            for _ in range(rng.randint(1, 6)):
                op = rng.random()
                pos = rng.randrange(len(buf))
                if op < 0.7:
                    buf[pos] = rng.randrange(256)
                elif op < 0.95:
                    buf[pos:pos + 4] = rng.choice([b"\xff\xff\xff\xff", b"\x00\x00\x00\x00", b"\xff\xff\xff\x7f"])
                else:
                    del buf[pos:]
                    if not buf:
                        buf = bytearray(b"\0")
            try:
                fn(bytes(buf))
                clean += 1
            except ForgeError:
                typed += 1
    print(f"fuzz: {typed} typed errors, {clean} clean parses")
    assert typed > 0 and clean > 0
    assert time.perf_counter() - t0 < 120


def test_c7_metric_enumeration(criterion):
    criterion("7 metrics over [0,20]^4 within 1e-12 of brute force; worked case 0.8/0.75/0.75/0.75")
    m = clf.Metrics(3, 5, 1, 1)
    assert abs(m.accuracy - 0.8) < 1e-12 and abs(m.precision - 0.75) < 1e-12
    assert abs(m.recall - 0.75) < 1e-12 and abs(m.f1 - 0.75) < 1e-12
    r = range(21)
    for tp in r:
        for tn in r:
            for fp in r:
                for fn in r:
                    got = clf.Metrics(tp, tn, fp, fn)
                    ref = oracles.metrics_ref(tp, tn, fp, fn)
                    assert abs(got.accuracy - ref[0]) <= 1e-12
                    assert abs(got.precision - ref[1]) <= 1e-12
                    assert abs(got.recall - ref[2]) <= 1e-12
                    assert abs(got.f1 - ref[3]) <= 1e-12


def test_c8_classifier_numerics(criterion):
    criterion("8 gradient check < 1e-4 at 5 seeds; same seed gives bit-identical weights")
    classes = ["benign", "sms", "adware"]
    for seed in range(5):
        rng = np.random.default_rng(seed)
        model = clf.SoftmaxModel(rng.normal(0, 0.1, (3, 3 * 8 * 8)), rng.normal(0, 0.1, 3), classes,
                                 hyper=clf.Hyper(l2=1e-4))
        x = rng.random((12, 3 * 8 * 8))
        labels = list(rng.choice(classes, 12))
        assert clf.gradient_check(model, x, labels, n_params=150, seed=seed) < 1e-4
    rng = np.random.default_rng(99)
    x = rng.random((60, 48))
    y = list(rng.choice(classes, 60))
    h = clf.Hyper(learning_rate=0.1, epochs=40, l2=1e-4, batch_size=8)
    w1 = clf.train(x, y, h, seed=123)
    w2 = clf.train(x, y, h, seed=123)
    assert w1.weights.tobytes() == w2.weights.tobytes() and w1.bias.tobytes() == w2.bias.tobytes()


def test_c9_end_to_end_signal(criterion, tmp_path):
    criterion("9 200 synthetic APKs, full pipeline + built-in classifier, 80/20 split: test accuracy >= 0.95, < 5 min")
    t0 = time.perf_counter()
    b.write_corpus(tmp_path / "in", per_class=100, seed=2025, labels=("sms", "clean"))
    cfg = PipelineConfig(workers=4, seed=7)
    records = pipeline.run_pipeline(tmp_path / "in", tmp_path / "ds", cfg)
    assert sum(r.status == "Ok" for r in records) == 200
    train, test = pipeline.split_records(records, 0.2, cfg.seed)
    assert (len(train), len(test)) == (160, 40)

    def feats(rs):
        return np.vstack([clf.featurize(np.asarray(Image.open(tmp_path / "ds" / r.output_png)), 32) for r in rs])

    model = clf.train(feats(train), [r.label for r in train],
                      clf.Hyper(cfg.learning_rate, cfg.epochs, cfg.l2, cfg.batch_size), cfg.seed)
    metrics = clf.evaluate(model, feats(test), [r.label for r in test])
    print(f"test accuracy {metrics.accuracy:.4f} ({metrics.tp}/{metrics.tn}/{metrics.fp}/{metrics.fn})")
    assert metrics.accuracy >= 0.95
    assert time.perf_counter() - t0 < 300
