"""One test per acceptance criterion; the terminal summary lists PASS/FAIL per criterion."""

import itertools
import math

import numpy as np
import pytest
from scipy import stats as sps

from uhrsample.cli import main
from uhrsample.evaluate import ConfusionMatrix, accumulate, coverage, iou_miou, plan_windows
from uhrsample.fusion import build_prompts, gradient_check, random_problem
from uhrsample.msar import MsarConfig, build_pools, pick_anchor, sample_msar
from uhrsample.raster import LabeledRaster, Provenance, Window
from uhrsample.regions import (
    RegionRecord,
    SamplerConfig,
    compose_batch,
    random_crop_batch,
    rank_regions,
    sample_region_gsd,
    synthetic_regions,
    wg_draw_indices,
)
from uhrsample.stats import (
    ClassHistogram,
    balance_residual,
    ce_loss_and_grad,
    pixel_histogram,
    tail_classes,
)
from uhrsample.synth import synth_longtail

LONG_TAIL = [0.7, 0.2, 0.07, 0.03]


@pytest.fixture
def detail(record_property):
    def put(text):
        record_property("detail", text)

    return put


def small_raster(rng, h, w):
    return LabeledRaster(
        rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8),
        rng.integers(0, 6, size=(h, w)).astype(np.uint16),
        scene_id="a",
    )


def test_c01_msar_pool_oracle(detail):
    rng = np.random.default_rng(101)
    mismatches = pools = fallbacks = 0
    for _ in range(500):
        H, W = (int(v) for v in rng.integers(1, 65, size=2))
        h, w = int(rng.integers(1, min(8, H) + 1)), int(rng.integers(1, min(8, W) + 1))
        cfg = MsarConfig(h, w, (2, 3, 4))
        anchor = pick_anchor(H, W, cfg, rng)
        for pool in build_pools(H, W, anchor, cfg):
            k = pool.k
            brute = [
                Window(i, j, k * h, k * w)
                for i in range(0, H - k * h + 1, h)
                for j in range(0, W - k * w + 1, w)
                if i <= anchor.row and anchor.row + h <= i + k * h
                and j <= anchor.col and anchor.col + w <= j + k * w
            ]
            pools += 1
            if brute:
                mismatches += pool.fallback or pool.windows != brute
            else:
                fallbacks += 1
                mismatches += not (pool.fallback and pool.windows[0].contains(anchor))
    detail(f"{pools} pools on 500 rasters, {mismatches} mismatches, {fallbacks} flagged fallbacks")
    assert mismatches == 0


def test_c02_msar_sample_shape(detail):
    rng = np.random.default_rng(102)
    rasters = [small_raster(rng, int(rng.integers(8, 64)), int(rng.integers(8, 64))) for _ in range(25)]
    violations = 0
    for n in range(10_000):
        r = rasters[n % len(rasters)]
        h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        s = sample_msar(r, MsarConfig(h, w, (2, 3, 4)), rng)
        a = s.tiles[0].window
        ok = len(s.tiles) == 4
        ok &= all(t.image.shape[:2] == (h, w) and t.labels.shape == (h, w) for t in s.tiles)
        ok &= np.array_equal(s.tiles[0].image, r.image[a.row : a.row + h, a.col : a.col + w])
        ok &= np.array_equal(s.tiles[0].labels, r.labels[a.row : a.row + h, a.col : a.col + w])
        violations += not ok
    detail(f"10000 samples, {violations} violations")
    assert violations == 0


def test_c03_wg_rescro_distribution(detail):
    n, factor = 10, 0.07
    weights = [1 / (i + n * factor) for i in range(n)]
    p = np.array([wt / math.fsum(weights) for wt in weights])
    draws = wg_draw_indices(n, 1_000_000, factor, np.random.default_rng(103))
    freq = np.bincount(draws, minlength=n) / draws.size
    dev = float(np.max(np.abs(freq - p)))
    detail(f"p0={p[0]:.4f}, max |freq - p| = {dev:.5f} (tol 0.005)")
    assert abs(p[0] - 0.403) < 5e-4
    assert dev <= 0.005


def test_c04_ranking_law(detail):
    rng = np.random.default_rng(104)
    violations = 0
    for _ in range(200):
        c = int(rng.integers(2, 7))
        hist = ClassHistogram(rng.integers(0, 50, size=c) + rng.integers(0, 2, size=c))
        if hist.total == 0:
            continue
        recs = []
        for _ in range(int(rng.integers(1, 30))):
            counts = rng.integers(0, 4, size=c)
            counts[int(rng.integers(c))] += 1
            prim = int(np.argmax(counts))
            box = Window(int(rng.integers(0, 4)), int(rng.integers(0, 4)), 2, 2)
            recs.append(RegionRecord(str(rng.integers(0, 3)), box, tuple(int(v) for v in counts),
                                     prim, int(np.count_nonzero(counts))))
        shares = hist.shares()
        ranked = rank_regions(recs, hist)
        for a, b in itertools.combinations(ranked, 2):
            ka = (shares[a.primary_class], -a.richness, a.scene_id, a.bbox.row, a.bbox.col)
            kb = (shares[b.primary_class], -b.richness, b.scene_id, b.bbox.row, b.bbox.col)
            violations += ka > kb
        for _ in range(5):
            perm = [recs[i] for i in rng.permutation(len(recs))]
            violations += rank_regions(perm, hist) != ranked
    detail(f"200 record sets, {violations} order or permutation violations")
    assert violations == 0


def test_c05_gsd_preservation(detail):
    rng = np.random.default_rng(105)
    rasters = [small_raster(rng, int(rng.integers(40, 120)), int(rng.integers(40, 120))) for _ in range(10)]
    bad = 0
    for n in range(10_000):
        r = rasters[n % len(rasters)]
        th, tw = int(rng.integers(1, 33)), int(rng.integers(1, 33))
        bh, bw = int(rng.integers(1, r.height + 1)), int(rng.integers(1, r.width + 1))
        box = Window(int(rng.integers(0, r.height - bh + 1)), int(rng.integers(0, r.width - bw + 1)), bh, bw)
        rec = RegionRecord("a", box, (1,), 0, 1)
        t = sample_region_gsd(r, rec, SamplerConfig(train_h=th, train_w=tw), rng)
        w = t.window
        same = (
            t.provenance is Provenance.SRRTA_GSD
            and t.gsd == r.gsd
            and np.array_equal(t.image, r.image[w.row : w.row + th, w.col : w.col + tw])
            and np.array_equal(t.labels, r.labels[w.row : w.row + th, w.col : w.col + tw])
        )
        bad += not same
    detail(f"10000 tiles, {bad} with resampled pixels")
    assert bad == 0


def test_c06_long_tail_lift(detail):
    # One synthetic 2048^2 scene per seed; default batch composition (anchor and
    # train 512, scales 2,3,4, top-4 regions, gsd mode) against the same number
    # of uniformly placed 512^2 crops.
    wins = 0
    for seed in range(100):
        r = synth_longtail(seed, 2048, 2048, LONG_TAIL, scene_id="s")
        hist = pixel_histogram(r, 4)
        tail = tail_classes(hist)
        ranked = rank_regions(synthetic_regions(r, 4), hist)
        batch = compose_batch(r, ranked, MsarConfig(512, 512), SamplerConfig(),
                              np.random.default_rng([seed, 1]))
        base = random_crop_batch(r, len(batch.tiles), 512, 512, np.random.default_rng([seed, 2]))
        share = [pixel_histogram(t, 4).counts[tail].sum() / pixel_histogram(t, 4).total
                 for t in (batch.tiles, base)]
        wins += share[0] > share[1]
    p = sps.binomtest(wins, 100, 0.5, alternative="greater").pvalue
    detail(f"{wins}/100 paired wins (need >= 95), one-sided sign test p = {p:.3g}")
    assert wins >= 95 and p < 0.01


def test_c07_fusion_gradients(detail):
    rng = np.random.default_rng(107)
    worst = 0.0
    for _ in range(50):
        worst = max(worst, *gradient_check(*random_problem(rng)).values())
    detail(f"max relative error {worst:.2e} over 50 shapes (tol 1e-5)")
    assert worst <= 1e-5


TABLE = """
Buildings & roof, building, built-up, construction, architecture, facility, house, skyscraper, rural residential, urban residential
Transportation & stadium, railway station, airport
Roads & street, road, highway, path, route, lane, avenue, way
Water Bodies & liquid, water, river, lake, pond, ocean
Barren & barren land, wasteland, unlabeled
Forest & woodland, jungle, bush, forest, woods, grove
Agriculture & farming, farmland, agrarian, ranching, agricultural land, irrigated field
Greenhouses & greenhouse, hothouse, glasshouse
Meadows & shrubs, meadow, herbs, grass, grassland, pasture, prairie, natural meadow, artificial meadow
"""


def test_c08_prompt_bank(detail):
    terms = [t.strip() for line in TABLE.strip().splitlines() for t in line.split("&")[1].split(",")]
    expected = [f"A satellite image of {t}" for t in terms]
    prompts = build_prompts()
    detail(f"{len(prompts)} prompts, match table order: {prompts == expected}")
    assert len(prompts) == 54 and prompts == expected


def test_c09_gradient_balance(detail):
    c = 4
    labels = np.repeat(np.arange(c), 3)
    y = np.eye(c)[labels]
    uniform = np.full((len(labels), c), 1 / c)
    res = balance_residual(uniform, y)
    _, grad = ce_loss_and_grad(np.zeros((len(labels), c)), y)
    skew = np.eye(c)[[1] * 9 + [0, 2, 3]]
    _, g_skew = ce_loss_and_grad(np.zeros((12, c)), skew)
    others = [g_skew[i] for i in range(c) if i != 1]
    detail(f"balanced residual {res.tolist()}, skewed grad {np.round(g_skew, 4).tolist()}")
    assert np.all(res == 0) and np.all(grad == 0)
    assert g_skew[1] < 0 and all(g > 0 for g in others)


def test_c10_evaluation_oracle(detail):
    res = iou_miou(ConfusionMatrix([[3, 1], [2, 4]]))
    ok_example = res.iou.tolist() == [0.5, 4 / 7] and abs(res.miou - 0.5357142857142857) <= 1e-12
    ok_identity = all(iou_miou(ConfusionMatrix(np.eye(c, dtype=int))).miou == 1.0 for c in range(1, 9))
    rng = np.random.default_rng(110)
    mismatches = 0
    for _ in range(100):
        c = int(rng.integers(2, 8))
        gt = rng.integers(0, c, size=(24, 24)).astype(np.uint16)
        gt[rng.random(gt.shape) < 0.05] = 65535
        pred = rng.integers(0, c, size=(24, 24)).astype(np.uint16)
        naive = np.zeros((c, c), np.int64)
        for g, p in zip(gt.ravel().tolist(), pred.ravel().tolist()):
            if g != 65535:
                naive[g, p] += 1
        mismatches += not np.array_equal(accumulate(ConfusionMatrix.zeros(c), gt, pred).m, naive)
    detail(f"IoU {res.iou.tolist()}, mIoU {res.miou:.12f}, identity ok {ok_identity}, "
           f"{mismatches}/100 accumulate mismatches")
    assert ok_example and ok_identity and mismatches == 0


def test_c11_window_plan(detail):
    plan = plan_windows(5120, 5120, (512, 512), (341, 341))
    full = coverage(plan).min() >= 1
    rng = np.random.default_rng(111)
    gaps = 0
    for _ in range(500):
        H, W = (int(v) for v in rng.integers(512, 2200, size=2))
        plan_r = plan_windows(H, W, (512, 512), (341, 341))
        gaps += coverage(plan_r).min() < 1
    detail(f"{len(plan.windows)} windows at 5120^2, full coverage {full}, {gaps}/500 random plans with gaps")
    assert len(plan.windows) == 225 and full and gaps == 0


def test_c12_determinism(detail, tmp_path):
    assert main(["synth", "--out", str(tmp_path / "data"), "--seed", "12", "--size", "256",
                 "--count", "3", "--freqs", "0.7,0.2,0.07,0.03"]) == 0
    manifest = str(tmp_path / "data" / "manifest.tsv")
    assert main(["regions-build", "--out", str(tmp_path / "idx"), "--manifest", manifest,
                 "--classes", "4"]) == 0
    index = str(tmp_path / "idx" / "regions.tsv")
    runs = {
        "msar-sample": ["--anchor", "32", "--count", "4"],
        "regions-sample gsd": ["--index", index, "--train", "32"],
        "regions-sample resize": ["--index", index, "--train", "32", "--mode", "resize"],
        "regions-sample wgrescro": ["--index", index, "--train", "32", "--mode", "wgrescro"],
        "batch": ["--index", index, "--anchor", "32", "--count", "3"],
        "batch dataset-level": ["--index", index, "--anchor", "32", "--count", "3", "--dataset-level"],
    }
    differing = []
    for name, extra in runs.items():
        cmd = name.split()[0]
        outputs = []
        for i, workers in enumerate(("1", "1", "4")):
            out = tmp_path / f"{name.replace(' ', '_')}_{i}"
            assert main([cmd, "--out", str(out), "--manifest", manifest, "--seed", "2024",
                         "--workers", workers, *extra]) == 0
            outputs.append({p.name: p.read_bytes() for p in sorted(out.glob("*"))
                            if p.name != "config.txt"})
        if not (outputs[0] == outputs[1] == outputs[2]):
            differing.append(name)
    detail(f"{len(runs)} sampling runs x 3 (workers 1,1,4), differing: {differing or 'none'}")
    assert not differing
