import numpy as np
import pytest
from scipy import stats as sps

from uhrsample.msar import MsarConfig, build_pools, pick_anchor, sample_msar
from uhrsample.raster import LabeledRaster, Provenance, Window


def brute_pool(H, W, anchor, h, w, k):
    out = []
    for i in range(0, H - k * h + 1):
        for j in range(0, W - k * w + 1):
            if i % h or j % w:
                continue
            win = Window(i, j, k * h, k * w)
            if win.contains(anchor):
                out.append(win)
    return out


def raster(h, w, seed=0):
    rng = np.random.default_rng(seed)
    return LabeledRaster(
        rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8),
        rng.integers(0, 5, size=(h, w)).astype(np.uint16),
        scene_id="m",
    )


def test_config_validation():
    with pytest.raises(ValueError):
        MsarConfig(8, 8, (1, 2))
    with pytest.raises(ValueError):
        MsarConfig(8, 8, (3, 2))
    with pytest.raises(ValueError):
        MsarConfig(0, 8)
    assert MsarConfig(8, 8, ()).scales == ()


def test_anchor_single_position():
    cfg = MsarConfig(512, 512)
    rng = np.random.default_rng(0)
    assert {pick_anchor(512, 512, cfg, rng) for _ in range(20)} == {Window(0, 0, 512, 512)}


def test_anchor_too_large():
    with pytest.raises(ValueError):
        pick_anchor(8, 8, MsarConfig(9, 2), np.random.default_rng(0))


def test_anchor_uniform_over_49_positions():
    cfg = MsarConfig(2, 2)
    rng = np.random.default_rng(1)
    counts = np.zeros((7, 7))
    for _ in range(100_000):
        a = pick_anchor(8, 8, cfg, rng)
        counts[a.row, a.col] += 1
    assert np.all(counts > 0)
    assert sps.chisquare(counts.ravel()).pvalue > 0.01


def test_anchor_deterministic():
    cfg = MsarConfig(3, 5)
    a = [pick_anchor(40, 40, cfg, np.random.default_rng(9)) for _ in range(3)]
    assert a[0] == a[1] == a[2]


def test_pool_worked_example():
    pools = build_pools(8, 8, Window(2, 2, 2, 2), MsarConfig(2, 2, (2,)))
    assert {(w.row, w.col) for w in pools[0].windows} == {(0, 0), (0, 2), (2, 0), (2, 2)}
    assert all((w.h, w.w) == (4, 4) for w in pools[0].windows)
    assert not pools[0].fallback


def test_origin_anchor_in_every_pool():
    pools = build_pools(64, 48, Window(0, 0, 4, 3), MsarConfig(4, 3, (2, 3, 4)))
    for pool in pools:
        assert Window(0, 0, 4 * pool.k, 3 * pool.k) in pool.windows


def test_oversized_scale_falls_back_to_full_height():
    pools = build_pools(10, 40, Window(3, 4, 4, 4), MsarConfig(4, 4, (3,)))
    (pool,) = pools
    assert pool.fallback and len(pool.windows) == 1
    win = pool.windows[0]
    assert (win.row, win.h) == (0, 10) and win.w == 12
    assert win.contains(Window(3, 4, 4, 4))


def test_offgrid_edge_anchor_falls_back():
    # anchor rows 7..8 of 9: no 4-row window on the 2-grid holds row 8
    anchor = Window(7, 0, 2, 2)
    assert brute_pool(9, 8, anchor, 2, 2, 2) == []
    (pool,) = build_pools(9, 8, anchor, MsarConfig(2, 2, (2,)))
    assert pool.fallback
    assert pool.windows[0].contains(anchor)
    pool.windows[0].check_bounds(9, 8)


def test_pools_match_brute_force_randomized():
    rng = np.random.default_rng(2)
    for _ in range(300):
        H, W = rng.integers(1, 65, size=2)
        h, w = int(rng.integers(1, min(8, H) + 1)), int(rng.integers(1, min(8, W) + 1))
        cfg = MsarConfig(h, w, (2, 3, 4))
        anchor = pick_anchor(H, W, cfg, rng)
        for pool in build_pools(H, W, anchor, cfg):
            ref = brute_pool(H, W, anchor, h, w, pool.k)
            if ref:
                assert pool.windows == ref and not pool.fallback
            else:
                assert pool.fallback and len(pool.windows) == 1
                assert pool.windows[0].contains(anchor)


def test_sample_shapes_and_provenance():
    r = raster(64, 64)
    cfg = MsarConfig(8, 8)
    s = sample_msar(r, cfg, np.random.default_rng(3))
    assert len(s.tiles) == 4
    assert [t.scale for t in s.tiles] == [1, 2, 3, 4]
    assert s.tiles[0].provenance is Provenance.ANCHOR
    assert all(t.provenance is Provenance.MSAR_K for t in s.tiles[1:])
    a = s.anchor
    assert np.array_equal(s.tiles[0].image, r.image[a.row : a.bottom, a.col : a.right])
    for t in s.tiles:
        assert t.image.shape == (8, 8, 3) and t.labels.shape == (8, 8)


def test_sample_without_scales_is_anchor_only():
    s = sample_msar(raster(16, 16), MsarConfig(4, 4, ()), np.random.default_rng(0))
    assert len(s.tiles) == 1


def test_source_windows_contain_anchor():
    cfg = MsarConfig(3, 4)
    rng = np.random.default_rng(4)
    for _ in range(10_000):
        H, W = rng.integers(3, 40), rng.integers(4, 40)
        anchor = pick_anchor(H, W, cfg, rng)
        for pool in build_pools(H, W, anchor, cfg):
            for win in pool.windows:
                assert win.contains(anchor)
                win.check_bounds(H, W)


def test_pool_draw_is_uniform():
    # on-grid interior anchors have 4-window pools; tally the chosen pool index
    r = raster(16, 16)
    cfg = MsarConfig(4, 4, (2,))
    rng = np.random.default_rng(5)
    counts = np.zeros(4)
    while counts.sum() < 3_000:
        smp = sample_msar(r, cfg, rng)
        (pool,) = smp.pools
        if len(pool.windows) == 4:
            counts[pool.windows.index(smp.tiles[1].window)] += 1
    n = counts.sum()
    sigma = np.sqrt(n * 0.25 * 0.75)
    assert np.all(np.abs(counts - n / 4) <= 3 * sigma)


def test_sample_stream_reproducible():
    r = raster(40, 40)
    cfg = MsarConfig(5, 5)
    a = sample_msar(r, cfg, np.random.default_rng(11))
    b = sample_msar(r, cfg, np.random.default_rng(11))
    for x, y in zip(a.tiles, b.tiles):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.labels.tobytes() == y.labels.tobytes()
