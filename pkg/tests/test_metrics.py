import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fetomosaic.errors import MissingGroundTruth, NoOverlap
from fetomosaic.geometry import IDENTITY, Affine2D, compose
from fetomosaic.metrics import (EvalConfig, MetricReport, MetricRow, SsimConfig, eval_all, eval_s,
                                gaussian_kernel, gaussian_smooth, gt_corner_error, read_metrics_csv, ssim,
                                ssim_map, trace_from_transforms, write_aggregates_json, write_metrics_csv,
                                write_quantiles_csv)
from fetomosaic.mosaic import warp_image
from fetomosaic.registration import PairResult, RegistrationTrace, TraceEntry


def direct_filter(img, size, sigma):
    """Per-pixel weighted sum over an explicitly padded neighbourhood."""
    x = np.arange(size) - size // 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    w2 = np.outer(g, g) / np.outer(g, g).sum()
    r = size // 2
    pad = np.pad(img, r, mode="symmetric")
    out = np.zeros_like(img)
    for i in range(img.shape[0]):
        for j in range(img.shape[1]):
            out[i, j] = (pad[i:i + size, j:j + size] * w2).sum()
    return out


def brute_ssim_map(a, b, size=11, sigma=1.5, c1=1e-4, c2=9e-4):
    x = np.arange(size) - size // 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    w2 = np.outer(g, g) / np.outer(g, g).sum()
    r = size // 2
    pa, pb = np.pad(a, r, mode="symmetric"), np.pad(b, r, mode="symmetric")
    out = np.zeros_like(a)
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            wa, wb = pa[i:i + size, j:j + size], pb[i:i + size, j:j + size]
            mx, my = (w2 * wa).sum(), (w2 * wb).sum()
            vx = (w2 * (wa - mx) ** 2).sum()
            vy = (w2 * (wb - my) ** 2).sum()
            cxy = (w2 * (wa - mx) * (wb - my)).sum()
            out[i, j] = (2 * mx * my + c1) * (2 * cxy + c2) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    return out


def test_kernel_normalised():
    k = gaussian_kernel(9, 1.5)
    assert k.sum() == pytest.approx(1.0, abs=1e-15) and np.allclose(k, k[::-1])
    with pytest.raises(ValueError):
        gaussian_kernel(8, 1.5)


def test_smooth_constant():
    np.testing.assert_allclose(gaussian_smooth(np.full((20, 30), 0.37)), 0.37, atol=1e-9)


def test_smooth_impulse_gives_kernel():
    img = np.zeros((21, 21))
    img[10, 10] = 1.0
    k = gaussian_kernel(9, 1.5)
    out = gaussian_smooth(img)
    np.testing.assert_allclose(out[6:15, 6:15], np.outer(k, k), atol=1e-15)
    assert out.sum() == pytest.approx(1.0)


def test_smooth_matches_direct_summation(rng):
    img = rng.random((23, 17))
    out = gaussian_smooth(img)
    np.testing.assert_allclose(out, direct_filter(img, 9, 1.5), atol=1e-12)
    assert abs(out.mean() - img.mean()) < 1e-6


def test_ssim_identical(rng):
    a = rng.random((40, 40))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_constants_closed_form():
    want = (2 * 0.21 + 1e-4) / (0.09 + 0.49 + 1e-4)
    assert want == pytest.approx(0.7242, abs=1e-4)
    got = ssim(np.full((30, 30), 0.3), np.full((30, 30), 0.7))
    assert got == pytest.approx(want, abs=1e-6)
    assert ssim(np.full((30, 30), 0.3), np.full((30, 30), 0.7), cfg=SsimConfig(mode="global")) == \
        pytest.approx(want, abs=1e-12)


def test_ssim_anticorrelated():
    yy, xx = np.mgrid[0:48, 0:48]
    a = 0.5 + 0.4 * np.sign(np.sin(xx / 2.0) * np.sin(yy / 2.0))
    assert ssim(a, 1.0 - a) < 0
    assert ssim(a, 1.0 - a, cfg=SsimConfig(mode="global")) < 0


def test_ssim_matches_brute_force(rng):
    for _ in range(3):
        a = rng.random((26, 22))
        b = np.clip(a + rng.normal(0, 0.2, a.shape), 0, 1)
        fast = ssim_map(a, b)
        np.testing.assert_allclose(fast, brute_ssim_map(a, b), atol=1e-10)
        valid = np.ones(a.shape, bool)
        inner = brute_ssim_map(a, b)[5:-5, 5:-5].mean()
        assert ssim(a, b, valid) == pytest.approx(inner, abs=1e-10)


def test_ssim_global_mode(rng):
    a, b = rng.random((30, 30)), rng.random((30, 30))
    valid = np.zeros((30, 30), bool)
    valid[5:25, 3:20] = True
    x, y = a[valid], b[valid]
    cov = ((x - x.mean()) * (y - y.mean())).mean()
    want = ((2 * x.mean() * y.mean() + 1e-4) * (2 * cov + 9e-4)) / \
        ((x.mean() ** 2 + y.mean() ** 2 + 1e-4) * (x.var() + y.var() + 9e-4))
    assert ssim(a, b, valid, SsimConfig(mode="global")) == pytest.approx(want, abs=1e-12)


def test_ssim_no_overlap(rng):
    a = rng.random((30, 30))
    valid = np.zeros((30, 30), bool)
    valid[:5, :5] = True
    with pytest.raises(NoOverlap):
        ssim(a, a, valid)
    with pytest.raises(NoOverlap):
        ssim(a, a, np.zeros((30, 30), bool), SsimConfig(mode="global"))
    with pytest.raises(ValueError):
        ssim(a, a[:, :5])


def test_ssim_window_support_excludes_invalid(rng):
    a = rng.random((40, 40))
    b = a.copy()
    b[:, 30:] = rng.random((40, 10))
    valid = np.zeros((40, 40), bool)
    valid[:, :30] = True
    # windows must lie wholly inside the valid region, so the corrupted strip never enters
    assert ssim(a, b, valid) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from(["windowed", "global"]))
def test_ssim_symmetric_and_bounded(seed, mode):
    r = np.random.default_rng(seed)
    a = r.random((24, 24))
    b = np.clip(a * r.uniform(-1, 1) + r.random((24, 24)) * r.uniform(0, 1), 0, 1)
    cfg = SsimConfig(mode=mode)
    s1, s2 = ssim(a, b, cfg=cfg), ssim(b, a, cfg=cfg)
    assert abs(s1 - s2) < 1e-9 and -1 <= s1 <= 1


def test_ssim_channel_relabeling(rng):
    a, b = rng.random((24, 24, 3)), rng.random((24, 24, 3))
    perm = [2, 0, 1]
    assert ssim(a, b) == pytest.approx(ssim(a[..., perm], b[..., perm]), abs=1e-12)


def test_eval_static_sequence(rng):
    f = gaussian_smooth(rng.random((64, 64)), 9, 3.0)
    frames = [f] * 8
    trace = trace_from_transforms([IDENTITY] * 7)
    rep = eval_all(frames, trace)
    assert all(r.s == pytest.approx(1.0, abs=1e-12) for r in rep.per_frame)
    assert [len(rep.rows(n)) for n in range(1, 6)] == [7, 6, 5, 4, 3]


def test_eval_gt_transforms(short_seq):
    trace = trace_from_transforms(short_seq.gt_pairwise)
    rep = eval_s(short_seq.frames, trace, 5, fov=short_seq.fov_mask)
    assert len(rep.rows(5)) == 7 and not any(r.flagged for r in rep.per_frame)
    assert rep.mean(5) >= 0.98


def test_eval_compositional_consistency(short_seq):
    frames = short_seq.frames
    fov = short_seq.fov_mask
    steps = short_seq.gt_pairwise
    trace = trace_from_transforms(steps)
    cfg = EvalConfig()
    rep = eval_s(frames, trace, 3, cfg, fov)
    from scipy import ndimage
    region = ndimage.binary_erosion(fov, iterations=4)
    for row in rep.rows(3)[:3]:
        i = row.frame_index
        h = compose(steps[i + 2], compose(steps[i + 1], steps[i]))
        src = gaussian_smooth(frames[i])
        dst = gaussian_smooth(frames[i + 3])
        warped, valid = warp_image(src, h, dst.shape, region)
        valid &= region
        assert row.s == pytest.approx(ssim(warped, dst, valid), abs=1e-12)
        assert row.overlap_fraction == pytest.approx(valid.sum() / fov.sum(), abs=1e-12)


def test_eval_flags_small_overlap(short_seq):
    frames = short_seq.frames[:3]
    trace = trace_from_transforms([Affine2D.translation(400, 0), IDENTITY])
    rep = eval_s(frames, trace, 1, fov=short_seq.fov_mask)
    assert rep.rows(1)[0].flagged and not rep.rows(1)[1].flagged
    assert rep.aggregates[1].count == 1


def test_eval_identity_substitution(short_seq):
    frames = short_seq.frames[:4]
    gt = short_seq.gt_pairwise
    trace = RegistrationTrace(4, [TraceEntry(0, 1, PairResult("accepted", gt[0])),
                                  TraceEntry(1, 2, PairResult("rejected:scale")),
                                  TraceEntry(1, 3, PairResult("accepted", compose(gt[2], gt[1])))])
    sub = eval_s(frames, trace, 1, EvalConfig(identity_substitution=True), short_seq.fov_mask)
    assert [r.frame_index for r in sub.rows(1)] == [0, 1, 2]
    plain = eval_s(frames, trace, 1, EvalConfig(identity_substitution=False), short_seq.fov_mask)
    assert [r.frame_index for r in plain.rows(1)] == [0]
    with pytest.raises(ValueError):
        eval_s(frames, trace, 6)
    with pytest.raises(ValueError):
        eval_s(frames[:3], trace, 1)


def test_eval_workers_invariant(short_seq):
    trace = trace_from_transforms(short_seq.gt_pairwise[:5])
    a = eval_all(short_seq.frames[:6], trace, fov=short_seq.fov_mask, workers=1)
    b = eval_all(short_seq.frames[:6], trace, fov=short_seq.fov_mask, workers=3)
    assert a.per_frame == b.per_frame


def test_reports_round_trip(tmp_path, rng):
    rows = [MetricRow(i, n, float(rng.random()), float(rng.random()), bool(rng.random() < 0.2))
            for n in (1, 2) for i in range(30)]
    rep = MetricReport(rows)
    write_metrics_csv(tmp_path / "m.csv", rep)
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "frame_index,n,s,overlap_fraction,flagged"
    back = read_metrics_csv(tmp_path / "m.csv")
    assert back.per_frame == rep.per_frame
    write_aggregates_json(tmp_path / "a.json", rep)
    write_quantiles_csv(tmp_path / "q.csv", rep)
    import json
    doc = json.loads((tmp_path / "a.json").read_text())
    for agg in doc:
        vals = np.array([r.s for r in rows if r.n == agg["n"] and not r.flagged])
        assert set(agg) == {"n", "mean", "std", "count"}
        assert abs(agg["mean"] - vals.mean()) <= 1e-12 and abs(agg["std"] - vals.std()) <= 1e-12
        assert agg["count"] == len(vals)
    q = (tmp_path / "q.csv").read_text().splitlines()
    assert q[0] == "n,min,q1,median,q3,max" and len(q) == 3


def test_corner_error_examples(rng):
    steps = [Affine2D(1.01, 0.01, -0.01, 0.99, *rng.uniform(-4, 4, 2)) for _ in range(6)]
    trace = trace_from_transforms(steps)
    np.testing.assert_allclose(gt_corner_error(trace, steps, (100, 80)), 0.0, atol=1e-9)
    off = list(steps)
    # estimated frame-1 position shifted by one pixel in anchor coordinates
    off[0] = compose(steps[0], Affine2D.translation(-1, 0))
    err = gt_corner_error(trace_from_transforms(off), steps, (100, 80))
    assert err[0] == 0.0 and err[1] == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(MissingGroundTruth):
        gt_corner_error(trace, None, (100, 80))
    with pytest.raises(MissingGroundTruth):
        gt_corner_error(trace, steps[:3], (100, 80))


def test_corner_error_brute_force(short_seq):
    from fetomosaic.registration import CornerDetector, register_sequence
    frames = short_seq.frames[:7]
    trace = register_sequence(frames, None, CornerDetector(fov=short_seq.fov_mask))
    err = gt_corner_error(trace, short_seq.gt_pairwise[:6], (448, 448))
    corners = np.array([[0, 0, 1], [447, 0, 1], [0, 447, 1], [447, 447, 1.0]]).T
    est, true = np.eye(3), np.eye(3)
    for k in range(7):
        if k:
            est = trace.entries[k - 1].result.transform.matrix @ est
            true = short_seq.gt_pairwise[k - 1].matrix @ true
        pe = np.linalg.inv(est) @ corners
        pt = np.linalg.inv(true) @ corners
        want = np.mean([math.hypot(*(pe[:2, c] - pt[:2, c])) for c in range(4)])
        assert err[k] == pytest.approx(want, abs=1e-9)
    assert err[-1] < 1.0
