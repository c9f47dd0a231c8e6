import numpy as np
import pytest

from hvlm import metrics as M
from hvlm.errors import DimensionError


# ---------------------------------------------------------------------------
# brute-force oracles, written against the definitions only

def counts_oracle(pred, gt):
    tp = fp = fn = 0
    for p, g in zip(pred.reshape(-1), gt.reshape(-1)):
        if p and g:
            tp += 1
        elif p and not g:
            fp += 1
        elif g and not p:
            fn += 1
    return tp, fp, fn


def surface_oracle(mask):
    out = np.zeros_like(mask, dtype=bool)
    D, H, W = mask.shape
    for d in range(D):
        for h in range(H):
            for w in range(W):
                if not mask[d, h, w]:
                    continue
                for dd, hh, ww in ((d - 1, h, w), (d + 1, h, w), (d, h - 1, w),
                                   (d, h + 1, w), (d, h, w - 1), (d, h, w + 1)):
                    if not (0 <= dd < D and 0 <= hh < H and 0 <= ww < W) or not mask[dd, hh, ww]:
                        out[d, h, w] = True
                        break
    return out


def hd95_oracle(pred, gt, spacing):
    ps = np.argwhere(surface_oracle(pred)).astype(float) * np.asarray(spacing)
    gs = np.argwhere(surface_oracle(gt)).astype(float) * np.asarray(spacing)
    d_pg = [min(np.sqrt(((p - g) ** 2).sum()) for g in gs) for p in ps]
    d_gp = [min(np.sqrt(((g - p) ** 2).sum()) for p in ps) for g in gs]
    return float(np.percentile(np.array(d_pg + d_gp), 95))


def random_mask(rng, shape, p=0.15):
    return rng.uniform(size=shape) < p


def test_dice_identical_and_disjoint():
    m = np.zeros((4, 4, 4), bool)
    m[1:3, 1:3, 1:3] = True
    assert M.dice(m, m) == 1.0
    other = np.zeros_like(m)
    other[0, 0, 0] = True
    assert M.dice(m, other) == 0.0


def test_dice_half_overlap_hand_count():
    gt = np.zeros((4, 4, 4), bool)
    gt[0, 0, :4] = True
    gt[0, 1, :4] = True  # 8 voxels
    pred = np.zeros_like(gt)
    pred[0, 0, :4] = True  # 4 of them
    assert M.dice(pred, gt) == pytest.approx(2 / 3)


def test_empty_mask_conventions():
    e = np.zeros((3, 3, 3), bool)
    m = np.zeros((3, 3, 3), bool)
    m[1, 1, 1] = True
    assert M.dice(e, e) == 1.0 and M.iou(e, e) == 1.0
    assert M.precision(e, e) == 1.0 and M.sensitivity(e, e) == 1.0
    assert M.dice(e, m) == 0.0 and M.dice(m, e) == 0.0
    assert M.hd95(e, m) is None and M.hd95(m, e) is None


def test_set_metrics_match_brute_force_counts():
    rng = np.random.default_rng(0)
    for _ in range(30):
        shape = tuple(rng.integers(3, 9, size=3))
        pred = random_mask(rng, shape)
        gt = random_mask(rng, shape)
        tp, fp, fn = counts_oracle(pred, gt)
        if 2 * tp + fp + fn:
            assert M.dice(pred, gt) == 2 * tp / (2 * tp + fp + fn)
            assert M.iou(pred, gt) == tp / (tp + fp + fn)


def test_dice_iou_identity():
    rng = np.random.default_rng(1)
    for _ in range(50):
        pred = random_mask(rng, (6, 6, 6))
        gt = random_mask(rng, (6, 6, 6))
        d, i = M.dice(pred, gt), M.iou(pred, gt)
        assert i <= d <= 1.0
        assert abs(d - 2 * i / (1 + i)) <= 1e-12


def test_hd95_identical_masks_zero():
    rng = np.random.default_rng(2)
    m = random_mask(rng, (6, 6, 6), 0.3)
    m[2, 2, 2] = True
    assert M.hd95(m, m) == 0.0


def test_hd95_two_voxels_three_apart():
    a = np.zeros((8, 4, 4), bool)
    b = np.zeros((8, 4, 4), bool)
    a[1, 1, 1] = True
    b[4, 1, 1] = True
    assert M.hd95(a, b, (1, 1, 1)) == pytest.approx(3.0)


def test_hd95_matches_all_pairs_oracle():
    rng = np.random.default_rng(3)
    for trial in range(15):
        shape = tuple(rng.integers(4, 9, size=3))
        spacing = tuple(rng.uniform(0.5, 2.0, size=3))
        pred = random_mask(rng, shape, 0.2)
        gt = random_mask(rng, shape, 0.2)
        if not pred.any() or not gt.any():
            continue
        got = M.hd95(pred, gt, spacing)
        want = hd95_oracle(pred, gt, spacing)
        assert abs(got - want) <= 1e-9, trial


def test_surface_matches_oracle():
    rng = np.random.default_rng(4)
    for _ in range(10):
        m = random_mask(rng, (6, 7, 5), 0.35)
        assert np.array_equal(M.surface_voxels(m), surface_oracle(m))


def test_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        M.dice(np.zeros((2, 2, 2), bool), np.zeros((3, 3, 3), bool))


def test_cls_metrics_basic():
    y_true = [0, 0, 1, 1, 2, 2]
    y_pred = [0, 1, 1, 1, 2, 0]
    m = M.cls_metrics(y_true, y_pred)
    assert m.acc == pytest.approx(4 / 6)
    # per-class precision: c0 1/2, c1 2/3, c2 1/1 -> macro 13/18
    assert m.precision == pytest.approx((0.5 + 2 / 3 + 1.0) / 3)
    assert m.recall == pytest.approx((0.5 + 1.0 + 0.5) / 3)
    assert abs(m.f1 - 2 * m.precision * m.recall / (m.precision + m.recall)) <= 1e-9


def test_seg_csv_roundtrip(tmp_path):
    rows = [
        ("vol_0", M.SegMetrics(0.9, 0.8, 0.95, 0.85, 1.5)),
        ("vol_1", M.SegMetrics(1.0, 1.0, 1.0, 1.0, None)),
    ]
    path = str(tmp_path / "m.csv")
    M.write_seg_metrics_csv(path, rows)
    schema, parsed = M.read_metrics_csv(path)
    assert schema == M.SEG_CSV_SCHEMA
    assert parsed[0]["volume"] == "vol_0"
    assert float(parsed[0]["dice"]) == pytest.approx(0.9)
    assert parsed[1]["hd95_mm"] == ""
    assert parsed[-1]["volume"] == "mean"
    assert float(parsed[-1]["dice"]) == pytest.approx(0.95)
    # hd95 mean skips the undefined entry
    assert float(parsed[-1]["hd95_mm"]) == pytest.approx(1.5)
