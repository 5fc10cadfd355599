import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stormcast.errors import ContractError, DimensionError
from stormcast.metrics import (
    ContingencyCounts,
    contingency,
    csi,
    degenerate,
    leadtime_report,
    masked_mae,
    write_report_csv,
)


def counts_by_loop(pred, truth):
    """Independent recount, one pixel at a time."""
    tp = fp = fn = tn = 0
    for p, t in zip(pred.ravel(), truth.ravel()):
        if p and t:
            tp += 1
        elif p and not t:
            fp += 1
        elif not p and t:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


class TestContingency:
    def test_hand_example(self):
        pred = np.array([[1, 1, 0], [0, 1, 0]])
        truth = np.array([[1, 0, 1], [0, 1, 1]])
        c = contingency(pred, truth)
        assert (c.tp, c.fp, c.fn, c.tn) == (2, 1, 2, 1)
        assert c.total == 6

    def test_identical_masks_have_no_misses(self):
        rng = np.random.default_rng(0)
        m = rng.integers(0, 2, (9, 9))
        c = contingency(m, m)
        assert c.fp == 0 and c.fn == 0
        assert c.tp == int(m.sum())

    def test_disjoint_masks_have_no_hits(self):
        pred = np.array([[1, 0], [0, 0]])
        truth = np.array([[0, 1], [0, 0]])
        c = contingency(pred, truth)
        assert c.tp == 0 and c.fp == 1 and c.fn == 1

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            contingency(np.zeros((3, 3)), np.zeros((3, 4)))

    def test_negative_counts_rejected(self):
        with pytest.raises(ContractError):
            ContingencyCounts(1, -1, 0, 0)

    def test_addition_pools_counts(self):
        a = ContingencyCounts(1, 2, 3, 4)
        b = ContingencyCounts(10, 20, 30, 40)
        s = a + b
        assert (s.tp, s.fp, s.fn, s.tn) == (11, 22, 33, 44)

    def test_matches_pixel_loop_on_random_masks(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            pred = rng.integers(0, 2, (8, 8))
            truth = rng.integers(0, 2, (8, 8))
            c = contingency(pred, truth)
            assert (c.tp, c.fp, c.fn, c.tn) == counts_by_loop(pred, truth)

    @given(st.integers(0, 2**31), st.integers(2, 12), st.integers(2, 12))
    @settings(max_examples=40, deadline=None)
    def test_counts_partition_the_grid(self, seed, h, w):
        rng = np.random.default_rng(seed)
        c = contingency(rng.integers(0, 2, (h, w)), rng.integers(0, 2, (h, w)))
        assert c.total == h * w
        assert 0.0 <= csi(c) <= 1.0


class TestCsi:
    def test_hand_value(self):
        assert csi(ContingencyCounts(tp=3, fp=1, fn=2, tn=9)) == pytest.approx(3 / 6)

    def test_perfect_forecast(self):
        assert csi(ContingencyCounts(tp=7, fp=0, fn=0, tn=2)) == 1.0

    def test_true_negatives_are_ignored(self):
        a = ContingencyCounts(3, 1, 2, 0)
        b = ContingencyCounts(3, 1, 2, 1000)
        assert csi(a) == csi(b)

    def test_degenerate_scores_one(self):
        c = ContingencyCounts(0, 0, 0, 64)
        assert degenerate(c)
        assert csi(c) == 1.0

    def test_nonempty_cases_are_not_degenerate(self):
        assert not degenerate(ContingencyCounts(0, 1, 0, 0))
        assert not degenerate(ContingencyCounts(0, 0, 1, 0))
        assert not degenerate(ContingencyCounts(1, 0, 0, 0))


class TestMaskedMae:
    def test_single_pixel_difference(self):
        pred = np.array([[205.0, 300.0], [300.0, 300.0]])
        truth = np.array([[200.0, 300.0], [300.0, 300.0]])
        ones = np.ones((2, 2), dtype=np.uint8)
        # only |205-200| survives; mean over all 4 pixels
        assert masked_mae(pred, truth, ones, ones) == pytest.approx(5.0 / 4.0)

    def test_both_masks_empty_scores_zero(self):
        rng = np.random.default_rng(1)
        zeros = np.zeros((5, 5), dtype=np.uint8)
        assert masked_mae(rng.normal(280, 30, (5, 5)), rng.normal(280, 30, (5, 5)), zeros, zeros) == 0.0

    def test_one_sided_mask_keeps_full_magnitude(self):
        pred = np.full((2, 2), 200.0)
        truth = np.full((2, 2), 200.0)
        pm = np.ones((2, 2), dtype=np.uint8)
        tm = np.zeros((2, 2), dtype=np.uint8)
        # truth is zeroed out, so each pixel contributes |200 - 0|
        assert masked_mae(pred, truth, pm, tm) == pytest.approx(200.0)

    def test_swap_symmetry(self):
        rng = np.random.default_rng(7)
        pred = rng.normal(260, 40, (6, 6))
        truth = rng.normal(260, 40, (6, 6))
        pm = rng.integers(0, 2, (6, 6))
        tm = rng.integers(0, 2, (6, 6))
        assert masked_mae(pred, truth, pm, tm) == masked_mae(truth, pred, tm, pm)

    def test_matches_pixel_loop(self):
        rng = np.random.default_rng(3)
        pred = rng.normal(250, 50, (8, 8))
        truth = rng.normal(250, 50, (8, 8))
        pm = rng.integers(0, 2, (8, 8))
        tm = rng.integers(0, 2, (8, 8))
        acc = 0.0
        for i in range(8):
            for j in range(8):
                acc += abs(pred[i, j] * pm[i, j] - truth[i, j] * tm[i, j])
        assert masked_mae(pred, truth, pm, tm) == pytest.approx(acc / 64, abs=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            masked_mae(np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((4, 3)))


def two_blob_pair(shift):
    """Truth has a cold square; prediction has the same square shifted right."""
    truth = np.full((16, 16), 280.0)
    truth[4:8, 4:8] = 200.0
    pred = np.full((16, 16), 280.0)
    pred[4:8, 4 + shift : 8 + shift] = 200.0
    return pred, truth


class TestLeadtimeReport:
    def test_pooled_counts_hand_check(self):
        # lead 0: perfect overlap; lead 1: half overlap (shift 2 of a 4-wide square)
        sample = (
            np.stack([two_blob_pair(0)[0], two_blob_pair(2)[0]]),
            np.stack([two_blob_pair(0)[1], two_blob_pair(2)[1]]),
        )
        rep = leadtime_report([sample, sample])
        assert rep.k == 2
        assert rep.csi[0] == pytest.approx(1.0)
        # per frame: tp=8, fp=8, fn=8 -> csi 8/24; pooling two identical samples keeps it
        assert rep.csi[1] == pytest.approx(8 / 24)
        assert rep.n_samples == [2, 2]
        assert rep.n_degenerate == [0, 0]
        # pooled across leads: tp 2*16 + 2*8, fp and fn 2*8 each -> 48/80
        assert rep.csi_all == pytest.approx(48 / 80)

    def test_mae_is_mean_over_samples(self):
        pred, truth = two_blob_pair(2)
        rep = leadtime_report([(pred[None], truth[None]), (truth[None], truth[None])])
        per_frame = masked_mae(pred, truth, pred < 210.0, truth < 210.0)
        assert rep.mae[0] == pytest.approx(per_frame / 2)

    def test_degenerate_frames_leave_the_pool(self):
        warm = np.full((1, 8, 8), 290.0)
        pred, truth = two_blob_pair(2)
        pred = pred[None]
        truth = truth[None]
        with_empty = leadtime_report([(pred, truth), (warm, warm)])
        without = leadtime_report([(pred, truth)])
        assert with_empty.csi[0] == pytest.approx(without.csi[0])
        assert with_empty.n_degenerate == [1]
        assert with_empty.n_samples == [2]

    def test_sample_order_invariance(self):
        rng = np.random.default_rng(11)
        pairs = []
        for _ in range(5):
            y = rng.uniform(190, 300, (3, 8, 8))
            y_hat = y + rng.normal(0, 8, (3, 8, 8))
            pairs.append((y_hat, y))
        a = leadtime_report(pairs)
        b = leadtime_report(pairs[::-1])
        assert a.csi == pytest.approx(b.csi)
        assert a.mae == pytest.approx(b.mae)
        assert a.csi_all == pytest.approx(b.csi_all)

    def test_truth_against_itself_is_perfect(self):
        rng = np.random.default_rng(5)
        y = rng.uniform(190, 300, (4, 8, 8))
        rep = leadtime_report([(y, y)])
        assert rep.csi == pytest.approx([1.0] * 4)
        assert rep.mae == pytest.approx([0.0] * 4)

    def test_lead_minutes_labeling(self):
        y = np.full((2, 8, 8), 200.0)
        rep = leadtime_report([(y, y)], interval_minutes=15)
        assert [rep.lead_minutes(s) for s in range(rep.k)] == [15, 30]

    def test_empty_input_rejected(self):
        with pytest.raises(ContractError):
            leadtime_report([])

    def test_ragged_forecast_lengths_rejected(self):
        y2 = np.full((2, 8, 8), 200.0)
        y3 = np.full((3, 8, 8), 200.0)
        with pytest.raises(ContractError):
            leadtime_report([(y2, y2), (y3, y3)])


class TestReportCsv:
    def test_layout_and_all_row(self, tmp_path):
        y = np.full((2, 8, 8), 200.0)
        pred = y.copy()
        pred[1, :, :4] = 290.0
        rep = leadtime_report([(pred, y)])
        path = tmp_path / "report.csv"
        write_report_csv(rep, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "lead_minutes,csi,mae,n_samples,n_degenerate"
        assert lines[1].startswith("15,1.000000,")
        assert lines[2].startswith("30,0.500000,")
        assert len(lines) == 4
        last = lines[3].split(",")
        assert last[0] == "ALL"
        assert last[3] == "2"
