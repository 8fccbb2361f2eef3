import numpy as np
import pytest

from bnnlab.calibration import (
    CalibrationBins,
    PredictionLog,
    bin_predictions,
    bins_csv_text,
    calibration_report,
    ece,
    mce,
    reliability_diagram,
)
from bnnlab.rng import RandomStream


def log_from(confs, hits):
    confs = np.asarray(confs, dtype=np.float64)
    hits = np.asarray(hits)
    pred = np.zeros(len(confs), dtype=np.int64)
    actual = np.where(hits, 0, 1).astype(np.int64)
    return PredictionLog(confs, pred, actual)


def random_log(seed, n=200, classes=4):
    s = RandomStream(seed)
    probs = s.uniform((n, classes), 0.01, 1.0)
    probs = probs / probs.sum(axis=1, keepdims=True)
    actual = (s.uniform((n,)) * classes).astype(np.int64)
    return PredictionLog.from_probs(probs, actual)


# ---------------------------------------------------------------------------
# log and binning mechanics


def test_log_validation():
    with pytest.raises(ValueError):
        PredictionLog(np.array([0.5, 0.6]), np.array([0]), np.array([0, 1]))
    with pytest.raises(ValueError):
        PredictionLog(np.array([0.0]), np.array([0]), np.array([0]))  # conf 0 excluded
    with pytest.raises(ValueError):
        PredictionLog(np.array([1.1]), np.array([0]), np.array([0]))
    PredictionLog(np.array([1.0]), np.array([0]), np.array([0]))  # top edge included


def test_from_probs_records_argmax():
    probs = np.array([[0.2, 0.5, 0.3], [0.7, 0.1, 0.2]])
    log = PredictionLog.from_probs(probs, [1, 2])
    assert list(log.predicted) == [1, 0]
    assert np.allclose(log.confidence, [0.5, 0.7])
    assert list(log.actual) == [1, 2]


def test_bin_rule_055_goes_to_bin_6():
    log = log_from([0.55], [True])
    bins = bin_predictions(log, 10)
    assert bins.counts[5] == 1  # bin 6, 1-based
    assert bins.counts.sum() == 1


def test_bin_rule_top_and_edges():
    # 1.0 -> bin 10; interior edge 0.5 -> lower bin (bin 5)
    bins = bin_predictions(log_from([1.0, 0.5], [True, True]), 10)
    assert bins.counts[9] == 1 and bins.counts[4] == 1


def test_all_confidence_one_lands_in_top_bin():
    bins = bin_predictions(log_from([1.0] * 7, [True] * 7), 10)
    assert bins.counts[9] == 7 and bins.counts.sum() == 7


def test_counts_partition_random_logs():
    for seed in range(5):
        log = random_log(seed)
        bins = bin_predictions(log, 10)
        assert bins.counts.sum() == len(log)


def test_binning_rejects_empty_log_and_bad_n_bins():
    with pytest.raises(ValueError):
        bin_predictions(log_from([], []), 10)
    with pytest.raises(ValueError):
        bin_predictions(log_from([0.5], [True]), 0)


# ---------------------------------------------------------------------------
# ece / mce values


def two_bin_case():
    # 50 examples at conf 0.9 with acc 0.8; 50 at conf 0.6 with acc 0.6
    confs = [0.9] * 50 + [0.6] * 50
    hits = [True] * 40 + [False] * 10 + [True] * 30 + [False] * 20
    return bin_predictions(log_from(confs, hits), 10)


def test_two_bin_hand_case_exact():
    bins = two_bin_case()
    assert abs(ece(bins) - 0.05) < 1e-12
    assert abs(mce(bins) - 0.10) < 1e-12


def test_perfect_calibration_gives_zero():
    # conf 0.75 with exactly 3 of 4 correct, conf 0.5 with 1 of 2
    confs = [0.75] * 4 + [0.5] * 2
    hits = [True, True, True, False, True, False]
    bins = bin_predictions(log_from(confs, hits), 4)
    assert abs(ece(bins)) < 1e-12 and abs(mce(bins)) < 1e-12


def test_single_bin_extreme_miscalibration():
    bins = bin_predictions(log_from([1.0] * 5, [False] * 5), 1)
    assert abs(ece(bins) - 1.0) < 1e-12
    assert abs(mce(bins) - 1.0) < 1e-12


def test_mce_dominates_ece_on_random_logs():
    for seed in range(20):
        bins = bin_predictions(random_log(seed), 10)
        assert mce(bins) >= ece(bins) - 1e-15


def test_nbins_one_equals_global_gap_exactly():
    for seed in range(5):
        log = random_log(seed)
        bins = bin_predictions(log, 1)
        want = abs(
            float((log.predicted == log.actual).mean()) - float(log.confidence.mean())
        )
        assert abs(ece(bins) - want) < 1e-12
        assert abs(mce(bins) - want) < 1e-12


def test_permutation_invariance():
    log = random_log(3)
    perm = RandomStream(1).permutation(len(log))
    shuffled = PredictionLog(log.confidence[perm], log.predicted[perm], log.actual[perm])
    a, b = bin_predictions(log, 10), bin_predictions(shuffled, 10)
    assert ece(a) == ece(b)
    assert mce(a) == mce(b)


def test_all_empty_bins_rejected():
    empty = CalibrationBins(4, np.zeros(4, dtype=np.int64), np.zeros(4), np.zeros(4))
    with pytest.raises(ValueError):
        ece(empty)
    with pytest.raises(ValueError):
        mce(empty)


def test_report_bundles_consistent_values():
    log = random_log(11)
    rep = calibration_report(log, 10)
    bins = bin_predictions(log, 10)
    assert rep.ece == ece(bins) and rep.mce == mce(bins)
    assert 0.0 <= rep.ece <= rep.mce <= 1.0


# ---------------------------------------------------------------------------
# reliability diagram artifacts


def test_diagram_csv_rows_match_nonempty_bins(tmp_path):
    bins = two_bin_case()
    csv_path, svg_path = reliability_diagram(bins, tmp_path / "cal.csv")
    lines = csv_path.read_text().strip().split("\n")
    assert lines[0] == "bin_lo,bin_hi,count,accuracy,confidence"
    assert len(lines) - 1 == int((bins.counts > 0).sum()) == 2
    assert svg_path.exists() and svg_path.suffix == ".svg"
    assert "<svg" in svg_path.read_text()


def test_diagram_perfect_log_acc_equals_conf(tmp_path):
    confs = [0.75] * 4 + [0.5] * 2
    hits = [True, True, True, False, True, False]
    bins = bin_predictions(log_from(confs, hits), 4)
    csv_path, _ = reliability_diagram(bins, tmp_path / "perfect.csv")
    for row in csv_path.read_text().strip().split("\n")[1:]:
        _, _, _, acc, conf = row.split(",")
        assert abs(float(acc) - float(conf)) < 1e-12


def test_diagram_regeneration_is_byte_identical(tmp_path):
    bins = bin_predictions(random_log(5), 10)
    a_csv, a_svg = reliability_diagram(bins, tmp_path / "a.csv")
    b_csv, b_svg = reliability_diagram(bins, tmp_path / "b.csv")
    assert a_csv.read_bytes() == b_csv.read_bytes()
    assert a_svg.read_bytes() == b_svg.read_bytes()


def test_diagram_unwritable_path_raises(tmp_path):
    bins = two_bin_case()
    with pytest.raises(OSError):
        reliability_diagram(bins, tmp_path / "no" / "such" / "dir" / "x.csv")


def test_csv_recomputation_matches_report():
    bins = two_bin_case()
    text = bins_csv_text(bins)
    rows = [r.split(",") for r in text.strip().split("\n")[1:]]
    n = sum(int(r[2]) for r in rows)
    recomputed_ece = sum(int(r[2]) / n * abs(float(r[3]) - float(r[4])) for r in rows)
    recomputed_mce = max(abs(float(r[3]) - float(r[4])) for r in rows)
    assert abs(recomputed_ece - ece(bins)) < 1e-12
    assert abs(recomputed_mce - mce(bins)) < 1e-12
