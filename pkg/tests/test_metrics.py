import math

import numpy as np
import pytest

from core.exceptions import DimensionError, MetricError
from tools.metrics import PSNR_CAP, EvalReport, EvalRow, psnr_from_rmse, rmse_psnr


def _image(value=100.0, shape=(8, 8)):
    return np.full(shape + (3,), value)


def test_identical_images():
    mask = np.ones((8, 8), dtype=bool)
    assert rmse_psnr(_image(), _image(), mask) == (0.0, PSNR_CAP)


def test_uniform_offset():
    mask = np.zeros((8, 8), dtype=bool)
    mask[2:5, 3:7] = True
    rmse, psnr = rmse_psnr(_image(110.0), _image(100.0), mask)
    assert rmse == pytest.approx(10.0)
    assert psnr == pytest.approx(28.1308, abs=1e-4)


def test_pixels_outside_mask_are_ignored():
    rendered = _image()
    rendered[0, 0] = 0.0
    mask = np.ones((8, 8), dtype=bool)
    mask[0, 0] = False
    assert rmse_psnr(rendered, _image(), mask)[0] == 0.0


def test_empty_mask():
    with pytest.raises(MetricError):
        rmse_psnr(_image(), _image(), np.zeros((8, 8), dtype=bool))


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        rmse_psnr(_image(shape=(8, 8)), _image(shape=(8, 9)), np.ones((8, 8), dtype=bool))
    with pytest.raises(DimensionError):
        rmse_psnr(_image(), _image(), np.ones((4, 4), dtype=bool))


def test_psnr_cap():
    assert psnr_from_rmse(0.0) == PSNR_CAP
    assert psnr_from_rmse(1e-9) == PSNR_CAP
    assert psnr_from_rmse(255.0) == pytest.approx(0.0)


def _report():
    report = EvalReport()
    for frame, errors in enumerate([(12.0, 9.0, 7.0), (10.0, 8.0, 6.0)]):
        for method, rmse in zip(("pca_only", "ours_no_specular", "ours_specular"), errors):
            report.add(EvalRow(seed=1, frame=frame, method=method, rmse=rmse, psnr=psnr_from_rmse(rmse),
                               pixels=100 * (frame + 1)))
    return report


def test_report_is_consistent():
    report = _report().with_aggregates()
    assert report.consistent()
    report.rows[0].psnr += 1.0
    assert not report.consistent()


def test_aggregate_pools_pixels():
    agg = {r.method: r for r in _report().with_aggregates().rows if r.frame == -1}
    assert agg["pca_only"].pixels == 300
    assert agg["pca_only"].rmse == pytest.approx(math.sqrt((144.0 * 100 + 100.0 * 200) / 300))


def test_aggregate_of_failed_method():
    report = _report()
    report.add(EvalRow(seed=2, frame=0, method="pca_only", status="failed: SolverError"))
    failed = [r for r in report.with_aggregates().rows if r.seed == 2 and r.frame == -1]
    assert failed[0].status.startswith("failed")
    assert math.isnan(failed[0].rmse)


def test_ordering():
    report = _report().with_aggregates()
    assert report.ordering_holds()
    assert report.ordering_holds(seed=1)
    assert not report.ordering_holds(seed=7)
    swapped = _report()
    for row in swapped.rows:
        if row.method == "ours_specular":
            row.rmse = 50.0
    assert not swapped.with_aggregates().ordering_holds()


def test_csv_reads_back(tmp_path):
    report = _report().with_aggregates()
    report.add(EvalRow(seed=2, frame=0, method="ours_specular", status="failed: SolverError"))
    report.write_csv(tmp_path / "report.csv")
    back = EvalReport.read_csv(tmp_path / "report.csv")
    assert len(back.rows) == len(report.rows)
    before, after = report.to_frame(), back.to_frame()
    assert list(after["method"]) == list(before["method"])
    assert list(after["status"]) == list(before["status"])
    np.testing.assert_allclose(after["rmse"], before["rmse"], rtol=1e-12)


def test_rows_are_ordered_by_method():
    df = _report().to_frame()
    assert list(df["method"][:3]) == ["pca_only", "ours_no_specular", "ours_specular"]


def test_chart(tmp_path):
    _report().with_aggregates().write_chart(tmp_path / "report.html")
    html = (tmp_path / "report.html").read_text()
    assert "ours_specular" in html
