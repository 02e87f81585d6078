import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from PIL import Image
from skimage.metrics import structural_similarity

from d3sr.dataio import DataError
from d3sr.metrics import (
    MetricReport, baseline, evaluate_dataset, gaussian_window, load_eval_pairs, psnr_y, rgb_to_y, ssim_y,
)
from d3sr.perceptual import FeatureExtractor


def _rand(seed, shape=(3, 32, 32)):
    return torch.from_numpy(np.random.default_rng(seed).random(shape))


def test_psnr_identical_is_inf():
    x = _rand(0)
    assert psnr_y(x, x) == math.inf


def test_psnr_uniform_offset():
    x = _rand(1) * (254 / 255)
    y = x + 1 / 255
    assert psnr_y(x, y) == pytest.approx(20 * math.log10(255), abs=1e-3)
    assert psnr_y(x, y) == pytest.approx(48.1308, abs=1e-3)


def test_psnr_gray_matches_single_channel():
    g = _rand(2, (1, 24, 24))
    h = _rand(3, (1, 24, 24))
    single = 10 * math.log10(1 / float(((g - h) ** 2).mean()))
    assert psnr_y(g.expand(3, -1, -1), h.expand(3, -1, -1)) == pytest.approx(single, abs=1e-9)
    assert torch.allclose(rgb_to_y(g.expand(3, -1, -1)), g[0], atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), a=st.floats(0.001, 0.2), b=st.floats(0.001, 0.2))
def test_psnr_decreases_with_error(seed, a, b):
    x = _rand(seed) * 0.5 + 0.25
    n = _rand(seed + 1) - 0.5
    lo, hi = sorted((a, b))
    if hi - lo < 1e-6:
        return
    assert psnr_y(x, x + lo * n) > psnr_y(x, x + hi * n)
    assert psnr_y(x, x + lo * n) == pytest.approx(psnr_y(x + lo * n, x), abs=1e-12)


def test_ssim_self_and_symmetry():
    x, y = _rand(4), _rand(5)
    assert ssim_y(x, x) == pytest.approx(1.0, abs=1e-9)
    assert ssim_y(x, y) == pytest.approx(ssim_y(y, x), abs=1e-9)
    assert -1 <= ssim_y(x, y) <= 1


def test_ssim_constants_closed_form():
    x = torch.full((3, 16, 16), 0.2, dtype=torch.float64)
    y = torch.full((3, 16, 16), 0.7, dtype=torch.float64)
    c1 = 0.01 ** 2
    expected = (2 * 0.2 * 0.7 + c1) / (0.2 ** 2 + 0.7 ** 2 + c1)
    assert ssim_y(x, y) == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_skimage(seed):
    x, y = _rand(seed, (3, 40, 36)), _rand(seed + 10, (3, 40, 36))
    y = 0.6 * x + 0.4 * y
    ref = structural_similarity(rgb_to_y(x).numpy(), rgb_to_y(y).numpy(), data_range=1.0,
                                gaussian_weights=True, sigma=1.5, use_sample_covariance=False)
    assert ssim_y(x, y) == pytest.approx(ref, abs=1e-6)


def test_window_and_errors():
    w = gaussian_window()
    assert w.shape == (11, 11) and float(w.sum()) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        ssim_y(torch.rand(3, 8, 8), torch.rand(3, 8, 8))
    with pytest.raises(ValueError):
        psnr_y(torch.rand(3, 8, 8), torch.rand(3, 8, 9))
    with pytest.raises(ValueError):
        rgb_to_y(torch.rand(4, 8, 8))


# ----------------------------------------------------------------------------- dataset evaluation


@pytest.fixture
def eval_root(tmp_path, toy_root):
    (tmp_path / "hr").mkdir()
    (tmp_path / "lr").mkdir()
    for p in sorted((toy_root / "val").iterdir())[:4]:
        im = Image.open(p).convert("RGB")
        im.save(tmp_path / "hr" / p.name)
        im.resize((im.width // 4, im.height // 4), Image.BICUBIC).save(tmp_path / "lr" / p.name)
    return tmp_path


def test_oracle_stub(eval_root):
    pairs, _ = load_eval_pairs(eval_root)
    rep = evaluate_dataset("oracle", pairs, FeatureExtractor())
    assert len(rep.rows) == 4
    for r in rep.rows:
        assert r["psnr_y"] == math.inf
        assert r["ssim_y"] == pytest.approx(1.0, abs=1e-9)
        assert r["dists"] == pytest.approx(0.0, abs=1e-6)


def test_bicubic_beats_nearest(eval_root):
    pairs, _ = load_eval_pairs(eval_root)
    ex = FeatureExtractor()
    bic = evaluate_dataset(baseline("bicubic"), pairs, ex).means()
    near = evaluate_dataset(baseline("nearest"), pairs, ex).means()
    assert all(math.isfinite(v) for v in bic.values())
    assert bic["psnr_y"] > near["psnr_y"]


def test_report_means_and_files(eval_root, tmp_path):
    pairs, _ = load_eval_pairs(eval_root)
    rep = evaluate_dataset(baseline("bicubic"), pairs, FeatureExtractor(), dataset="toy", checkpoint="none")
    m = rep.means()
    for c in MetricReport.COLUMNS:
        assert m[c] == pytest.approx(sum(r[c] for r in rep.rows) / len(rep.rows), abs=1e-9)
    out = tmp_path / "out" / "report.csv"
    rep.write(out)
    back = MetricReport.read_csv(out)
    assert [r["image"] for r in back.rows] == [r["image"] for r in rep.rows]
    for a, b in zip(back.rows, rep.rows):
        assert all(a[c] == b[c] for c in MetricReport.COLUMNS)
    summary = out.with_suffix(".summary.txt").read_text()
    assert "dataset = toy" in summary and "images = 4" in summary


def test_missing_ground_truth(eval_root):
    (eval_root / "hr" / sorted((eval_root / "hr").iterdir())[0].name).unlink()
    with pytest.raises(DataError, match="ground truth"):
        load_eval_pairs(eval_root)


def test_missing_folders(tmp_path):
    with pytest.raises(DataError):
        load_eval_pairs(tmp_path)


def test_resolution_mismatch(eval_root):
    pairs, _ = load_eval_pairs(eval_root)
    with pytest.raises(ValueError, match="does not match"):
        evaluate_dataset(lambda x: x, pairs, FeatureExtractor())


def test_unknown_baseline():
    with pytest.raises(ValueError):
        baseline("lanczos")
