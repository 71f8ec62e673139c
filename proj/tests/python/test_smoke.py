import json
import math

import numpy as np
import pytest

import hallucheck as hc


def textured(h, w, seed):
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:h, 0:w].astype(np.float32)
    base = 0.5 + 0.3 * np.sin(x / 3.0)[..., None] * np.cos(y / 5.0)[..., None]
    img = base + 0.1 * rng.standard_normal((h, w, 3)).astype(np.float32)
    return np.clip(img, 0, 1).astype(np.float32)


def test_identities():
    a = textured(40, 48, 1)
    assert hc.mse(a, a) == 0.0
    assert hc.ssim(a, a) == 1.0
    assert hc.sharpness(np.full((20, 20, 3), 0.3, np.float32)) == 0.0
    assert math.isinf(hc.psnr(a, a))


def test_mse_matches_numpy():
    a, b = textured(32, 32, 2), textured(32, 32, 3)
    assert hc.mse(a, b) == pytest.approx(float(np.mean((a.astype(np.float64) - b) ** 2)), rel=1e-9)


def test_ssd_one_hot_vs_uniform_is_ln2():
    gt = np.zeros((4, 5, 2))
    gt[..., 0] = 1.0
    sr = np.full((4, 5, 2), 0.5)
    assert hc.ssd(gt, sr) == pytest.approx(math.log(2), abs=1e-12)
    assert hc.ssd(gt, gt) == 0.0


def test_spearman_and_ranks():
    assert hc.average_ranks([10, 20, 20, 30]) == [1.0, 2.5, 2.5, 4.0]
    assert hc.spearman([1, 2, 3, 4], [2, 1, 4, 3]) == pytest.approx(0.6, abs=1e-15)
    assert hc.spearman([1, 2, 3], [3, 2, 1]) == -1.0
    with pytest.raises(hc.ShapeMismatch):
        hc.spearman([1, 2], [1, 2, 3])


def test_hs_response_parsing():
    assert hc.parse_hs_response('```json\n{"score": 4, "reasoning": "ok"}\n```') == (4, "ok")
    with pytest.raises(hc.ParseError):
        hc.parse_hs_response('{"score": 7, "reasoning": "x"}')
    with pytest.raises(hc.ParseError):
        hc.parse_hs_response("no json here")


def test_projection_backend():
    be = hc.ProjectionBackend()
    a, b = textured(64, 64, 4), textured(64, 64, 5)
    assert be.distance(a, a) == 0.0
    assert be.distance(a, b) > 0.0
    f = be.embed(a, "st", hc.INTERM_LAYERS)
    assert f["layers"] == hc.INTERM_LAYERS
    assert f["grid"] == (4, 4)
    assert all(t.shape == (16, be.dim) for t in f["tokens"])
    assert be.embed(a, "cls", [11])["tokens"][0].shape == (1, be.dim)


def test_bad_shapes_raise():
    with pytest.raises(hc.ShapeMismatch):
        hc.mse(np.zeros((4, 4, 3), np.float32), np.zeros((4, 5, 3), np.float32))
    with pytest.raises(hc.ShapeMismatch):
        hc.mse(np.zeros((4, 4), np.float32), np.zeros((4, 4), np.float32))
    with pytest.raises(hc.ValidationError):
        hc.ProjectionBackend().embed(textured(32, 32, 0), "patch")


def test_png_round_trip(tmp_path):
    a = (np.round(textured(10, 12, 6) * 255) / 255).astype(np.float32)
    hc.save_png(a, tmp_path / "a.png")
    b = hc.load_image(tmp_path / "a.png")
    assert b.shape == (10, 12, 3)
    assert np.array_equal(a, b)
