import numpy as np
import pytest

import lesionseg as ls


def test_dice_and_volumes():
    gt = np.zeros((4, 4, 4), np.uint8)
    gt[1:3, 1:3, 1:3] = 1
    pred = gt.copy()
    pred[0, 3, 3] = 1  # detached false positive
    assert ls.dice(gt, gt) == 1.0
    assert ls.dice(pred, gt) == pytest.approx(16 / 17)
    assert ls.false_positive_volume(pred, gt, spacing=(2.0, 2.0, 2.0)) == pytest.approx(0.008)
    assert ls.false_negative_volume(pred, gt) == 0.0


def test_components_follow_adjacency():
    m = np.zeros((3, 3, 3), np.uint8)
    m[0, 0, 0] = m[1, 1, 0] = m[2, 2, 1] = 1  # edge, then corner neighbours
    assert len(ls.connected_components(m, 6)[1]) == 3
    assert len(ls.connected_components(m, 18)[1]) == 2
    labels, sizes = ls.connected_components(m, 26)
    assert sizes == [3]
    assert labels.shape == (3, 3, 3)
    with pytest.raises(ls.ConfigError):
        ls.connected_components(m, 7)


def test_normalization_matches_numpy():
    rng = np.random.default_rng(0)
    x = rng.normal(50, 20, size=5000)
    st = ls.channel_stats(x.tolist())
    assert st["mean"] == pytest.approx(x.mean(), rel=1e-12)
    assert st["std"] == pytest.approx(x.std(), rel=1e-12)
    assert st["p_low"] == pytest.approx(np.quantile(x, 0.005), rel=1e-12)
    assert st["p_high"] == pytest.approx(np.quantile(x, 0.995), rel=1e-12)
    img = x[:4 * 5 * 250].reshape(4, 5, 250).astype(np.float32)
    out = ls.normalize(img, st["mean"], st["std"], st["p_low"], st["p_high"])
    expect = (np.clip(img.astype(np.float64), st["p_low"], st["p_high"]) - st["mean"]) / st["std"]
    np.testing.assert_allclose(out, expect, rtol=1e-5, atol=1e-6)


def test_selection_and_network():
    d = {"a": 0.1, "b": 0.0, "c": 0.5}
    assert ls.select_hard_samples(d, "bottom_k", k=2) == ["b", "a"]
    assert ls.select_hard_samples(d, "bottom_k", k=2, exclude_zero=True) == ["a", "c"]
    with pytest.raises(ls.SelectionError):
        ls.select_hard_samples(d, "bottom_k", k=9)
    assert ls.count_parameters("toy") == 199610
    assert "384" in ls.describe_network("paper")


def test_phantom_and_cli(tmp_path):
    s = ls.generate_study(seed=3, n_lesions=2)
    assert s["pet"].shape == (32, 32, 32)
    assert s["label"].sum() > 0
    assert ls.dice(s["label"], s["label"]) == 1.0
    code, out, _ = ls.run_cli(["synth", "--n", "2", "--out", str(tmp_path / "c")])
    assert code == 0
    assert (tmp_path / "c" / "manifest.tsv").exists()
    assert ls.run_cli(["nope"])[0] == 1
