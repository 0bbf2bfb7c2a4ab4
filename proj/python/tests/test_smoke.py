# SPDX-License-Identifier: Apache-2.0
import math

import numpy as np
import pytest

import relfsl


def test_flop_count_reference_setting():
    c = relfsl.flop_count(256, 256, 64, 4, 4)
    assert c["vanilla"] == 8388608
    assert c["routed"] == 2129920
    assert c["ratio"] == pytest.approx(3.94, abs=0.005)


def test_metrics_on_balanced_confusion():
    m = relfsl.compute_metrics([[1, 1], [1, 1]])
    assert m == {"accuracy": 0.5, "precision": 0.5, "recall": 0.5, "f1": 0.5}


def test_metrics_reject_empty_confusion():
    with pytest.raises(relfsl.ContractError):
        relfsl.compute_metrics([[0, 0], [0, 0]])


def test_config_round_trip_and_errors():
    text = relfsl.default_config()
    assert relfsl.normalize_config(text) == text
    assert "encoder.channels = 640" in text
    with pytest.raises(relfsl.ConfigError):
        relfsl.normalize_config("attention.grid = 2\n")
    with pytest.raises(relfsl.ConfigError):
        relfsl.normalize_config("no.such.key = 1\n")


def test_lambda_mean():
    draws = relfsl.sample_lambda(2.0, 2.0, 10000, 3)
    assert draws.min() >= 0.0 and draws.max() <= 1.0
    assert abs(draws.mean() - 0.5) <= 0.02


def test_synthetic_images_shape_and_range():
    images, labels = relfsl.synthetic_images(3, 4, 84, 1)
    assert images.shape == (12, 3, 84, 84)
    assert images.dtype == np.float32
    assert images.min() >= 0.0 and images.max() <= 1.0
    assert list(labels) == [0] * 4 + [1] * 4 + [2] * 4
    again, _ = relfsl.synthetic_images(3, 4, 84, 1)
    assert np.array_equal(images, again)


def test_self_correlation_centre_and_bounds():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((6, 5, 5))
    r = relfsl.self_correlation(z, 5)
    assert r.shape == (6, 5, 5, 5, 5)
    assert np.all(np.abs(r) <= 1.0 + 1e-12)
    unit = z / np.linalg.norm(z, axis=0, keepdims=True)
    assert np.allclose(r[:, 2, 2], unit * unit)


def test_cross_correlation_is_cosine_similarity():
    rng = np.random.default_rng(1)
    fq = rng.standard_normal((8, 3, 3))
    fs = rng.standard_normal((8, 3, 3))
    c = relfsl.cross_correlation(fq, fs).reshape(9, 9)
    a = fq.reshape(8, 9).T
    b = fs.reshape(8, 9).T
    want = (a / np.linalg.norm(a, axis=1, keepdims=True)) @ (b / np.linalg.norm(b, axis=1, keepdims=True)).T
    assert np.allclose(c, want, atol=1e-6)


def test_vanilla_attention_matches_numpy():
    rng = np.random.default_rng(2)
    q, k, v = (rng.standard_normal((10, 4)) for _ in range(3))
    s = q @ k.T / math.sqrt(4)
    p = np.exp(s - s.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    assert np.allclose(relfsl.vanilla_attention(q, k, v), p @ v, atol=1e-12)


def test_routed_attention_with_every_region_is_vanilla():
    rng = np.random.default_rng(3)
    q, k, v = (rng.standard_normal((64, 8)) for _ in range(3))
    routed = relfsl.routed_attention(q, k, v, 8, 8, 4, 16)
    assert np.allclose(routed, relfsl.vanilla_attention(q, k, v), atol=1e-6)


def test_routed_attention_rejects_bad_grid():
    q = np.zeros((64, 2))
    with pytest.raises(relfsl.ContractError):
        relfsl.routed_attention(q, q, q, 8, 8, 3, 1)


def test_gradcheck_single_seed():
    rows = relfsl.gradcheck(64, 1)
    assert rows
    assert all(passed for _, _, _, passed in rows)


def test_cli_help_and_usage_errors():
    code, out, _ = relfsl.run_cli(["--help"])
    assert code == 0 and "train" in out
    code, _, err = relfsl.run_cli(["train"])
    assert code == 2


def test_cli_bench_attn(tmp_path):
    out_csv = tmp_path / "bench.csv"
    code, _, err = relfsl.run_cli(["bench-attn", "--out", str(out_csv)])
    assert code == 0, err
    assert "4,8388608,2129920," in out_csv.read_text()
