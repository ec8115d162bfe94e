import numpy as np
import pytest

from thinkey.factored import (
    CompressionMode,
    apply_factored_to_model,
    compress_mode,
    compress_model,
    factor_keys,
    factor_layer,
    score_error,
    truncate,
)
from thinkey.linalg import Rng, matmul, seeded_random_matrix
from thinkey.model import ModelConfig, forward, init_model


def scores(x, w_q, w_k):
    return (x @ w_q) @ (x @ w_k).T


def test_full_rank_scores_exact():
    rng = Rng(1)
    w_q, w_k = rng.normal((12, 12)), rng.normal((12, 12))
    fp = factor_keys(w_q, w_k, 12)
    x = rng.normal((32, 12))
    assert np.max(np.abs(fp.scores(x) - scores(x, w_q, w_k))) < 1e-8


def test_rank_one_key_exact_at_r1():
    rng = Rng(2)
    w_k = np.outer(rng.normal(10), rng.normal(6))
    w_q = rng.normal((10, 6))
    fp = factor_keys(w_q, w_k, 1)
    x = rng.normal((9, 10))
    assert fp.a.shape == (10, 1) and fp.w_q_absorbed.shape == (10, 1)
    assert np.max(np.abs(fp.scores(x) - scores(x, w_q, w_k))) < 1e-8


def test_truncated_scores_equal_truncated_key_scores():
    rng = Rng(3)
    w_q, w_k = rng.normal((16, 16)), rng.normal((16, 16))
    fp = factor_keys(w_q, w_k, 8)
    x = rng.normal((20, 16))
    assert np.max(np.abs(fp.scores(x) - scores(x, w_q, truncate(w_k, 8)))) < 1e-10


def test_absorbed_query_is_one_matmul():
    rng = Rng(4)
    w_q, w_k = rng.normal((8, 6)), rng.normal((8, 6))
    fp = factor_keys(w_q, w_k, 3)
    assert np.array_equal(fp.w_q_absorbed, matmul(w_q, fp.v_r))


def test_thin_key_shape_and_energies():
    w_k = seeded_random_matrix(5, 16, 8)
    fp = factor_keys(seeded_random_matrix(6, 16, 8), w_k, 3)
    assert fp.a.shape == (16, 3)
    total = float(np.sum(w_k**2))
    assert fp.retained_energy + fp.discarded_energy == pytest.approx(total, rel=1e-12)


def test_per_head_blocks_sum_to_absorbed_query():
    rng = Rng(7)
    w_q, w_k = rng.normal((8, 8)), rng.normal((8, 8))
    fp = factor_keys(w_q, w_k, 5, n_heads=4)
    blocks = fp.w_q_heads.reshape(8, 4, 5).sum(axis=1)
    assert np.allclose(blocks, fp.w_q_absorbed, atol=1e-12)


@pytest.mark.parametrize("r", [0, 9])
def test_factor_keys_rejects_bad_rank(r):
    with pytest.raises(ValueError):
        factor_keys(np.ones((8, 8)), np.ones((8, 8)), r)


def test_factor_keys_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        factor_keys(np.ones((8, 4)), np.ones((8, 8)), 2)


# ------------------------------------------------------------ compress_mode


def test_konly_full_rank_is_identity():
    rng = Rng(8)
    w_q, w_k = rng.normal((8, 8)), rng.normal((8, 8))
    q2, k2 = compress_mode(w_q, w_k, 8, CompressionMode.K_ONLY)
    assert np.array_equal(q2, w_q)
    assert np.max(np.abs(k2 - w_k)) < 1e-8


def test_both_full_rank_is_identity():
    rng = Rng(9)
    w_q, w_k = rng.normal((8, 8)), rng.normal((8, 8))
    q2, k2 = compress_mode(w_q, w_k, 8, "both")
    assert np.max(np.abs(q2 - w_q)) < 1e-8 and np.max(np.abs(k2 - w_k)) < 1e-8


def test_qonly_mirrors_konly():
    rng = Rng(10)
    w_q, w_k = rng.normal((8, 8)), rng.normal((8, 8))
    q2, k2 = compress_mode(w_q, w_k, 3, CompressionMode.Q_ONLY)
    assert np.array_equal(k2, w_k)
    assert np.allclose(q2, truncate(w_q, 3))


def test_konly_error_is_discarded_singular_energy():
    rng = Rng(11)
    w_q, w_k = rng.normal((8, 8)), rng.normal((8, 8))
    _, k2 = compress_mode(w_q, w_k, 4, CompressionMode.K_ONLY)
    s = np.linalg.svd(w_k, compute_uv=False)
    assert abs(np.linalg.norm(w_k - k2) - np.sqrt(np.sum(s[4:] ** 2))) < 1e-8


# ------------------------------------------------------------ score_error


def test_score_error_zero_at_full_rank():
    rng = Rng(12)
    w_q, w_k, x = rng.normal((8, 8)), rng.normal((8, 8)), rng.normal((10, 8))
    assert score_error(x, w_q, w_k, factor_keys(w_q, w_k, 8)) < 1e-8


def test_score_error_monotone_in_rank_for_isotropic_inputs():
    rng = Rng(13)
    w_q, w_k = rng.normal((10, 10)), rng.normal((10, 10))
    x, _ = np.linalg.qr(rng.normal((30, 10)))
    u, s, vt = np.linalg.svd(w_k)
    errs = [score_error(x, w_q, w_k, factor_keys(w_q, w_k, r)) for r in range(1, 11)]
    # X^T X = I, so the error is sqrt(sum_{i>r} s_i^2 |W_Q v_i|^2)
    closed = [np.sqrt(sum(s[i] ** 2 * np.linalg.norm(w_q @ vt[i]) ** 2 for i in range(r, 10))) for r in range(1, 11)]
    np.testing.assert_allclose(errs, closed, atol=1e-9)
    assert all(a >= b - 1e-9 for a, b in zip(errs, errs[1:]))


def test_score_error_can_rise_with_rank_for_correlated_inputs():
    # dropping fewer directions can still increase ||X W_Q (W_K - W_K^(r))^T X^T||
    # when X mixes the discarded directions; this seed is such a case
    found = False
    for seed in range(2000, 2050):
        rng = Rng(seed)
        rows, cols = 6 + (seed - 2000) % 7, 4 + (seed - 2000) % 5
        rng.normal((rows, cols))
        w_q, w_k, x = rng.normal((8, 8)), rng.normal((8, 8)), rng.normal((10, 8))
        errs = [score_error(x, w_q, w_k, factor_keys(w_q, w_k, r)) for r in range(1, 9)]
        found |= any(b > a + 1e-9 for a, b in zip(errs, errs[1:]))
    assert found


def test_score_error_expansion_oracle():
    rng = Rng(14)
    w_q, w_k, x = rng.normal((9, 9)), rng.normal((9, 9)), rng.normal((12, 9))
    fp = factor_keys(w_q, w_k, 4)
    u, s, vt = np.linalg.svd(w_k)
    w_k_r = (u[:, :4] * s[:4]) @ vt[:4]
    direct = np.linalg.norm(x @ w_q @ (w_k - w_k_r).T @ x.T)
    assert abs(score_error(x, w_q, w_k, fp) - direct) < 1e-9


# ------------------------------------------------------------ models


def tiny_model(seed=0, d_select=8):
    return init_model(ModelConfig(2, 16, 2, d_select, 32, 11, 9, seed=seed))


def test_apply_full_rank_preserves_outputs():
    m = tiny_model(1)
    ids = Rng(15).integers(11, (4, 9))
    f = apply_factored_to_model(m, 0, 8)
    f = apply_factored_to_model(f, 1, 8)
    a, _ = forward(m, ids, keep=False)
    b, _ = forward(f, ids, keep=False)
    assert np.max(np.abs(a - b)) < 1e-8


def test_apply_touches_only_qk_of_that_layer():
    m = tiny_model(2)
    f = apply_factored_to_model(m, 1, 3)
    changed = set(m.params) ^ set(f.params)
    assert changed == {"layers.1.attn.w_q", "layers.1.attn.w_k", "layers.1.attn.w_q_absorbed", "layers.1.attn.a"}
    for name in set(m.params) & set(f.params):
        assert np.array_equal(m.params[name], f.params[name])
    assert f.params["layers.1.attn.a"].shape == (16, 3)
    assert f.key_cache_widths() == [8, 3]


def test_apply_quarter_rank_cuts_key_width_75_percent():
    m = tiny_model(3)
    f = apply_factored_to_model(m, 0, 2)
    assert f.key_cache_widths()[0] == m.key_cache_widths()[0] // 4


def test_apply_rejects_refactoring_and_bad_layer():
    f = apply_factored_to_model(tiny_model(4), 0, 4)
    with pytest.raises(ValueError, match="already"):
        apply_factored_to_model(f, 0, 2)
    with pytest.raises(ValueError):
        apply_factored_to_model(f, 5, 2)
    with pytest.raises(ValueError):
        apply_factored_to_model(f, 1, 9)


@pytest.mark.parametrize("r", [1, 3, 5, 8])
def test_konly_and_factored_paths_agree(r):
    m = tiny_model(5)
    ids = Rng(16).integers(11, (3, 9))
    konly = compress_model(m, r, CompressionMode.K_ONLY)
    fact = m
    for i in range(2):
        fact = apply_factored_to_model(fact, i, r)
    a, _ = forward(konly, ids, keep=False)
    b, _ = forward(fact, ids, keep=False)
    assert np.max(np.abs(a - b)) < 1e-9


def test_factor_layer_returns_projection():
    m = tiny_model(6)
    out, fp = factor_layer(m, 0, 4)
    assert np.array_equal(out.params["layers.0.attn.a"], fp.a)
    assert fp.sigma.shape == (4,) and fp.sigma_discarded.shape == (4,)
