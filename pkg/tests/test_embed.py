import math

import numpy as np
import pytest
from scipy import stats

from lastmile import geo
from lastmile.embed import (EmbedConfig, EmbeddingMatrix, EncoderParams, HexPatch, backward, build_patch,
                            build_patches, embed_matrix, fit_embeddings, forward, grad_check, init_params,
                            load_params, location_weight, location_weights, mean_loss, read_embeddings_csv,
                            rotation_permutation, save_params, train, write_embeddings_csv, zip_nll)
from lastmile.errors import ConfigError, ShapeError
from lastmile.geo import GeoPoint, Tessellation
from lastmile.ingest import RegionFeatureMatrix
from lastmile.synth import synth_city
from lastmile.vocab import TagVocabulary

SMALL = EmbedConfig(radius=1, channels=3, hidden=5, embed_dim=4)


def tiny_vocab(n=3):
    return TagVocabulary(tuple(f"k=v{i}" for i in range(n)))


def random_patch(rng, config, n_tags, p_missing=0.3):
    P = config.n_positions
    mask = (rng.uniform(size=P) > p_missing).astype(float)
    mask[0] = 1.0
    counts = rng.poisson(rng.uniform(0.2, 3.0), (P, n_tags)) * (rng.uniform(size=(P, n_tags)) > 0.4)
    return counts[None].astype(float) * mask[None, :, None], mask[None]


# -- zero-inflated Poisson --------------------------------------------------------

def test_zip_nll_examples():
    assert zip_nll(-50.0, 0.0, 0) == pytest.approx(1.0, abs=1e-12)
    assert zip_nll(20.0, 0.0, 0) == pytest.approx(0.0, abs=1e-8)
    expected = -(math.log(0.5) + 3 * math.log(2) - 2 - math.log(6))
    assert zip_nll(0.0, math.log(2.0), 3) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(2.40547, abs=1e-5)


def test_zip_nll_matches_direct_pmf():
    rng = np.random.default_rng(0)
    a = rng.uniform(-4, 4, 500)
    l = rng.uniform(-3, 3, 500)
    x = rng.integers(0, 12, 500)
    pi = 1 / (1 + np.exp(-a))
    pmf = (1 - pi) * stats.poisson.pmf(x, np.exp(l)) + pi * (x == 0)
    assert np.allclose(zip_nll(a, l, x), -np.log(pmf), atol=1e-10)


def test_zip_nll_is_finite_at_extremes():
    out = zip_nll(np.array([1e6, -1e6, 0.0]), np.array([1e6, -1e6, 1e6]), np.array([0, 5, 0]))
    assert np.all(np.isfinite(out))


# -- location weights -------------------------------------------------------------

@pytest.mark.parametrize("radius", [1, 2, 3, 5])
def test_location_weights_normalised_and_decreasing(radius):
    w = location_weights(radius)
    sizes = np.array([1] + [6 * d for d in range(1, radius + 1)])
    assert abs(np.sum(w * sizes) - 1.0) < 1e-12
    assert np.all(np.diff(w) < 0)


def test_location_weight_ratio_and_domain():
    assert location_weight(0, 1) / location_weight(1, 1) == pytest.approx(2.0)
    with pytest.raises(ConfigError):
        location_weight(4, 3)


# -- patches ----------------------------------------------------------------------

def test_patch_of_isolated_cell():
    tess = Tessellation("t", GeoPoint(0.0, 0.0))
    c = tess.cell(0, 0)
    m = RegionFeatureMatrix([c], tiny_vocab(), np.array([[1, 2, 3]]))
    p = build_patch(c, m, radius=1)
    assert p.mask.tolist() == [1, 0, 0, 0, 0, 0, 0]
    assert np.array_equal(p.tensor[0], [1, 2, 3]) and not p.tensor[1:].any()
    assert build_patch(c, m, radius=3).tensor.shape == (37, 3)


def test_batched_patches_match_single_patches():
    m, _, _ = synth_city(0, 60, 600, 0.0)
    counts, mask = build_patches(m, 2)
    for i in (0, 17, 59):
        p = build_patch(m.cells[i], m, 2)
        assert np.array_equal(counts[i], p.tensor) and np.array_equal(mask[i], p.mask)
        assert np.array_equal(p.tensor[0], m.counts[i])
        ring = geo.k_ring(m.cells[i], 2)
        assert [m.row(c) is not None for c in ring] == p.mask.astype(bool).tolist()


# -- network ----------------------------------------------------------------------

def test_zero_patch_gives_finite_output():
    params = init_params(4, SMALL, seed=0)
    fr = forward(params, (np.zeros((1, 7, 4)), np.ones((1, 7))))
    assert np.isfinite(fr.loss) and np.all(np.isfinite(fr.embedding)) and fr.embedding.shape == (1, 4)


def test_identical_patches_identical_embeddings():
    rng = np.random.default_rng(1)
    params = init_params(3, SMALL, seed=1)
    counts, mask = random_patch(rng, SMALL, 3)
    fr = forward(params, (np.repeat(counts, 2, 0), np.repeat(mask, 2, 0)))
    assert np.array_equal(fr.embedding[0], fr.embedding[1])


def test_default_bottleneck_is_fifty_wide():
    params = init_params(6, EmbedConfig(), seed=0)
    assert params.arrays["bott_w"].shape[1] == 50


def test_radius_mismatch_raises():
    params = init_params(3, SMALL)
    patch = HexPatch(None, 2, np.zeros((19, 3)), np.ones(19))
    with pytest.raises(ShapeError):
        forward(params, patch)
    with pytest.raises(ShapeError):
        forward(params, (np.zeros((1, 7, 5)), np.ones((1, 7))))


def test_grad_check_over_random_configurations():
    rng = np.random.default_rng(2)
    worst = 0.0
    for trial in range(100):
        cfg = EmbedConfig(radius=int(rng.integers(1, 3)), channels=int(rng.integers(2, 4)),
                          hidden=int(rng.integers(3, 6)), embed_dim=int(rng.integers(2, 5)),
                          log_input=bool(rng.integers(2)))
        n_tags = int(rng.integers(2, 5))
        params = init_params(n_tags, cfg, seed=trial)
        for v in params.arrays.values():
            v += rng.normal(0, 0.3, v.shape)
        worst = max(worst, grad_check(params, random_patch(rng, cfg, n_tags)))
    assert worst < 1e-4


def test_masked_positions_get_zero_input_gradient():
    rng = np.random.default_rng(3)
    params = init_params(3, SMALL, seed=3)
    counts, mask = random_patch(rng, SMALL, 3, p_missing=0.5)
    mask[0, 1:3] = 0.0
    _, d_inp = backward(params, forward(params, (counts, mask)))
    assert np.all(d_inp[0, mask[0] == 0] == 0.0)


def test_finite_difference_error_is_second_order():
    rng = np.random.default_rng(4)
    params = init_params(3, SMALL, seed=4)
    patch = random_patch(rng, SMALL, 3)
    fr = forward(params, patch)
    g, _ = backward(params, fr)

    def fd(eps):
        p = params.copy()
        p.arrays["enc_w"][0, 0] += eps
        up = forward(p, patch).loss
        p.arrays["enc_w"][0, 0] -= 2 * eps
        return (up - forward(p, patch).loss) / (2 * eps)

    e1, e2 = abs(fd(1e-2) - g["enc_w"][0, 0]), abs(fd(2e-2) - g["enc_w"][0, 0])
    assert e2 / e1 == pytest.approx(4.0, rel=0.1)


def test_loss_decreases_after_small_step():
    rng = np.random.default_rng(5)
    params = init_params(3, SMALL, seed=5)
    patch = random_patch(rng, SMALL, 3)
    fr = forward(params, patch)
    g, _ = backward(params, fr)
    stepped = params.copy()
    for k in g:
        stepped.arrays[k] -= 1e-3 * g[k]
    assert forward(stepped, patch).loss < fr.loss


def test_rotation_with_rotated_conv_weights_preserves_embedding():
    m, _, _ = synth_city(1, 80, 800, 0.0)
    params = init_params(len(m.vocab), EmbedConfig(radius=3, channels=4, hidden=8, embed_dim=5), seed=6)
    counts, mask = build_patches(m, 3)
    # the conv shares one weight per ring, so the rotated weights are the same weights
    for steps in range(1, 6):
        perm = rotation_permutation(3, steps)
        rot = forward(params, (counts[:, perm], mask[:, perm])).embedding
        assert np.allclose(rot, forward(params, (counts, mask)).embedding, atol=1e-12)


def test_rotation_permutation_matches_geometry():
    tess = Tessellation("t", GeoPoint(0.0, 0.0))
    ring = [(x.q, x.r) for x in geo.k_ring(tess.cell(0, 0), 2)]
    perm = rotation_permutation(2, 1)
    # content at cell (q, r, s) moves to (-s, -q, -r), a clockwise turn
    for i, j in enumerate(perm):
        q, r = ring[j]
        assert ring[i] == (q + r, -q)
    assert np.array_equal(rotation_permutation(2, 6), np.arange(19))


# -- training ---------------------------------------------------------------------

def test_train_zero_epochs_and_min_patches():
    params = init_params(3, SMALL, seed=0)
    rng = np.random.default_rng(0)
    batch = (rng.poisson(1.0, (40, 7, 3)).astype(float), np.ones((40, 7)))
    same, curve = train(params, batch, epochs=0)
    assert curve == [] and all(np.array_equal(same.arrays[k], params.arrays[k]) for k in params.arrays)
    with pytest.raises(ConfigError):
        train(params, (batch[0][:10], batch[1][:10]))


def test_training_is_deterministic_and_reduces_loss():
    m, _, _ = synth_city(2, 150, 1500, 0.0)
    cfg = EmbedConfig(radius=2, channels=8, hidden=32, embed_dim=10)
    patches = build_patches(m, 2)
    params = init_params(len(m.vocab), cfg, seed=2)
    a, curve_a = train(params, patches, epochs=30, lr=1e-2, seed=2)
    b, curve_b = train(params, patches, epochs=30, lr=1e-2, seed=2)
    assert curve_a == curve_b
    assert all(np.array_equal(a.arrays[k], b.arrays[k]) for k in a.arrays)
    assert mean_loss(a, patches) <= 0.8 * mean_loss(params, patches)


def test_embeddings_io_round_trip(tmp_path):
    m, _, _ = synth_city(3, 60, 600, 0.0)
    params, curve, [E] = fit_embeddings([m], EmbedConfig(radius=1, channels=2, hidden=4, embed_dim=3),
                                        epochs=2, seed=3)
    write_embeddings_csv(E, tmp_path / "e.csv")
    back = read_embeddings_csv(tmp_path / "e.csv", m.tess)
    assert back.cells == E.cells and np.array_equal(back.vectors, E.vectors)
    save_params(params, tmp_path / "p.json")
    again = embed_matrix(load_params(tmp_path / "p.json"), m)
    assert np.array_equal(again.vectors, E.vectors)
    with pytest.raises(ShapeError):
        EmbeddingMatrix(E.cells[:2], E.vectors)
