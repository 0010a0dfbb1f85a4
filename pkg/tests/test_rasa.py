import numpy as np
import pytest

from nestssl.encoder import patch_coordinates
from nestssl.rasa import (
    DegenerateFeaturesError,
    RASAState,
    apply_iterative,
    best_constant_loss,
    compose_transform,
    fit_position_head,
    fold_into_linear,
    gram_schmidt_pair,
    plane_projector,
    rasa_iterate,
    remove_plane,
    write_rasa_report,
)
from nestssl.tensor import ShapeError


def grid_coords(g=8):
    return patch_coordinates((g, g)).astype(np.float64)


def _logit(p):
    return np.log(p / (1.0 - p))


def planted_features(n_images=40, g=8, d=32, noise=0.05, seed=0):
    """Noise features carrying the grid coordinates (pre-sigmoid) in two
    fixed directions, repeated per image."""
    rng = np.random.default_rng(seed)
    coords = np.tile(grid_coords(g), (n_images, 1))
    feats = rng.normal(scale=noise, size=(len(coords), d))
    feats[:, 3] = _logit(coords[:, 0])
    feats[:, 11] = _logit(coords[:, 1])
    return feats, coords


# ---------------------------------------------------------------------------
# position head


def test_planted_signal_fits_below_1e minus3 := None
def test_planted_signal_fits_below_1e_minus_3():
    feats, coords = planted_features()
    head = fit_position_head(feats, coords, epochs=800, lr=0.05)
    assert head.final_loss < 1e-3


def test_noise_features_fit_no_better_than_best_constant():
    rng = np.random.default_rng(1)
    coords = np.tile(grid_coords(8), (60, 1))  # 3840 rows >> 24 dims
    feats = rng.normal(size=(len(coords), 24))
    head = fit_position_head(feats, coords, epochs=300, lr=0.05)
    floor = best_constant_loss(coords)
    assert floor >= 0.05
    assert head.final_loss > 0.9 * floor


def test_zero_epochs_is_untrained_baseline():
    feats, coords = planted_features(n_images=4)
    head = fit_position_head(feats, coords, epochs=0)
    untrained = ((0.5 - coords) ** 2).mean()
    assert head.final_loss == pytest.approx(untrained, rel=1e-9)
    assert np.array_equal(head.weight, np.zeros_like(head.weight))


def test_identical_features_flagged():
    coords = grid_coords(4)
    feats = np.ones((len(coords), 8))
    with pytest.raises(DegenerateFeaturesError, match="identical"):
        fit_position_head(feats, coords)


# ---------------------------------------------------------------------------
# gram-schmidt


def test_gram_schmidt_orthonormal_input_unchanged():
    u_r, u_c = gram_schmidt_pair(np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    np.testing.assert_allclose(u_r, [1, 0, 0], atol=1e-12)
    np.testing.assert_allclose(u_c, [0, 1, 0], atol=1e-12)


def test_gram_schmidt_hand_case_matches_bruteforce():
    # brute-force orthonormalization oracle in D=2:
    # u_r = (1,0); residual of (1,1) is (0,1)
    u_r, u_c = gram_schmidt_pair(np.array([1.0, 0.0]), np.array([1.0, 1.0]))
    np.testing.assert_allclose(u_r, [1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(u_c, [0.0, 1.0], atol=1e-12)
    # span preserved: both inputs are combinations of (u_r, u_c)
    basis = np.stack([u_r, u_c])
    for w in (np.array([1.0, 0.0]), np.array([1.0, 1.0])):
        recon = (w @ basis.T) @ basis
        np.testing.assert_allclose(recon, w, atol=1e-12)


def test_gram_schmidt_parallel_rejected():
    w = np.array([1.0, 2.0, 3.0])
    with pytest.raises(DegenerateFeaturesError, match="parallel"):
        gram_schmidt_pair(w, 2.0 * w)
    with pytest.raises(DegenerateFeaturesError, match="zero"):
        gram_schmidt_pair(np.zeros(3), w)


# ---------------------------------------------------------------------------
# plane removal


def _plane(seed=0, d=16):
    rng = np.random.default_rng(seed)
    return gram_schmidt_pair(rng.normal(size=d), rng.normal(size=d))


def test_remove_plane_leaves_orthogonal_vectors_unchanged():
    u_r, u_c = _plane()
    rng = np.random.default_rng(3)
    z = rng.normal(size=(5, 16))
    z_orth = z - np.outer(z @ u_r, u_r) - np.outer(z @ u_c, u_c)
    np.testing.assert_allclose(remove_plane(z_orth, u_r, u_c), z_orth, atol=1e-10)


def test_remove_plane_annihilates_in_plane_vectors():
    u_r, u_c = _plane(seed=4)
    z = np.stack([2.0 * u_r + 3.0 * u_c, -1.5 * u_r])
    np.testing.assert_allclose(remove_plane(z, u_r, u_c), np.zeros_like(z), atol=1e-10)


def test_remove_plane_idempotent():
    u_r, u_c = _plane(seed=5)
    z = np.random.default_rng(6).normal(size=(7, 16))
    once = remove_plane(z, u_r, u_c)
    np.testing.assert_allclose(remove_plane(once, u_r, u_c), once, atol=1e-6)


def test_remove_plane_rejects_non_orthonormal():
    with pytest.raises(ShapeError, match="orthonormal"):
        remove_plane(np.zeros((2, 3)), np.array([1.0, 1.0, 0.0]), np.array([0.0, 1.0, 0.0]))


def test_remove_plane_zeroes_components_and_shrinks_norm():
    u_r, u_c = _plane(seed=7)
    z = np.random.default_rng(8).normal(size=(9, 16))
    cleaned = remove_plane(z, u_r, u_c)
    np.testing.assert_allclose(cleaned @ u_r, 0.0, atol=1e-6)
    np.testing.assert_allclose(cleaned @ u_c, 0.0, atol=1e-6)
    assert (np.linalg.norm(cleaned, axis=1) <= np.linalg.norm(z, axis=1) + 1e-12).all()


def test_projector_properties():
    u_r, u_c = _plane(seed=9, d=12)
    p = plane_projector(u_r, u_c)
    np.testing.assert_allclose(p, p.T, atol=1e-12)
    np.testing.assert_allclose(p @ p, p, atol=1e-6)
    eigvals = np.linalg.eigvalsh(p)
    assert np.all((np.abs(eigvals) < 1e-9) | (np.abs(eigvals - 1.0) < 1e-9))
    assert int(round(eigvals.sum())) == 10  # rank D - 2
    np.testing.assert_allclose(p @ u_r, 0.0, atol=1e-12)


# ---------------------------------------------------------------------------
# iteration


def test_planted_plane_removed_then_stops_early():
    feats, coords = planted_features(noise=0.3, seed=10)
    state = rasa_iterate(feats, coords, t_max=9, epochs=600, lr=0.05)
    # the planted plane is linear position signal: round one removes it,
    # round two's refit sits at the noise floor and stops the loop
    assert state.iterations >= 1
    assert len(state.losses) == state.iterations + 1
    assert state.losses[0] < 1e-2
    floor = best_constant_loss(coords)
    assert state.losses[-1] > 0.8 * floor
    cleaned = apply_iterative(feats, state)
    refit = fit_position_head(cleaned, coords, epochs=600, lr=0.05)
    assert refit.final_loss > 0.9 * floor


def test_position_independent_features_stop_immediately():
    rng = np.random.default_rng(11)
    coords = np.tile(grid_coords(8), (50, 1))
    feats = rng.normal(size=(len(coords), 24))
    state = rasa_iterate(feats, coords, t_max=9, epochs=200, lr=0.05)
    assert state.iterations == 0
    assert len(state.losses) == 1


def test_t_max_zero_rejected():
    with pytest.raises(ValueError):
        rasa_iterate(np.zeros((4, 4)), np.zeros((4, 2)), t_max=0)


def test_successive_planes_mutually_orthogonal():
    # zero-init keeps each fitted W inside the cleaned subspace, so the
    # planes stack into an orthogonal set and rank drops by 2 per round
    rng = np.random.default_rng(12)
    coords = np.tile(grid_coords(6), (30, 1))
    feats = rng.normal(size=(len(coords), 20), scale=0.05)
    feats[:, 2] += 2.0 * _logit(coords[:, 0])
    feats[:, 5] += 2.0 * _logit(coords[:, 1])
    feats[:, 7] += coords[:, 0] * 3.0
    feats[:, 13] += coords[:, 1] * 3.0
    state = rasa_iterate(feats, coords, t_max=5, epochs=400, lr=0.05)
    assert state.iterations >= 2
    vectors = [u for plane in state.planes for u in plane]
    gram = np.array([[float(a @ b) for b in vectors] for a in vectors])
    np.testing.assert_allclose(gram, np.eye(len(vectors)), atol=1e-5)
    rank = np.linalg.matrix_rank(state.transform, tol=1e-8)
    assert rank == 20 - 2 * state.iterations


# ---------------------------------------------------------------------------
# folding


def test_fold_empty_state_is_identity():
    state = RASAState()
    state.transform = compose_transform(state, 6)
    w = np.random.default_rng(13).normal(size=(6, 6)).astype(np.float32)
    np.testing.assert_allclose(fold_into_linear(w, state), w, atol=1e-7)


def test_fold_one_plane_in_3d_has_rank_one_kernel():
    u_r, u_c = gram_schmidt_pair(np.array([1.0, 0, 0]), np.array([0, 1.0, 0]))
    state = RASAState(planes=[(u_r, u_c)])
    state.transform = compose_transform(state, 3)
    assert np.linalg.matrix_rank(state.transform) == 1
    np.testing.assert_allclose(state.transform @ u_r, 0.0, atol=1e-12)
    np.testing.assert_allclose(state.transform @ u_c, 0.0, atol=1e-12)


def test_folded_equals_iterative_on_random_inputs():
    # dual-path equivalence: (H @ W) cleaned iteratively == H @ (W L)
    rng = np.random.default_rng(14)
    d = 16
    planes = []
    state = RASAState()
    u1 = gram_schmidt_pair(rng.normal(size=d), rng.normal(size=d))
    state.planes.append(u1)
    # second plane orthogonal to the first, as produced by iteration
    p1 = plane_projector(*u1)
    u2 = gram_schmidt_pair(p1 @ rng.normal(size=d), p1 @ rng.normal(size=d))
    state.planes.append(u2)
    state.transform = compose_transform(state, d)
    w = rng.normal(size=(d, d))
    hidden = rng.normal(size=(100, d))
    iterative = apply_iterative(hidden @ w, state)
    folded = hidden @ fold_into_linear(w, state)
    np.testing.assert_allclose(folded, iterative, atol=1e-5)


def test_fold_dimension_mismatch_rejected():
    state = RASAState()
    state.transform = np.eye(4)
    with pytest.raises(ShapeError):
        fold_into_linear(np.zeros((4, 6)), state)


def test_report_format(tmp_path):
    state = RASAState(losses=[0.01, 0.12], residuals=[3e-8])
    path = tmp_path / "rasa.csv"
    write_rasa_report(path, state)
    lines = path.read_text().splitlines()
    assert lines[0] == "iteration,L_pos,plane_norm_residual"
    assert lines[1].startswith("1,0.01,")
    assert lines[2].startswith("2,0.12,nan")
