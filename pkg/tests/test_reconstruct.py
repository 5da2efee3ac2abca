import json

import numpy as np
import pytest

from orient_bayes import estimators, forward, reconstruct, so3


@pytest.fixture(scope="module")
def polar_truth():
    return forward.make_polar_phantom(40, 8, seed=0)


def noiseless_polar_obs(img, shifts):
    rng = np.random.default_rng(0)
    return np.stack(
        [
            forward.synthesize_polar_observation(img, s, forward.NoiseModel(sigma=0.0), rng).data
            for s in shifts
        ]
    )


class TestPcc:
    def test_self(self, polar_truth):
        assert reconstruct.pcc(polar_truth, polar_truth) == 1.0

    def test_negation(self, polar_truth):
        assert reconstruct.pcc(polar_truth, -polar_truth) == -1.0

    def test_constant_offset(self, polar_truth):
        assert reconstruct.pcc(polar_truth, polar_truth + 3.7) == pytest.approx(1.0, abs=1e-12)

    def test_constant_input_rejected(self, polar_truth):
        with pytest.raises(reconstruct.ZeroVarianceError):
            reconstruct.pcc(polar_truth, np.ones_like(polar_truth))

    def test_shape_mismatch(self, polar_truth):
        with pytest.raises(estimators.DimensionMismatchError):
            reconstruct.pcc(polar_truth, polar_truth[:10])


class TestPolarSteps:
    def test_soft_single_obs_identity(self, polar_truth):
        # M = 1 with zero shift: the update returns the observation bit-exactly
        ys = noiseless_polar_obs(polar_truth, [0])
        out = reconstruct.em_step_soft(ys, polar_truth, None, forward.NoiseModel(sigma=1e-6))
        assert np.allclose(out, polar_truth, atol=1e-12)

    def test_hand_computed_four_term_sum(self):
        # four shifts with distinct residuals: check against a direct
        # evaluation of sum_l w_l (l . y)
        img = forward.make_polar_phantom(12, 4, seed=3)
        y = forward.rotate_polar(img, -1).ravel() + 0.05
        noise = forward.NoiseModel(sigma=0.5)
        x = reconstruct._polar_templates(img)
        w = np.exp(
            estimators.normalized_log_weights(y[None], x, noise.effective_variance())
        )[0]
        expected = sum(
            w[s] * forward.rotate_polar(y.reshape(img.shape), s) for s in range(4)
        )
        out = reconstruct.em_step_soft(y[None], img, None, noise)
        assert np.allclose(out, expected, atol=1e-12)

    def test_two_shifted_copies_recover_truth(self, polar_truth):
        ys = noiseless_polar_obs(polar_truth, [2, 5])
        out = reconstruct.hard_step(ys, polar_truth, None, forward.NoiseModel(sigma=1e-9))
        assert np.array_equal(out, polar_truth)

    def test_hard_step_brute_force_indices(self, polar_truth):
        rng = np.random.default_rng(5)
        noise = forward.NoiseModel(sigma=0.4)
        ys = noiseless_polar_obs(polar_truth, [1, 3, 6]) + 0.4 * rng.normal(
            size=(3, polar_truth.size)
        )
        x = reconstruct._polar_templates(polar_truth)
        oracle = np.array(
            [np.argmin([np.sum((y - t) ** 2) for t in x]) for y in ys]
        )
        out = reconstruct.hard_step(ys, polar_truth, None, noise)
        expected = reconstruct._shift_average(ys, oracle, polar_truth.shape)
        assert np.allclose(out, expected, atol=1e-12)

    def test_one_hot_collapse_all_steps_agree(self, polar_truth):
        # at tiny sigma on exact-grid data every posterior is one-hot, so the
        # three update rules coincide
        ys = noiseless_polar_obs(polar_truth, [0, 2, 4, 7])
        noise = forward.NoiseModel(sigma=1e-8 * forward.signal_scale(polar_truth))
        soft = reconstruct.em_step_soft(ys, polar_truth, None, noise)
        mmse = reconstruct.em_step_mmse(ys, polar_truth, None, noise)
        hard = reconstruct.hard_step(ys, polar_truth, None, noise)
        assert np.allclose(soft, mmse, atol=1e-10)
        assert np.allclose(mmse, hard, atol=1e-10)

    def test_permutation_invariance(self, polar_truth):
        rng = np.random.default_rng(6)
        ys = noiseless_polar_obs(polar_truth, [0, 1, 3, 5]) + 0.2 * rng.normal(
            size=(4, polar_truth.size)
        )
        noise = forward.NoiseModel(sigma=0.2)
        perm = rng.permutation(4)
        for step in (reconstruct.em_step_soft, reconstruct.em_step_mmse, reconstruct.hard_step):
            a = step(ys, polar_truth, None, noise)
            b = step(ys[perm], polar_truth, None, noise)
            assert np.allclose(a, b, atol=1e-10)

    def test_fixed_alignment_linearity(self, polar_truth):
        # with the shift decisions frozen, the averaging is linear in the data
        ys = noiseless_polar_obs(polar_truth, [1, 4])
        shifts = np.array([1, 4])
        a = reconstruct._shift_average(3.0 * ys, shifts, polar_truth.shape)
        b = 3.0 * reconstruct._shift_average(ys, shifts, polar_truth.shape)
        assert np.allclose(a, b, atol=1e-12)


@pytest.fixture(scope="module")
def volume_setup():
    vbar = forward.make_phantom("gaussian_blobs", 12, seed=2)
    cands = estimators.CandidateSet.build(vbar, so3.RotationPrior.uniform(), 8, seed=4)
    rng = np.random.default_rng(7)
    ys = np.stack(
        [
            forward.synthesize_observation(
                vbar, g, forward.NoiseModel(sigma=0.0), False, rng
            ).data
            for g in cands.rotations[:4]
        ]
    )
    return vbar, cands, ys


class TestVolumeSteps:
    def test_one_hot_collapse(self, volume_setup):
        vbar, cands, ys = volume_setup
        noise = forward.NoiseModel(sigma=1e-8 * forward.signal_scale(vbar))
        soft = reconstruct.em_step_soft(ys, vbar, cands, noise)
        mmse = reconstruct.em_step_mmse(ys, vbar, cands, noise)
        hard = reconstruct.hard_step(ys, vbar, cands, noise)
        assert np.allclose(soft, mmse, atol=1e-10)
        assert np.allclose(mmse, hard, atol=1e-10)

    def test_hard_step_brute_force_indices(self, volume_setup):
        vbar, cands, ys = volume_setup
        noise = forward.NoiseModel(sigma=0.1)
        x = reconstruct._volume_templates(vbar, cands.rotations, "trilinear")
        oracle = np.array([np.argmin([np.sum((y - t) ** 2) for t in x]) for y in ys])
        out = reconstruct.hard_step(ys, vbar, cands, noise)
        expected = reconstruct._rotation_average(
            ys, cands.rotations[oracle], vbar.shape, "trilinear"
        )
        assert np.allclose(out, expected, atol=1e-10)

    def test_hard_step_improves_template_correlation(self, volume_setup):
        vbar, cands, ys = volume_setup
        out = reconstruct.hard_step(ys, vbar, cands, forward.NoiseModel(sigma=0.05))
        assert reconstruct.pcc(out, vbar) > 0.9


class TestRunReconstruction:
    def test_noiseless_fixed_point(self, polar_truth):
        ys = noiseless_polar_obs(polar_truth, [0, 1, 2, 5, 6])
        cfg = reconstruct.ReconstructionConfig(assignment="soft_em")
        noise = forward.NoiseModel(sigma=1e-8 * forward.signal_scale(polar_truth))
        v, trace = reconstruct.run_reconstruction(
            ys, polar_truth, None, noise, cfg, truth=polar_truth
        )
        assert len(trace) <= 2
        assert trace[-1]["pcc_truth"] == pytest.approx(1.0, abs=1e-9)
        assert trace[-1]["rel_change"] < cfg.rel_tol

    def test_max_iters_one(self, polar_truth):
        ys = noiseless_polar_obs(polar_truth, [0, 3])
        cfg = reconstruct.ReconstructionConfig(assignment="hard_map", max_iters=1, rel_tol=1e-30)
        _, trace = reconstruct.run_reconstruction(
            ys, polar_truth, None, forward.NoiseModel(sigma=0.1), cfg
        )
        assert len(trace) == 1
        assert trace[0]["iter"] == 0

    def test_trace_without_truth(self, polar_truth):
        ys = noiseless_polar_obs(polar_truth, [0, 3])
        cfg = reconstruct.ReconstructionConfig(max_iters=2, rel_tol=1e-30)
        _, trace = reconstruct.run_reconstruction(
            ys, polar_truth, None, forward.NoiseModel(sigma=0.1), cfg
        )
        assert all(r["pcc_truth"] is None for r in trace)
        assert all(np.isfinite(r["pcc_template"]) for r in trace)

    def test_deterministic(self, polar_truth):
        rng_ys = noiseless_polar_obs(polar_truth, [1, 2, 4]) + 0.3
        cfg = reconstruct.ReconstructionConfig(assignment="mmse_align", max_iters=5)
        noise = forward.NoiseModel(sigma=0.3)
        v1, t1 = reconstruct.run_reconstruction(rng_ys, polar_truth, None, noise, cfg)
        v2, t2 = reconstruct.run_reconstruction(rng_ys, polar_truth, None, noise, cfg)
        assert np.array_equal(v1, v2)
        assert t1 == t2

    def test_bad_config(self):
        with pytest.raises(ValueError):
            reconstruct.ReconstructionConfig(assignment="annealed")
        with pytest.raises(ValueError):
            reconstruct.ReconstructionConfig(max_iters=0)
        with pytest.raises(ValueError):
            reconstruct.ReconstructionConfig(rel_tol=0.0)


def test_write_trace_round_trip(tmp_path, polar_truth):
    ys = noiseless_polar_obs(polar_truth, [0, 2])
    cfg = reconstruct.ReconstructionConfig(max_iters=3, rel_tol=1e-30)
    _, trace = reconstruct.run_reconstruction(
        ys, polar_truth, None, forward.NoiseModel(sigma=0.2), cfg, truth=polar_truth
    )
    path = tmp_path / "trace.jsonl"
    reconstruct.write_trace(path, trace)
    lines = path.read_text().splitlines()
    assert len(lines) == len(trace)
    back = [json.loads(line) for line in lines]
    assert back == trace
    assert set(back[0]) == {"iter", "rel_change", "pcc_truth", "pcc_template"}
