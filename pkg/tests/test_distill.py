import warnings

import numpy as np
import pytest
from scipy.stats import spearmanr

from helpers import fd_grad, low_variance_teacher, rel_err
from neurodistill import model as M
from neurodistill.distill import (DistillHyper, TeacherExport, distill_decomposition, distill_train,
                                  feature_residual, fit_supervised_projector, inverse_predict,
                                  inverse_projection_baseline, inverse_projection_losses, pca_projector,
                                  random_orthogonal_projector, tskd_losses)
from neurodistill.errors import ConfigError, ContractError, DimensionError
from neurodistill.io import default_spec, gen_synthetic, train_synthetic_teacher
from neurodistill.metrics import (covariance, optimal_u, projection_report, relative_reconstruction_error,
                                  sigma_norm_sq, task_metrics, tsr)
from neurodistill.optim import AdamState, TrainHyper, adam_step
from neurodistill.signal import extract_batch, preset_bank


def gaussian_teacher(seed, n=500, d_t=16, k=3):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, d_t)) @ rng.standard_normal((d_t, d_t))
    w, b = rng.standard_normal((d_t, k)), rng.standard_normal(k)
    logits = z @ w + b
    return TeacherExport(z, w, b, logits, logits.argmax(1))


class TestTeacherExport:
    def test_consistent(self):
        t = gaussian_teacher(0)
        assert t.consistent() and t.n == 500 and t.d_t == 16 and t.n_out == 3

    def test_perturbed_logits(self):
        t = gaussian_teacher(1)
        t.logits[3, 1] += 1e-3 * max(1.0, abs(t.logits[3, 1]))
        assert not t.consistent()

    def test_shape_checks(self):
        with pytest.raises(DimensionError):
            TeacherExport(np.ones((4, 3)), np.ones((2, 2)), np.ones(2), np.ones((4, 2)))
        with pytest.raises(DimensionError):
            TeacherExport(np.ones((4, 3)), np.ones((3, 2)), np.ones(2), np.ones((5, 2)))


class TestSupervisedProjector:
    def test_full_width(self):
        t = gaussian_teacher(2)
        proj = fit_supervised_projector(t, t.d_t, rng=np.random.default_rng(0))
        total = sigma_norm_sq(t.w_t, covariance(t.z_t).sigma)
        assert proj.fit_meta["final_compress_loss"] < 1e-6 * total

    def test_d_s_equals_k(self):
        t = gaussian_teacher(3)
        proj = fit_supervised_projector(t, t.n_out, rng=np.random.default_rng(1))
        sigma = covariance(t.z_t).sigma
        _, eps = optimal_u(proj.p, t.w_t, sigma)
        assert proj.fit_meta["final_compress_loss"] == pytest.approx(eps, abs=1e-12)
        # any P spanning W reaches zero, so the brute-force bound is 0
        assert eps <= 1e-3 * sigma_norm_sq(t.w_t, sigma)

    def test_zero_classifier(self):
        rng = np.random.default_rng(4)
        z = rng.standard_normal((50, 6))
        t = TeacherExport(z, np.zeros((6, 2)), np.zeros(2), np.zeros((50, 2)))
        proj = fit_supervised_projector(t, 2, DistillHyper(projector_iters=50), rng)
        assert proj.fit_meta["final_compress_loss"] == 0.0

    def test_unit_rms(self):
        t = gaussian_teacher(5)
        proj = fit_supervised_projector(t, 4, DistillHyper(projector_iters=200), np.random.default_rng(2))
        assert np.sqrt(np.mean(proj.project(t.z_t) ** 2)) == pytest.approx(1.0, rel=1e-12)

    def test_too_wide(self):
        with pytest.raises(ConfigError):
            fit_supervised_projector(gaussian_teacher(6), 17)

    @pytest.mark.parametrize("seed", range(5))
    def test_dominates_on_low_variance_task(self, seed):
        t, rng = low_variance_teacher(seed)
        sigma = covariance(t.z_t).sigma
        sup = tsr(fit_supervised_projector(t, 4, rng=rng).p, t.w_t, sigma)
        pca = tsr(pca_projector(t.z_t, 4).p, t.w_t, sigma)
        rnd = tsr(random_orthogonal_projector(t.d_t, 4, rng).p, t.w_t, sigma)
        assert sup >= pca + 0.1 and sup >= rnd + 0.1


class TestPcaProjector:
    def test_orthonormal(self):
        p = pca_projector(np.random.default_rng(7).standard_normal((200, 8)), 3).p
        np.testing.assert_allclose(p.T @ p, np.eye(3), atol=1e-8)

    def test_low_rank_data(self):
        rng = np.random.default_rng(8)
        z = rng.standard_normal((100, 3)) @ rng.standard_normal((3, 10))
        assert relative_reconstruction_error(z - z.mean(0), pca_projector(z, 3).p) < 1e-20

    def test_leading_direction_first(self):
        rng = np.random.default_rng(9)
        z = rng.standard_normal((2000, 3)) * np.array([0.5, 5.0, 1.0])
        p = pca_projector(z, 2).p
        assert np.argmax(np.abs(p[:, 0])) == 1 and np.argmax(np.abs(p[:, 1])) == 2


class TestRandomProjector:
    def test_orthonormal(self):
        p = random_orthogonal_projector(12, 5, np.random.default_rng(0)).p
        np.testing.assert_allclose(p.T @ p, np.eye(5), atol=1e-8)

    def test_seeded(self):
        a = random_orthogonal_projector(12, 5, np.random.default_rng(3)).p
        b = random_orthogonal_projector(12, 5, np.random.default_rng(3)).p
        assert a.tobytes() == b.tobytes()

    def test_span_dimension(self):
        assert np.linalg.matrix_rank(random_orthogonal_projector(9, 4, np.random.default_rng(1)).p) == 4


class TestTskdLosses:
    def test_exact_match(self):
        rng = np.random.default_rng(0)
        s, z = rng.standard_normal((3, 4)), rng.standard_normal((3, 5))
        loss, gl, gz = tskd_losses(s, z, s.copy(), z.copy())
        assert loss == 0.0 and not gl.any() and not gz.any()

    def test_lambda_zero(self):
        rng = np.random.default_rng(1)
        s, t, z, pt = (rng.standard_normal(sh) for sh in ((3, 4), (3, 4), (3, 5), (3, 5)))
        loss, _, gz = tskd_losses(s, z, t, pt, lam=0.0)
        assert loss == pytest.approx(np.sum((s - t) ** 2) / 3, rel=1e-14)
        assert not gz.any()

    def test_fd(self):
        rng = np.random.default_rng(2)
        s, t, z, pt = (rng.standard_normal(sh) for sh in ((3, 4), (3, 4), (3, 5), (3, 5)))
        y = np.array([0, 3, 1])
        _, gl, gz = tskd_losses(s, z, t, pt, lam=0.7, ce_mix=0.3, labels=y)

        def f():
            return tskd_losses(s, z, t, pt, lam=0.7, ce_mix=0.3, labels=y)[0]

        assert np.abs(gl - fd_grad(f, s)).max() < 1e-8
        assert np.abs(gz - fd_grad(f, z)).max() < 1e-8

    def test_ce_mix_needs_labels(self):
        with pytest.raises(ContractError):
            tskd_losses(np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 2)), ce_mix=0.5)

    def test_hyper_validation(self):
        with pytest.raises(ConfigError):
            DistillHyper(lam=-1.0)
        with pytest.raises(ConfigError):
            DistillHyper(ce_mix=1.5)


class TestDecomposition:
    @pytest.mark.parametrize("seed", range(5))
    def test_identity(self, seed):
        rng = np.random.default_rng(seed)
        d_t, d_s, k = 9, 4, 3
        args = (rng.standard_normal((d_t, k)), rng.standard_normal((d_s, k)), rng.standard_normal((d_t, d_s)),
                rng.standard_normal(d_t), rng.standard_normal(d_s))
        total, compress, feature, cross = distill_decomposition(*args)
        assert abs(total - (compress + feature + cross)) <= 1e-9 * total


def token_teacher(seed, n=80, L=3, D=6, d_t=10):
    """Teacher whose embeddings are a fixed nonlinear function of the tokens."""
    rng = np.random.default_rng(seed)
    tokens = rng.standard_normal((n, L, D))
    z = np.maximum(tokens.mean(1) @ rng.standard_normal((D, d_t)), 0.0)
    w, b = rng.standard_normal((d_t, 3)), rng.standard_normal(3)
    logits = z @ w + b
    return tokens, TeacherExport(z, w, b, logits, logits.argmax(1))


class TestDistillTrain:
    CFG = M.DecoderConfig(input_dim=6, out_dim=3, embed_dim=4, ffn_dim=8, n_layers=1, n_tokens=3)

    def test_feature_residual_shrinks(self):
        tokens, t = token_teacher(0)
        rng = np.random.default_rng(1)
        init = M.init_params(self.CFG, rng)
        proj = pca_projector(t.z_t, 4)
        before = proj.p.tobytes()
        hyper = DistillHyper(lam=10.0, train=TrainHyper(epochs=30, lr=3e-3, batch_size=16))
        rep = distill_train(self.CFG, init, tokens, t, proj, hyper, rng)
        assert feature_residual(self.CFG, rep.params, tokens, t, proj) < feature_residual(self.CFG, init, tokens, t, proj)
        assert proj.p.tobytes() == before

    def test_zero_epochs(self):
        tokens, t = token_teacher(2)
        rng = np.random.default_rng(3)
        init = M.init_params(self.CFG, rng)
        rep = distill_train(self.CFG, init, tokens, t, pca_projector(t.z_t, 4),
                            DistillHyper(train=TrainHyper(epochs=0)), rng)
        assert all(rep.params[k] is init[k] for k in init)

    def test_alignment_checks(self):
        tokens, t = token_teacher(4)
        init = M.init_params(self.CFG, np.random.default_rng(0))
        with pytest.raises(ContractError):
            distill_train(self.CFG, init, tokens[:-1], t, pca_projector(t.z_t, 4), DistillHyper(),
                          np.random.default_rng(0))
        with pytest.raises(DimensionError):
            distill_train(self.CFG, init, tokens, t, pca_projector(t.z_t, 3), DistillHyper(),
                          np.random.default_rng(0))


class TestInverseProjection:
    def test_identity_case(self):
        t = gaussian_teacher(7, n=20, d_t=6)
        loss, logits, _ = inverse_projection_losses(t.z_t, np.eye(6), t.w_t, t.b_t, t.z_t, t.logits)
        assert loss < 1e-20
        np.testing.assert_allclose(logits, t.logits, atol=1e-10)

    def test_fd(self):
        rng = np.random.default_rng(8)
        z_s, p, w, b = (rng.standard_normal(s) for s in ((3, 2), (2, 5), (5, 3), (3,)))
        z_t, tl = rng.standard_normal((3, 5)), rng.standard_normal((3, 3))
        _, _, g = inverse_projection_losses(z_s, p, w, b, z_t, tl, lam=0.5)

        def f():
            return inverse_projection_losses(z_s, p, w, b, z_t, tl, lam=0.5)[0]

        for name, arr in (("z_s", z_s), ("p_inv", p), ("w_h", w), ("b_h", b)):
            assert rel_err(g[name], fd_grad(f, arr)) < 1e-6, name

    def test_feature_loss_decreases(self):
        rng = np.random.default_rng(9)
        t = gaussian_teacher(9, n=200, d_t=8)
        z_s = t.z_t @ rng.standard_normal((8, 3))
        params = {"p": rng.standard_normal((3, 8)) / np.sqrt(3)}
        st = AdamState(lr=1e-2)
        losses = []
        for _ in range(100):
            loss, _, g = inverse_projection_losses(z_s, params["p"], t.w_t, t.b_t, t.z_t, t.logits, lam=1.0)
            feat = float(np.sum((z_s @ params["p"] - t.z_t) ** 2) / len(z_s))
            losses.append(feat)
            params, st = adam_step(st, params, {"p": g["p_inv"]})
        assert losses[-1] < losses[0]
        assert np.all(np.diff(losses[:20]) < 0)

    def test_baseline_trains(self):
        tokens, t = token_teacher(10)
        cfg = TestDistillTrain.CFG
        rng = np.random.default_rng(11)
        rep = inverse_projection_baseline(cfg, M.init_params(cfg, rng), tokens, t,
                                          DistillHyper(train=TrainHyper(epochs=3, lr=3e-3)), rng)
        assert {"inv.P", "inv.W_h", "inv.b_h"} <= set(rep.params)
        assert inverse_predict(rep.params, cfg, tokens).shape == (80, 3)


def _spearman(a, b):
    # a constant metric carries no ranking information
    if np.ptp(a) < 1e-9 * max(1.0, np.abs(a).max()):
        return 0.0
    return float(spearmanr(a, b)[0])


class TestCorrelationStudy:
    def test_tsr_tracks_distilled_recall(self):
        bank = preset_bank("monkey_r", 500.0)
        results = {"supervised": [], "pca": [], "random": []}
        for seed in range(3):
            big = default_spec(n_windows=800, seed=100 + seed, noise_std=2.0)
            teacher = train_synthetic_teacher(gen_synthetic(big), big, 128, seed=seed)
            rec = gen_synthetic(default_spec(n_windows=300, seed=200 + seed, noise_std=2.0))
            test = gen_synthetic(default_spec(n_windows=400, seed=300 + seed, noise_std=2.0))
            exp = teacher.export(rec.windows, rec.labels)
            tr, te = (extract_batch(d.windows, 500.0, bank, 10) for d in (rec, test))
            cfg = M.DecoderConfig(tr.shape[2], 4, embed_dim=4, ffn_dim=32)
            init = M.init_params(cfg, np.random.default_rng(seed))
            hyper = DistillHyper(lam=10.0, train=TrainHyper(epochs=100, lr=3e-3, batch_size=16))
            rng = np.random.default_rng(seed)
            projs = {"supervised": fit_supervised_projector(exp, 4, rng=rng), "pca": pca_projector(exp.z_t, 4),
                     "random": random_orthogonal_projector(exp.d_t, 4, rng)}
            for kind, proj in projs.items():
                rep = projection_report(proj.p, exp.w_t, exp.z_t)
                params = distill_train(cfg, init, tr, exp, proj, hyper, np.random.default_rng(seed)).params
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    recall = task_metrics(M.predict(params, cfg, te)[0].argmax(1), test.labels)["macro_recall"]
                results[kind].append((rep.tsr, rep.mi_cca, -rep.recon_error, recall))
        m = np.array([np.mean(v, axis=0) for v in results.values()])
        rho_tsr, rho_mi, rho_rec = (_spearman(m[:, j], m[:, 3]) for j in range(3))
        assert rho_tsr >= rho_mi and rho_tsr >= rho_rec
        assert rho_tsr > 0.0
