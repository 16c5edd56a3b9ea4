"""Training loops: config parsing, learning behavior, resumability."""

import numpy as np
import pytest

from reenact.landmarks import normalize_landmark
from reenact.synth import corpus_split, generate_corpus
from reenact.train import (TrainConfig, config_from_file,
                           estimate_landmark_parts, fit_landmark_pipeline,
                           load_disentangler, load_gan_checkpoint,
                           load_pipeline, parse_config_file, save_disentangler,
                           save_pipeline, train_disentangler, train_gan)


@pytest.fixture(scope="module")
def small_corpus():
    return generate_corpus(6, 1, 10, seed=21, image_size=32)


@pytest.fixture(scope="module")
def pipeline(small_corpus):
    return fit_landmark_pipeline(small_corpus)


class TestConfig:
    def test_parse_flat_file(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("steps = 100\n# comment\ng_lr = 1e-4\n\nbatch_size = 4\n")
        cfg = config_from_file(path)
        assert cfg.steps == 100
        assert cfg.g_lr == pytest.approx(1e-4)
        assert cfg.batch_size == 4

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("bogus = 1\n")
        with pytest.raises(ValueError):
            parse_config_file(path)

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("steps 100\n")
        with pytest.raises(ValueError):
            parse_config_file(path)

    def test_paper_defaults(self):
        cfg = TrainConfig()
        assert cfg.n_targets == 4
        assert cfg.d_lr == pytest.approx(2e-4)
        assert cfg.g_lr == pytest.approx(5e-5)
        assert cfg.disentangler_lr == pytest.approx(3e-4)
        assert cfg.grad_clip == pytest.approx(1.0)
        assert cfg.d_updates_per_g == 1

    def test_nonpositive_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(steps=0)


class TestDisentangler:
    def test_short_run_and_persistence(self, small_corpus, pipeline, tmp_path):
        train, held = corpus_split(small_corpus, 0.7, seed=0)
        cfg = TrainConfig(steps=15, image_size=32, seed=1)
        res = train_disentangler(train, held, pipeline, cfg, batch_size=4)
        assert len(res.loss_curve) == 15
        assert np.isfinite(res.heldout_mse)
        assert res.baseline_mse == pytest.approx(1.0, abs=0.35)
        path = tmp_path / "dz.ckpt"
        save_disentangler(path, res.model)
        back = load_disentangler(path, seed=1)
        from reenact.tensor import Tensor
        g = np.random.default_rng(0)
        img = Tensor(g.uniform(-1, 1, (1, 3, 32, 32)))
        lm = Tensor(g.standard_normal((1, 204)))
        np.testing.assert_array_equal(res.model(img, lm).data, back(img, lm).data)

    def test_deterministic_given_seed(self, small_corpus, pipeline):
        train, held = corpus_split(small_corpus, 0.7, seed=0)
        cfg = TrainConfig(steps=5, image_size=32, seed=2)
        a = train_disentangler(train, held, pipeline, cfg, batch_size=4)
        b = train_disentangler(train, held, pipeline, cfg, batch_size=4)
        assert a.loss_curve == b.loss_curve
        assert a.heldout_mse == b.heldout_mse

    def test_estimate_parts_identity(self, small_corpus, pipeline):
        from reenact.networks import Disentangler
        model = Disentangler(seed=3, image_size=32)  # untrained on purpose
        clip = small_corpus.clips[0]
        l_bar, _ = normalize_landmark(clip.landmarks[0], pipeline.template)
        l_id, l_exp, alpha = estimate_landmark_parts(
            model, clip.images[0], l_bar, pipeline.basis, lambda_exp=1.5)
        rebuilt = pipeline.basis.mean_landmark + l_id + l_exp
        np.testing.assert_allclose(rebuilt, l_bar, atol=1e-12)
        assert alpha.shape == (48,)

    def test_estimate_parts_zero_alpha(self, pipeline, small_corpus):
        from reenact.networks import Disentangler
        from reenact.landmarks import reconstruct_expression

        class ZeroModel(Disentangler):
            def __call__(self, image, lm):
                from reenact.tensor import Tensor
                return Tensor(np.zeros((image.shape[0], 48)))

        model = ZeroModel(seed=0, image_size=32)
        clip = small_corpus.clips[0]
        l_bar, _ = normalize_landmark(clip.landmarks[0], pipeline.template)
        l_id, l_exp, _ = estimate_landmark_parts(
            model, clip.images[0], l_bar, pipeline.basis)
        np.testing.assert_allclose(l_exp, 0.0, atol=1e-12)
        np.testing.assert_allclose(l_id, l_bar - pipeline.basis.mean_landmark,
                                   atol=1e-12)

    def test_pipeline_persistence(self, pipeline, tmp_path):
        path = tmp_path / "pipe.ckpt"
        save_pipeline(path, pipeline)
        back = load_pipeline(path)
        np.testing.assert_array_equal(back.template, pipeline.template)
        for a, b in zip(back.basis.bases, pipeline.basis.bases):
            np.testing.assert_array_equal(a, b)


class TestGan:
    def test_three_steps_and_resume(self, small_corpus, tmp_path):
        cfg = TrainConfig(steps=4, batch_size=1, image_size=32, n_targets=2,
                          base_channels=8, max_channels=32, seed=4,
                          checkpoint_every=2)
        res = train_gan(small_corpus, cfg, out_dir=tmp_path,
                        log_file=tmp_path / "metrics.csv")
        assert len(res.history) == 4
        for row in res.history:
            assert np.isfinite(row["g_loss"]) and np.isfinite(row["d_loss"])
        header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
        assert header == "step,d_loss,g_loss,l_p,l_pf,l_fm"

        res2 = train_gan(small_corpus, cfg, resume=tmp_path / "gan_000002.ckpt")
        replay = [r["g_loss"] for r in res2.history]
        orig = [r["g_loss"] for r in res.history[2:]]
        assert replay == orig

    def test_checkpoint_restores_everything(self, small_corpus, tmp_path):
        cfg = TrainConfig(steps=2, batch_size=1, image_size=32, n_targets=2,
                          base_channels=8, max_channels=32, seed=5)
        res = train_gan(small_corpus, cfg, out_dir=tmp_path)
        step, gen, disc, opt_g, opt_d = load_gan_checkpoint(
            tmp_path / "gan_final.ckpt", cfg)
        assert step == 2
        for (n, p), q in zip(sorted(res.generator.named_parameters().items()),
                             [p for _, p in sorted(gen.named_parameters().items())]):
            np.testing.assert_array_equal(p.data, q.data)
        assert opt_g.step > 0 and opt_d.step > 0

    def test_unrendered_corpus_rejected(self):
        corpus = generate_corpus(3, 1, 6, seed=22, render=False)
        cfg = TrainConfig(steps=1, batch_size=1, image_size=32, n_targets=2,
                          base_channels=8, max_channels=32)
        with pytest.raises(ValueError):
            train_gan(corpus, cfg)
