"""Synthetic corpus: ground-truth structure, determinism, persistence."""

import numpy as np
import pytest

from reenact.landmarks import (PCA_DIMS, PCA_GROUPS, decompose_corpus,
                               fit_expression_basis, normalize_landmark)
from reenact.synth import (canonical_template, corpus_split, generate_corpus,
                           load_corpus, make_expression_modes, render_frame,
                           save_corpus)


class TestExpressionModes:
    def test_orthonormal_per_group(self):
        modes = make_expression_modes(seed=0)
        for block, d in zip(modes.modes, PCA_DIMS):
            gram = block.T @ block
            np.testing.assert_allclose(gram, np.eye(d), atol=1e-10)

    def test_group_dims(self):
        modes = make_expression_modes(seed=0)
        assert [m.shape[1] for m in modes.modes] == list(PCA_DIMS)
        assert PCA_DIMS == (8, 8, 8, 16, 8)
        assert sum(m.shape[1] for m in modes.modes) == 48

    def test_seeds_differ(self):
        a = make_expression_modes(seed=0).modes[0]
        b = make_expression_modes(seed=1).modes[0]
        # principal angle between subspaces strictly positive
        s = np.linalg.svd(a.T @ b, compute_uv=False)
        assert s.min() < 1.0 - 1e-6

    def test_offsets_respect_group_support(self):
        modes = make_expression_modes(seed=2)
        for g, (name, idx) in enumerate(PCA_GROUPS.items()):
            alpha = np.zeros(48)
            start = sum(PCA_DIMS[:g])
            alpha[start] = 1.0
            off = modes.offset(alpha)
            support = np.zeros(68, dtype=bool)
            support[idx] = True
            np.testing.assert_allclose(off[~support], 0.0, atol=1e-12)
            assert np.abs(off[support]).max() > 0


class TestGenerateCorpus:
    def test_bit_identical_regeneration(self):
        a = generate_corpus(3, 1, 4, seed=5, image_size=32)
        b = generate_corpus(3, 1, 4, seed=5, image_size=32)
        for ca, cb in zip(a.clips, b.clips):
            np.testing.assert_array_equal(ca.landmarks, cb.landmarks)
            np.testing.assert_array_equal(ca.images, cb.images)

    def test_construction_identity(self):
        corpus = generate_corpus(4, 1, 6, seed=6, render=False)
        for clip in corpus.clips:
            ident = corpus.identities[clip.identity].offset
            for t in range(clip.alpha.shape[0]):
                exp = corpus.modes.offset(clip.alpha[t])
                expect = corpus.template + ident + exp
                np.testing.assert_allclose(clip.landmarks_gt[t], expect,
                                           atol=1e-12)

    def test_identity_offsets_zero_mean(self):
        corpus = generate_corpus(6, 1, 2, seed=7, render=False)
        total = np.sum([i.offset for i in corpus.identities], axis=0)
        np.testing.assert_allclose(total, 0.0, atol=1e-12)

    def test_alpha_mean_zero_per_clip(self):
        corpus = generate_corpus(3, 2, 10, seed=8, render=False)
        for clip in corpus.clips:
            np.testing.assert_allclose(clip.alpha.mean(axis=0), 0.0, atol=1e-12)

    def test_pose_round_trip_small_amplitude(self):
        # second-order Procrustes error vanishes as offsets shrink
        corpus = generate_corpus(4, 1, 6, seed=9, render=False,
                                 exp_scale=0.01, id_scale=0.01)
        worst = 0.0
        for clip in corpus.clips:
            for t in range(clip.landmarks.shape[0]):
                l_bar, _ = normalize_landmark(clip.landmarks[t], corpus.template)
                worst = max(worst, np.abs(l_bar - clip.landmarks_gt[t]).max())
        assert worst < 1e-6

    def test_decomposition_recovers_identity_offsets(self):
        # noiseless oracle: decompose the pre-pose ground-truth landmarks
        corpus = generate_corpus(10, 1, 40, seed=10, render=False)
        videos = {c.name: c.landmarks_gt for c in corpus.clips}
        stats = decompose_corpus(videos)
        for clip in corpus.clips:
            truth = corpus.identities[clip.identity].offset
            got = stats.identity_geometry[clip.name]
            # identity offsets recovered up to the finite-sample expression mean
            assert np.abs(got - truth).max() < 1e-9

    def test_rendered_frames_deterministic_and_identity_colored(self):
        corpus = generate_corpus(2, 1, 2, seed=11, image_size=32)
        c0, c1 = corpus.clips
        assert c0.images.dtype == np.uint8
        assert not np.array_equal(c0.images[0], c1.images[0])
        re = render_frame(c0.landmarks[0],
                          corpus.identities[c0.identity].appearance_seed, 32, 32)
        np.testing.assert_array_equal(re, c0.images[0])


class TestSplit:
    def test_counts_and_disjoint(self):
        corpus = generate_corpus(10, 1, 2, seed=12, render=False)
        train, held = corpus_split(corpus, 0.8, seed=0)
        train_ids = {c.identity for c in train.clips}
        held_ids = {c.identity for c in held.clips}
        assert len(train_ids) == 8 and len(held_ids) == 2
        assert not (train_ids & held_ids)

    def test_deterministic(self):
        corpus = generate_corpus(6, 1, 2, seed=13, render=False)
        a, _ = corpus_split(corpus, 0.5, seed=3)
        b, _ = corpus_split(corpus, 0.5, seed=3)
        assert [c.name for c in a.clips] == [c.name for c in b.clips]

    def test_bad_fraction_rejected(self):
        corpus = generate_corpus(4, 1, 2, seed=14, render=False)
        with pytest.raises(ValueError):
            corpus_split(corpus, 1.5, seed=0)

    def test_single_identity_rejected(self):
        corpus = generate_corpus(1, 1, 2, seed=15, render=False)
        with pytest.raises(ValueError):
            corpus_split(corpus, 0.5, seed=0)


class TestPersistence:
    def test_save_load_round_trip(self, tmp_path):
        corpus = generate_corpus(3, 1, 4, seed=16, image_size=32)
        save_corpus(corpus, tmp_path / "corpus")
        back = load_corpus(tmp_path / "corpus")
        assert back.image_size == 32
        assert [c.name for c in back.clips] == [c.name for c in corpus.clips]
        for ca, cb in zip(corpus.clips, back.clips):
            np.testing.assert_allclose(ca.landmarks, cb.landmarks, atol=1e-12)
            np.testing.assert_array_equal(ca.images, cb.images)


def test_canonical_template_is_nondegenerate():
    tpl = canonical_template()
    assert tpl.shape == (68, 3)
    assert np.linalg.matrix_rank(tpl - tpl.mean(axis=0)) == 3
