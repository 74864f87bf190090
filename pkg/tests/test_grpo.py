import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gtma.encoder import Template, TextEncoderParams, VocabularyTable, encode_text
from gtma.grpo import (
    GrpoConfig,
    adaptive_step,
    grad_similarity,
    grpo_run,
    init_pseudo_word,
    objective_value,
    project_to_vocab,
    regularization_gradient,
    regularizer,
    synthesize_class_pseudo_word,
)
from gtma.numeric import DimMismatchError, NonFiniteError, l2_normalize, make_rng


@pytest.fixture
def unit_square_vocab():
    return VocabularyTable(np.array([[1.0, 0.0], [0.0, 1.0]]), ["x", "y"])


def identity_instance(seed, d=16, n_vocab=24):
    rng = make_rng(seed)
    emb = rng.standard_normal((n_vocab, d))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    vocab = VocabularyTable(emb, [f"w{i}" for i in range(n_vocab)])
    return TextEncoderParams.identity(d), vocab, l2_normalize(rng.standard_normal(d))


class TestConfig:
    def test_defaults_are_published_setting(self):
        cfg = GrpoConfig()
        assert (cfg.iterations, cfg.eta0, cfg.lam) == (10, 0.01, 0.1)

    @pytest.mark.parametrize("bad", [
        {"eta0": 0.0}, {"lam": -0.1}, {"beta": 0.0}, {"gamma": 1.5}, {"iterations": -1},
        {"projection": "lsh"}, {"init": "zeros"}, {"projection": "soft_knn", "knn_k": 0},
        {"projection": "soft_knn", "knn_temperature": 0.0},
    ])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            GrpoConfig(**bad)


class TestProjection:
    def test_nearest_example(self, unit_square_vocab):
        np.testing.assert_array_equal(project_to_vocab([0.9, 0.1], unit_square_vocab), [1.0, 0.0])

    def test_member_projects_to_itself(self, unit_square_vocab):
        np.testing.assert_array_equal(project_to_vocab([0.0, 1.0], unit_square_vocab), [0.0, 1.0])

    def test_tie_goes_to_lowest_index(self, unit_square_vocab):
        np.testing.assert_array_equal(project_to_vocab([0.5, 0.5], unit_square_vocab), [1.0, 0.0])

    def test_brute_force(self):
        rng = make_rng(0)
        vocab = VocabularyTable(rng.standard_normal((30, 5)), [str(i) for i in range(30)])
        for _ in range(50):
            z = rng.standard_normal(5)
            dists = [np.linalg.norm(z - row) for row in vocab.embeddings]
            np.testing.assert_array_equal(project_to_vocab(z, vocab), vocab.embeddings[int(np.argmin(dists))])

    def test_soft_knn(self, unit_square_vocab):
        out = project_to_vocab([0.9, 0.1], unit_square_vocab, "soft_knn", k=2, temperature=1.0)
        d2 = np.array([0.02, 1.62])
        w = np.exp(-d2) / np.exp(-d2).sum()
        np.testing.assert_allclose(out, w, atol=1e-15)
        np.testing.assert_array_equal(project_to_vocab([0.9, 0.1], unit_square_vocab, "soft_knn", k=1),
                                      [1.0, 0.0])

    def test_soft_knn_bad_k(self, unit_square_vocab):
        with pytest.raises(ValueError):
            project_to_vocab([0.9, 0.1], unit_square_vocab, "soft_knn", k=3)

    def test_dim_mismatch(self, unit_square_vocab):
        with pytest.raises(DimMismatchError):
            project_to_vocab([1.0, 0.0, 0.0], unit_square_vocab)

    @settings(max_examples=50)
    @given(st.integers(0, 2**32 - 1))
    def test_idempotent(self, seed):
        rng = make_rng(seed)
        vocab = VocabularyTable(rng.standard_normal((8, 3)), list("abcdefgh"))
        p = project_to_vocab(rng.standard_normal(3), vocab)
        np.testing.assert_array_equal(project_to_vocab(p, vocab), p)

    @settings(max_examples=50)
    @given(st.integers(0, 2**32 - 1))
    def test_permutation_invariant_without_ties(self, seed):
        rng = make_rng(seed)
        emb = rng.standard_normal((10, 4))
        z = rng.standard_normal(4)
        d2 = np.sort(np.sum((emb - z) ** 2, axis=1))
        if d2[1] - d2[0] < 1e-9:
            return
        perm = rng.permutation(10)
        a = project_to_vocab(z, VocabularyTable(emb, [str(i) for i in range(10)]))
        b = project_to_vocab(z, VocabularyTable(emb[perm], [str(i) for i in perm]))
        np.testing.assert_array_equal(a, b)


class TestRegularizer:
    def test_example(self, unit_square_vocab):
        np.testing.assert_array_equal(regularization_gradient([0.9, 0.1], unit_square_vocab),
                                      np.array([0.9, 0.1]) - np.array([1.0, 0.0]))
        np.testing.assert_allclose(regularization_gradient([0.9, 0.1], unit_square_vocab), [-0.1, 0.1],
                                   atol=1e-16)
        assert regularizer([0.9, 0.1], unit_square_vocab) == pytest.approx(0.01, abs=1e-15)

    def test_zero_on_vocabulary(self, unit_square_vocab):
        np.testing.assert_array_equal(regularization_gradient([1.0, 0.0], unit_square_vocab), [0.0, 0.0])


class TestStepSize:
    def test_grad_similarity(self):
        g = np.array([1.0, -2.0])
        assert grad_similarity(g, np.zeros(2)) == 0.0
        assert grad_similarity(g, g) == pytest.approx(1.0, abs=1e-15)
        assert grad_similarity(g, -g) == pytest.approx(-1.0, abs=1e-15)
        with pytest.raises(DimMismatchError):
            grad_similarity(g, np.ones(3))

    def test_midpoint(self):
        cfg = GrpoConfig(eta0=0.3, beta=7.0, gamma=0.2)
        assert adaptive_step(0.2, cfg) == pytest.approx(0.15, abs=1e-15)

    def test_sigmoid_five(self):
        # 0.01 / (1 + exp(-5)), evaluated with math.exp
        assert adaptive_step(1.0, GrpoConfig(eta0=0.01, beta=10.0, gamma=0.5)) == pytest.approx(
            0.009933071490757152, abs=1e-15)

    def test_never_reaches_bounds(self):
        cfg = GrpoConfig(eta0=0.01, beta=1e6, gamma=0.0)
        low, high = adaptive_step(-1.0, cfg), adaptive_step(1.0, cfg)
        assert 0.0 < low < 1e-300
        assert high < 0.01


class TestInit:
    def test_nearest_vocab_brute_force(self):
        rng = make_rng(2)
        params = TextEncoderParams.projected(6, 9, rng)
        vocab = VocabularyTable(rng.standard_normal((15, 9)), [str(i) for i in range(15)])
        slot = Template.slot_only()
        for j in (0, 7, 14):
            anchor = encode_text(params, vocab, slot, vocab.embeddings[j])
            sims = [encode_text(params, vocab, slot, row) @ anchor for row in vocab.embeddings]
            assert int(np.argmax(sims)) == j
            np.testing.assert_array_equal(init_pseudo_word(anchor, vocab, params), vocab.embeddings[j])

    def test_linear_map_identity(self):
        params, vocab, c = identity_instance(0, d=5)
        np.testing.assert_array_equal(init_pseudo_word(c, vocab, params, "linear_map", linear_map=np.eye(5)), c)

    @pytest.mark.parametrize("mode", ["mlp", "linear_map"])
    def test_seeded_modes_deterministic(self, mode):
        params, vocab, c = identity_instance(0)
        a = init_pseudo_word(c, vocab, params, mode, seed=7)
        b = init_pseudo_word(c, vocab, params, mode, seed=7)
        assert a.tobytes() == b.tobytes()
        assert not np.array_equal(a, init_pseudo_word(c, vocab, params, mode, seed=8))

    def test_mlp_matches_vocab_scale(self):
        params, vocab, c = identity_instance(0)
        z = init_pseudo_word(c, vocab, params, "mlp", seed=1)
        assert np.linalg.norm(z) == pytest.approx(np.linalg.norm(vocab.embeddings, axis=1).mean())


class TestRun:
    def test_zero_iterations(self):
        params, vocab, c = identity_instance(1)
        tr = grpo_run(c, params, vocab, Template.slot_only(), GrpoConfig(iterations=0))
        assert tr.steps == ()
        np.testing.assert_array_equal(tr.z_star, tr.z_init)

    def test_step_record_invariants(self):
        params, vocab, c = identity_instance(3)
        cfg = GrpoConfig(eta0=0.2, iterations=30)
        tr = grpo_run(c, params, vocab, Template.slot_only(), cfg)
        assert len(tr.steps) == 30
        assert tr.steps[0].rho == 0.0
        assert tr.steps[0].eta == pytest.approx(cfg.eta0 / (1 + np.exp(cfg.beta * cfg.gamma)))
        for s in tr.steps:
            assert 0.0 < s.eta < cfg.eta0
            assert -1.0 <= s.rho <= 1.0
            assert -1.0 <= s.score <= 1.0

    def test_update_equals_gradient_step_without_regularization(self):
        # replay the loop by hand and compare every iterate
        from gtma.encoder import alignment_gradient
        params, vocab, c = identity_instance(4)
        t = Template((0, 1, -1), 2)
        cfg = GrpoConfig(eta0=0.3, lam=0.0, iterations=1)
        z = init_pseudo_word(c, vocab, params)
        for _ in range(8):
            tr = grpo_run(c, params, vocab, t, cfg, z_init=z)
            g = alignment_gradient(c, params, vocab, t, z)
            assert np.linalg.norm(tr.z_star - z - tr.steps[0].eta * g) <= 1e-12
            z = tr.z_star

    def test_regularization_pulls_toward_vocabulary(self):
        params, vocab, c = identity_instance(5)
        z0 = vocab.embeddings[0] + 0.3 * make_rng(0).standard_normal(16)
        base = GrpoConfig(eta0=0.5, iterations=1)
        free = grpo_run(c, params, vocab, Template.slot_only(), base.replace(lam=0.0), z_init=z0)
        pulled = grpo_run(c, params, vocab, Template.slot_only(), base.replace(lam=1.0), z_init=z0)
        eta = free.steps[0].eta
        np.testing.assert_allclose(free.z_star - pulled.z_star, eta * (z0 - vocab.embeddings[0]), atol=1e-14)

    def test_fixed_step_ablation(self):
        params, vocab, c = identity_instance(6)
        tr = grpo_run(c, params, vocab, Template.slot_only(), GrpoConfig(adaptive_lr=False, eta0=0.05))
        assert all(s.eta == 0.05 for s in tr.steps)

    def test_deterministic(self):
        params, vocab, c = identity_instance(7)
        cfg = GrpoConfig(init="mlp", init_seed=3, iterations=20, eta0=0.1)
        a = grpo_run(c, params, vocab, Template.slot_only(), cfg)
        b = grpo_run(c, params, vocab, Template.slot_only(), cfg)
        assert a.z_star.tobytes() == b.z_star.tobytes()
        assert a.steps == b.steps

    def test_divergence_raises_with_step(self):
        params, vocab, c = identity_instance(8)
        z0 = 1e-7 * vocab.embeddings[0]
        with pytest.raises(NonFiniteError) as err:
            grpo_run(c, params, vocab, Template.slot_only(), GrpoConfig(eta0=1e3, adaptive_lr=False), z_init=z0)
        assert err.value.step == 0

    def test_small_step_ascent(self):
        for seed in range(10):
            params, vocab, c = identity_instance(seed)
            tr = grpo_run(c, params, vocab, Template.slot_only(), GrpoConfig(eta0=1e-3, lam=0.0, iterations=30))
            assert np.all(np.diff(tr.scores()) >= -1e-9)

    def test_soft_knn_run(self):
        params, vocab, c = identity_instance(9)
        cfg = GrpoConfig(projection="soft_knn", knn_k=3, knn_temperature=0.5, eta0=0.5, iterations=20)
        tr = grpo_run(c, params, vocab, Template.slot_only(), cfg)
        assert tr.final_score > tr.steps[0].score


class TestObjective:
    def test_on_vocabulary(self):
        params, vocab, c = identity_instance(0)
        z = vocab.embeddings[3]
        s, r, combined = objective_value(z, c, params, vocab, Template.slot_only())
        assert r == 0.0
        assert combined == s

    def test_lambda_zero(self):
        params, vocab, c = identity_instance(0)
        z = make_rng(1).standard_normal(16)
        s, r, combined = objective_value(z, c, params, vocab, Template.slot_only(), GrpoConfig(lam=0.0))
        assert r > 0
        assert combined == s

    def test_hand_example(self, unit_square_vocab):
        params = TextEncoderParams.identity(2)
        _, r, _ = objective_value(np.array([0.9, 0.1]), np.array([1.0, 0.0]), params, unit_square_vocab,
                                  Template.slot_only())
        assert r == pytest.approx(0.01, abs=1e-15)


class TestClassSynthesis:
    def test_single_anchor_is_that_run(self):
        params, vocab, c = identity_instance(0)
        cfg = GrpoConfig(eta0=0.2)
        z, emb, trs = synthesize_class_pseudo_word([c], params, vocab, Template.slot_only(), cfg)
        np.testing.assert_array_equal(z, grpo_run(c, params, vocab, Template.slot_only(), cfg).z_star)
        np.testing.assert_allclose(emb, l2_normalize(z))
        assert len(trs) == 1

    def test_mean_anchor_runs_once(self):
        params, vocab, c = identity_instance(0)
        anchors = [c, l2_normalize(c + 0.1)]
        _, _, trs = synthesize_class_pseudo_word(anchors, params, vocab, Template.slot_only(),
                                                 aggregation="mean_anchor")
        assert len(trs) == 1

    def test_empty_rejected(self):
        params, vocab, _ = identity_instance(0)
        with pytest.raises(ValueError):
            synthesize_class_pseudo_word([], params, vocab, Template.slot_only())
