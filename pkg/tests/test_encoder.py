import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gtma.encoder import (
    MODES,
    AttentionParams,
    Template,
    TextEncoderParams,
    VisualAnchor,
    VocabularyTable,
    alignment_gradient,
    alignment_score,
    attention_weights,
    encode_text,
    global_context,
    raw_anchor,
    refine_anchor,
    slot_embedding_for,
)
from gtma.gradcheck import random_configuration, relative_error
from gtma.numeric import (
    DimMismatchError,
    ZeroVectorError,
    cosine_sim,
    finite_diff_gradient,
    l2_normalize,
    make_rng,
)


@pytest.fixture
def photo_vocab():
    rng = make_rng(3)
    names = ["a", "photo", "of", "dog", "cat"]
    return VocabularyTable(rng.standard_normal((5, 8)), names)


def make_params(mode, d_e, d_tok, seed=0):
    if mode == "mean_pool_identity":
        return TextEncoderParams.identity(d_tok)
    if mode == "mean_pool_projected":
        return TextEncoderParams.projected(d_e, d_tok, seed)
    return TextEncoderParams.mlp(d_e, d_tok, seed)


class TestTypes:
    def test_vocab_validation(self):
        with pytest.raises(ValueError):
            VocabularyTable(np.ones((1, 3)), ["x"])
        with pytest.raises(ValueError):
            VocabularyTable(np.ones((2, 3)), ["x", "x"])
        with pytest.raises(DimMismatchError):
            VocabularyTable(np.ones((2, 3)), ["x"])

    def test_vocab_is_read_only(self, photo_vocab):
        with pytest.raises(ValueError):
            photo_vocab.embeddings[0, 0] = 1.0

    def test_template_from_words(self, photo_vocab):
        t = Template.from_words(["a", "photo", "of", "a", "[z]"], photo_vocab)
        assert t.token_ids[:4] == (0, 1, 2, 0)
        assert t.slot_position == 4
        assert len(t) == 5
        assert t.words(photo_vocab) == ["a", "photo", "of", "a", "[z]"]

    @pytest.mark.parametrize("words", [["a", "photo"], ["[z]", "[z]"]])
    def test_template_needs_one_slot(self, photo_vocab, words):
        with pytest.raises(ValueError):
            Template.from_words(words, photo_vocab)

    def test_template_id_out_of_range(self, photo_vocab):
        with pytest.raises(ValueError):
            Template((0, 9, -1), 2).validate(photo_vocab)

    def test_identity_mode_requires_identity(self):
        with pytest.raises(ValueError):
            TextEncoderParams(2 * np.eye(3), "mean_pool_identity")
        with pytest.raises(ValueError):
            TextEncoderParams(np.eye(3), "transformer")

    def test_mlp_requires_hidden(self):
        with pytest.raises(ValueError):
            TextEncoderParams(np.eye(3), "one_hidden_mlp")

    def test_anchor_requires_unit_norm(self):
        with pytest.raises(ValueError):
            VisualAnchor(np.array([1.0, 1.0]))

    @pytest.mark.parametrize("mode", MODES)
    def test_params_round_trip(self, mode):
        p = make_params(mode, 4, 6 if mode != "mean_pool_identity" else 4)
        q = TextEncoderParams.from_dict(p.to_dict())
        assert q.mode == p.mode
        np.testing.assert_array_equal(q.projection, p.projection)


class TestEncodeText:
    def test_slot_only_identity_is_normalized_z(self, photo_vocab):
        z = np.arange(1.0, 9.0)
        out = encode_text(TextEncoderParams.identity(8), photo_vocab, Template.slot_only(), z)
        np.testing.assert_allclose(out, z / np.linalg.norm(z), atol=1e-15)

    def test_solved_slot_reproduces_target(self, photo_vocab):
        # mean pool over 5 tokens: z = 5 p - (a + photo + of + a)
        t = Template.from_words(["a", "photo", "of", "a", "[z]"], photo_vocab)
        p = make_rng(9).standard_normal(8)
        e = photo_vocab.embeddings
        z = 5 * p - (2 * e[0] + e[1] + e[2])
        out = encode_text(TextEncoderParams.identity(8), photo_vocab, t, z)
        np.testing.assert_allclose(out, p / np.linalg.norm(p), atol=1e-12)
        np.testing.assert_allclose(slot_embedding_for(p, TextEncoderParams.identity(8), photo_vocab, t),
                                   z, atol=1e-12)

    @pytest.mark.parametrize("mode", ["mean_pool_projected", "one_hidden_mlp"])
    def test_solved_slot_other_heads(self, mode):
        rng = make_rng(5)
        vocab = VocabularyTable(rng.standard_normal((4, 10)), list("abcd"))
        params = make_params(mode, 6, 10, seed=1)
        t = Template((0, 1, -1), 2)
        target = rng.standard_normal(6)
        z = slot_embedding_for(target, params, vocab, t)
        np.testing.assert_allclose(encode_text(params, vocab, t, z), target / np.linalg.norm(target),
                                   atol=1e-10)

    @settings(max_examples=60)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(MODES))
    def test_output_unit_norm(self, seed, mode):
        params, vocab, t, _, z = random_configuration(mode, 5, seed)
        assert abs(np.linalg.norm(encode_text(params, vocab, t, z)) - 1.0) < 1e-10

    @given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
    def test_slot_only_scale_invariance(self, seed, s):
        z = make_rng(seed).standard_normal(6)
        vocab = VocabularyTable(np.eye(6)[:2], ["x", "y"])
        p = TextEncoderParams.identity(6)
        np.testing.assert_allclose(encode_text(p, vocab, Template.slot_only(), s * z),
                                   encode_text(p, vocab, Template.slot_only(), z), atol=1e-10)

    def test_dim_mismatch(self, photo_vocab):
        with pytest.raises(DimMismatchError):
            encode_text(TextEncoderParams.identity(8), photo_vocab, Template.slot_only(), np.ones(3))

    def test_zero_output_raises(self, photo_vocab):
        with pytest.raises(ZeroVectorError):
            encode_text(TextEncoderParams.identity(8), photo_vocab, Template.slot_only(), np.zeros(8))


class TestAlignment:
    def test_perfect_and_antipodal(self, photo_vocab):
        p = TextEncoderParams.identity(8)
        c = l2_normalize(np.arange(1.0, 9.0))
        slot = Template.slot_only()
        assert alignment_score(c, p, photo_vocab, slot, 3 * c) == pytest.approx(1.0, abs=1e-15)
        assert alignment_score(c, p, photo_vocab, slot, -2 * c) == pytest.approx(-1.0, abs=1e-15)

    def test_composition_oracle(self):
        rng = make_rng(42)
        vocab = VocabularyTable(rng.standard_normal((6, 8)), [f"w{i}" for i in range(6)])
        t = Template((1, 4, -1, 2), 2)
        c = l2_normalize(rng.standard_normal(8))
        z = rng.standard_normal(8)
        p = TextEncoderParams.identity(8)
        assert alignment_score(VisualAnchor(c), p, vocab, t, z) == cosine_sim(c, encode_text(p, vocab, t, z))

    def test_gradient_vanishes_at_optimum(self, photo_vocab):
        c = l2_normalize(np.arange(1.0, 9.0))
        g = alignment_gradient(c, TextEncoderParams.identity(8), photo_vocab, Template.slot_only(), 2 * c)
        assert np.linalg.norm(g) < 1e-8

    @pytest.mark.parametrize("mode", MODES)
    def test_gradient_matches_finite_differences(self, mode):
        worst = 0.0
        for seed in range(40):
            params, vocab, t, c, z = random_configuration(mode, 6, seed)
            g = alignment_gradient(c, params, vocab, t, z)
            fd = finite_diff_gradient(lambda v: alignment_score(c, params, vocab, t, v), z)
            worst = max(worst, relative_error(g, fd))
        assert worst < 1e-5

    def test_radial_derivative(self):
        # d/ds S(s z) at s = 1 equals g . z
        for seed in range(10):
            params, vocab, t, c, z = random_configuration("mean_pool_identity", 8, seed)
            g = alignment_gradient(c, params, vocab, t, z)
            h = 1e-6
            radial = (alignment_score(c, params, vocab, t, (1 + h) * z)
                      - alignment_score(c, params, vocab, t, (1 - h) * z)) / (2 * h)
            assert g @ z == pytest.approx(radial, abs=1e-8)

    def test_radial_derivative_zero_for_slot_only(self):
        rng = make_rng(0)
        z, c = rng.standard_normal(8), l2_normalize(rng.standard_normal(8))
        vocab = VocabularyTable(np.eye(8)[:2], ["x", "y"])
        g = alignment_gradient(c, TextEncoderParams.identity(8), vocab, Template.slot_only(), z)
        assert abs(g @ z) < 1e-12


class TestAnchors:
    def test_global_context(self):
        np.testing.assert_array_equal(global_context([[1.0, 2.0]]), [1.0, 2.0])
        p = np.array([0.3, -1.2])
        np.testing.assert_array_equal(global_context([p, -p]), [0.0, 0.0])
        f = make_rng(1).standard_normal((3, 4))
        np.testing.assert_allclose(global_context(f), (f[0] + f[1] + f[2]) / 3, atol=1e-15)

    def test_refine_single_patch(self):
        attn = AttentionParams.random(3, 3, 0)
        out = refine_anchor([[3.0, 0.0, 4.0]], attn)
        np.testing.assert_allclose(out.c_v, [0.6, 0.0, 0.8], atol=1e-15)
        assert out.purified

    def test_refine_identical_patches(self):
        p = np.array([1.0, -2.0, 2.0])
        out = refine_anchor(np.tile(p, (5, 1)), AttentionParams.random(2, 3, 4, shared=False))
        np.testing.assert_allclose(out.c_v, p / 3.0, atol=1e-15)

    def test_refine_hand_example(self):
        # f1 = (1, 0), f2 = (0.5, 1), W_q = W_k = I; weights from math.exp
        out = refine_anchor([[1.0, 0.0], [0.5, 1.0]], AttentionParams.identity(2))
        np.testing.assert_allclose(out.c_v, [0.8167257401388696, 0.5770260526134116], atol=1e-12)

    def test_raw_anchor(self):
        out = raw_anchor([[0.0, 2.0]])
        np.testing.assert_array_equal(out.c_v, [0.0, 1.0])
        assert not out.purified
        f = make_rng(11).standard_normal((5, 4))
        np.testing.assert_allclose(raw_anchor(f).c_v, l2_normalize(f.sum(axis=0) / 5), atol=1e-15)

    def test_raw_equals_refined_for_identical_patches(self):
        f = np.tile([0.2, 0.1, -0.4], (4, 1))
        np.testing.assert_allclose(raw_anchor(f).c_v, refine_anchor(f, AttentionParams.identity(3)).c_v,
                                   atol=1e-15)

    def test_zero_anchor_raises(self):
        with pytest.raises(ZeroVectorError):
            raw_anchor([[1.0, 0.0], [-1.0, 0.0]])

    @settings(max_examples=50)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 8))
    def test_refine_convex_hull_and_permutation(self, seed, m):
        rng = make_rng(seed)
        f = rng.standard_normal((m, 4)) + 2.0
        attn = AttentionParams.random(3, 4, rng, shared=False)
        pooled = attention_weights(f, attn) @ f
        assert np.all(pooled >= f.min(axis=0) - 1e-12)
        assert np.all(pooled <= f.max(axis=0) + 1e-12)
        perm = rng.permutation(m)
        np.testing.assert_allclose(refine_anchor(f[perm], attn).c_v, refine_anchor(f, attn).c_v, atol=1e-12)
