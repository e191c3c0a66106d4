import math

import numpy as np
import pytest
import torch

from indivaid.losses import (
    cosine_sim,
    i2t_loss,
    i2tce_loss,
    identity_loss,
    similarity_matrix,
    smoothed_targets,
    stage1_loss,
    stage2_loss,
    t2i_loss,
    triplet_loss,
)


def _t(data):
    return torch.tensor(data, dtype=torch.float64)


class TestCosine:
    def test_identical_unit_vectors(self):
        assert float(cosine_sim(_t([1.0, 0.0]), _t([1.0, 0.0]))) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        assert float(cosine_sim(_t([1.0, 0.0]), _t([0.0, 1.0]))) == pytest.approx(0.0, abs=1e-12)

    def test_forty_five_degrees(self):
        # Oracle: 1 / sqrt(2).
        expected = 1.0 / math.sqrt(2.0)
        assert float(cosine_sim(_t([1.0, 0.0]), _t([1.0, 1.0]))) == pytest.approx(expected, abs=1e-12)

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError, match="zero-norm"):
            cosine_sim(_t([0.0, 0.0]), _t([1.0, 0.0]))


class TestContrastive:
    def test_singleton_batch_is_exactly_zero(self):
        S = _t([[2.7]])
        assert float(i2t_loss(S)) == 0.0
        assert float(t2i_loss(S)) == 0.0
        assert float(stage1_loss(S)) == 0.0

    def test_identity_similarity_matrix(self):
        # Oracle: -log(e / (e + 1)).
        expected = -math.log(math.e / (math.e + 1.0))
        S = _t([[1.0, 0.0], [0.0, 1.0]])
        assert float(i2t_loss(S)) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.31326, abs=5e-6)

    def test_t2i_scaled_diagonal(self):
        # Oracle: -log(e^2 / (e^2 + 1)).
        expected = -math.log(math.e**2 / (math.e**2 + 1.0))
        S = _t([[2.0, 0.0], [0.0, 2.0]])
        assert float(t2i_loss(S)) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.12693, abs=5e-6)

    def test_constant_matrix_gives_log_b(self):
        for b in (2, 3, 5, 8):
            S = torch.full((b, b), 0.37, dtype=torch.float64)
            assert float(i2t_loss(S)) == pytest.approx(math.log(b), abs=1e-9)
            assert float(t2i_loss(S)) == pytest.approx(math.log(b), abs=1e-9)

    def test_symmetric_matrix_makes_directions_agree(self):
        g = torch.Generator().manual_seed(0)
        S = torch.randn(4, 4, generator=g, dtype=torch.float64)
        S = (S + S.T) / 2
        assert float(i2t_loss(S)) == pytest.approx(float(t2i_loss(S)), abs=1e-12)
        assert float(stage1_loss(S)) == pytest.approx(2 * float(i2t_loss(S)), abs=1e-12)

    def test_stage1_sum_of_directions(self):
        expected = -math.log(math.e / (math.e + 1.0)) * 2
        S = _t([[1.0, 0.0], [0.0, 1.0]])
        assert float(stage1_loss(S)) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.62652, abs=1e-5)

    def test_non_square_rejected(self):
        with pytest.raises(ValueError, match="square"):
            i2t_loss(torch.zeros(2, 3, dtype=torch.float64))

    def test_joint_permutation_invariance(self):
        g = torch.Generator().manual_seed(1)
        S = torch.randn(5, 5, generator=g, dtype=torch.float64)
        for seed in range(10):
            perm = torch.randperm(5, generator=torch.Generator().manual_seed(seed))
            P = S[perm][:, perm]
            assert float(i2t_loss(P)) == pytest.approx(float(i2t_loss(S)), abs=1e-12)
            assert float(t2i_loss(P)) == pytest.approx(float(t2i_loss(S)), abs=1e-12)


class TestSmoothedTargets:
    def test_no_smoothing_is_one_hot(self):
        st = smoothed_targets(2, 5, 0.0)
        assert torch.equal(st.q, _t([0.0, 0.0, 1.0, 0.0, 0.0]))

    def test_direct_substitution(self):
        st = smoothed_targets(3, 10, 0.1)
        assert float(st.q[3]) == pytest.approx(0.91, abs=1e-12)
        others = torch.cat([st.q[:3], st.q[4:]])
        assert torch.allclose(others, torch.full((9,), 0.01, dtype=torch.float64), atol=1e-12)

    def test_sums_to_one_across_grid(self):
        for n in range(1, 51):
            for eps in (0.0, 0.1, 0.3):
                for y in (0, n - 1):
                    st = smoothed_targets(y, n, eps)
                    assert abs(float(st.q.sum()) - 1.0) <= 1e-12
                    assert float(st.q[y]) == (1.0 - eps) + eps / n

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            smoothed_targets(5, 5, 0.1)
        with pytest.raises(ValueError):
            smoothed_targets(0, 5, 1.0)


class TestIdentityLoss:
    def test_uniform_logits_two_classes(self):
        assert float(identity_loss(_t([0.0, 0.0]), 0, epsilon=0.0)) == pytest.approx(
            -math.log(0.5), abs=1e-12
        )

    def test_epsilon_zero_reduces_to_cross_entropy(self):
        g = torch.Generator().manual_seed(2)
        logits = torch.randn(6, generator=g, dtype=torch.float64)
        y = 4
        # Oracle: -log softmax_y computed with plain numpy.
        arr = logits.numpy()
        expected = -(arr[y] - np.log(np.exp(arr - arr.max()).sum()) - arr.max())
        assert float(identity_loss(logits, y, epsilon=0.0)) == pytest.approx(expected, abs=1e-12)

    def test_smoothed_worked_value(self):
        # Oracle: softmax of (1,0,0) then sum of -q_k log p_k with eps = 0.1,
        # q mixing the one-hot with the uniform 1/N.
        z = np.array([1.0, 0.0, 0.0])
        p = np.exp(z) / np.exp(z).sum()
        q = np.full(3, 0.1 / 3)
        q[0] += 0.9
        expected = float(-(q * np.log(p)).sum())
        assert expected == pytest.approx(0.618111, abs=5e-6)
        assert float(identity_loss(_t([1.0, 0.0, 0.0]), 0, epsilon=0.1)) == pytest.approx(
            expected, abs=1e-12
        )

    def test_batch_is_mean_of_rows(self):
        logits = _t([[1.0, 0.0], [0.0, 2.0]])
        rows = [
            float(identity_loss(logits[0], 0, epsilon=0.1)),
            float(identity_loss(logits[1], 1, epsilon=0.1)),
        ]
        batched = float(identity_loss(logits, [0, 1], epsilon=0.1))
        assert batched == pytest.approx(sum(rows) / 2, abs=1e-12)

    def test_gibbs_lower_bound(self):
        # Loss >= entropy of the target distribution.
        g = torch.Generator().manual_seed(3)
        for trial in range(50):
            n = int(torch.randint(2, 8, (1,), generator=g))
            logits = 3 * torch.randn(n, generator=g, dtype=torch.float64)
            y = int(torch.randint(0, n, (1,), generator=g))
            eps = [0.0, 0.1, 0.3][trial % 3]
            q = smoothed_targets(y, n, eps).q
            entropy = float(-(q[q > 0] * torch.log(q[q > 0])).sum())
            assert float(identity_loss(logits, y, eps)) >= entropy - 1e-9

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            identity_loss(_t([float("inf"), 0.0]), 0)


def rectangle_batch(d_p, d_n):
    """Four points, two per label, where every anchor sees exactly (d_p, d_n)."""
    feats = _t(
        [[0.0, 0.0], [d_p, 0.0], [0.0, d_n], [d_p, d_n]]
    )
    labels = _t([0, 0, 1, 1]).long()
    return feats, labels


class TestTripletLoss:
    def test_worked_value(self):
        feats, labels = rectangle_batch(0.5, 0.8)
        assert float(triplet_loss(feats, labels, margin=0.4)) == pytest.approx(0.1, abs=1e-12)

    def test_magnitude_insensitivity(self):
        feats, labels = rectangle_batch(1.5, 1.8)
        assert float(triplet_loss(feats, labels, margin=0.4)) == pytest.approx(0.1, abs=1e-12)

    def test_clamped_at_zero(self):
        feats, labels = rectangle_batch(0.1, 1.0)
        assert float(triplet_loss(feats, labels, margin=0.3)) == 0.0

    def test_translation_invariance(self):
        g = torch.Generator().manual_seed(4)
        feats = torch.randn(8, 5, generator=g, dtype=torch.float64)
        labels = torch.tensor([0, 0, 1, 1, 2, 2, 3, 3])
        base = float(triplet_loss(feats, labels, 0.3))
        offset = torch.randn(5, generator=g, dtype=torch.float64)
        shifted = float(triplet_loss(feats + offset, labels, 0.3))
        assert shifted == pytest.approx(base, abs=1e-9)

    def test_batch_without_positive_rejected(self):
        feats = torch.randn(3, 4, dtype=torch.float64)
        with pytest.raises(ValueError, match="same-label"):
            triplet_loss(feats, [0, 1, 2], 0.3)

    def test_batch_without_negative_rejected(self):
        feats = torch.randn(4, 4, dtype=torch.float64)
        with pytest.raises(ValueError, match="different-label"):
            triplet_loss(feats, [0, 0, 0, 0], 0.3)


class TestI2tce:
    def test_aligned_and_orthogonal(self):
        expected = -math.log(math.e / (math.e + 1.0))
        V = _t([1.0, 0.0])
        T = _t([[1.0, 0.0], [0.0, 1.0]])
        got = i2tce_loss(V, T, 0, epsilon=0.0, temperature=1.0)
        assert float(got) == pytest.approx(expected, abs=1e-12)

    def test_identical_descriptions_give_log_n(self):
        g = torch.Generator().manual_seed(5)
        V = torch.randn(3, 6, generator=g, dtype=torch.float64)
        T = torch.ones(4, 6, dtype=torch.float64)
        for eps in (0.0, 0.1):
            got = i2tce_loss(V, T, [0, 1, 3], epsilon=eps, temperature=7.3)
            assert float(got) == pytest.approx(math.log(4), abs=1e-9)

    def test_epsilon_zero_is_cross_entropy_over_similarity_logits(self):
        g = torch.Generator().manual_seed(6)
        V = torch.randn(4, generator=g, dtype=torch.float64)
        T = torch.randn(3, 4, generator=g, dtype=torch.float64)
        logits = similarity_matrix(V.unsqueeze(0), T, 2.0)[0]
        expected = float(identity_loss(logits, 1, epsilon=0.0))
        got = float(i2tce_loss(V, T, 1, epsilon=0.0, temperature=2.0))
        assert got == pytest.approx(expected, abs=1e-12)

    def test_wrong_identity_count_rejected(self):
        V = _t([1.0, 0.0])
        T = torch.eye(2, dtype=torch.float64)
        with pytest.raises(ValueError, match="per identity"):
            i2tce_loss(V, T, 0, num_identities=3)


class TestStage2Loss:
    def _inputs(self, seed=7):
        g = torch.Generator().manual_seed(seed)
        feats = torch.randn(4, 6, generator=g, dtype=torch.float64)
        labels = torch.tensor([0, 0, 1, 1])
        merged = torch.randn(3, 6, generator=g, dtype=torch.float64)
        merged = merged / torch.linalg.vector_norm(merged, dim=1, keepdim=True)
        logits = torch.randn(4, 3, generator=g, dtype=torch.float64)
        return feats, labels, merged, logits

    def test_perfect_clustering_zeroes_triplet(self):
        feats = _t([[0.0, 0.0], [0.0, 0.0], [100.0, 0.0], [100.0, 0.0]])
        total, parts = stage2_loss(feats, [0, 0, 1, 1], flags={"tri"}, margin=0.3)
        assert float(total) == 0.0
        assert parts == {"tri": 0.0}

    def test_additivity_of_terms(self):
        feats, labels, merged, logits = self._inputs()
        total, parts = stage2_loss(
            feats, labels, merged, logits, temperature=3.0, margin=0.3, epsilon=0.1,
            flags={"id", "tri", "i2tce"},
        )
        separate = (
            float(identity_loss(logits, labels, 0.1))
            + float(triplet_loss(feats, labels, 0.3))
            + float(i2tce_loss(feats, merged, labels, 0.1, 3.0))
        )
        assert float(total) == pytest.approx(separate, abs=1e-12)
        assert set(parts) == {"id", "tri", "i2tce"}
        assert float(total) == pytest.approx(sum(parts.values()), abs=1e-12)

    def test_ablation_contrastive_flags_accepted(self):
        feats, labels, merged, _ = self._inputs()
        total, parts = stage2_loss(
            feats, labels, merged, temperature=5.0, flags={"i2t", "t2i"}
        )
        assert math.isfinite(float(total))
        assert set(parts) == {"i2t", "t2i"}

    def test_no_flags_rejected(self):
        feats, labels, merged, logits = self._inputs()
        with pytest.raises(ValueError, match="no loss terms"):
            stage2_loss(feats, labels, merged, logits, flags=set())

    def test_unknown_flag_rejected(self):
        feats, labels, merged, logits = self._inputs()
        with pytest.raises(ValueError, match="unknown"):
            stage2_loss(feats, labels, merged, logits, flags={"id", "center"})

    def test_missing_inputs_rejected(self):
        feats, labels, merged, logits = self._inputs()
        with pytest.raises(ValueError, match="classifier"):
            stage2_loss(feats, labels, merged, None, flags={"id"})
        with pytest.raises(ValueError, match="descriptions"):
            stage2_loss(feats, labels, None, logits, flags={"i2tce"})

    def test_all_terms_nonnegative(self):
        for seed in range(10):
            feats, labels, merged, logits = self._inputs(seed)
            total, parts = stage2_loss(
                feats, labels, merged, logits, temperature=4.0,
                flags={"id", "tri", "i2tce", "i2t", "t2i"},
            )
            assert all(v >= 0.0 for v in parts.values())
            assert float(total) >= 0.0
