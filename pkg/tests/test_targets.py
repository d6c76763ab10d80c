import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import random_multilabel_layout, target_by_pairs
from semisupcon.errors import StructuralError
from semisupcon.targets import (
    BatchLayout,
    TargetMatrix,
    build_self_supervised_targets,
    build_supervised_targets,
    build_targets,
    combine_targets,
    compute_semantic_weights,
    sparsity,
)


def layout(n_origins, views, labels=None):
    return BatchLayout.from_origins(n_origins, views, labels)


def pairs(target):
    return {(int(i), int(j)) for i, j in zip(*np.nonzero(target.entries))}


@st.composite
def layouts(draw):
    n = draw(st.integers(1, 6))
    m = draw(st.integers(2, 4))
    labels = draw(st.lists(
        st.one_of(st.none(), st.frozensets(st.sampled_from("abcdefg"), min_size=1, max_size=5)),
        min_size=n, max_size=n))
    return layout(n, m, labels)


class TestLayout:
    def test_non_uniform_views_rejected(self):
        with pytest.raises(StructuralError):
            BatchLayout([0, 0, 1], [False, False], (None, None))

    def test_single_view_rejected(self):
        with pytest.raises(StructuralError):
            BatchLayout([0, 1], [False, False], (None, None))

    def test_mask_must_match_labels(self):
        with pytest.raises(StructuralError):
            BatchLayout([0, 0], [True], (None,))
        with pytest.raises(StructuralError):
            BatchLayout([0, 0], [True], (frozenset(),))


class TestSelfSupervised:
    def test_two_origins_two_views(self):
        t = build_self_supervised_targets(layout(2, 2))
        assert pairs(t) == {(0, 1), (1, 0), (2, 3), (3, 2)}
        assert t.mode == "binary"

    def test_one_origin_four_views(self):
        t = build_self_supervised_targets(layout(1, 4))
        assert np.array_equal(t.entries, 1 - np.eye(4))

    def test_eight_views_each_row_has_seven_positives(self):
        t = build_self_supervised_targets(layout(24, 8))
        assert t.size == 192
        assert np.all(t.entries.sum(axis=1) == 7)


class TestSupervised:
    tags = [frozenset({"rock", "guitar"}), frozenset({"rock", "drums"})]

    def test_shared_tag_is_positive_at_c1(self):
        t = build_supervised_targets(layout(2, 2, self.tags), criterion=1)
        assert t.entries[0, 2] == 1 and t.entries[1, 3] == 1

    def test_shared_tag_is_negative_at_c2(self):
        t = build_supervised_targets(layout(2, 2, self.tags), criterion=2)
        assert t.entries[0, 2] == 0
        # siblings of a labeled origin stay positive whatever the criterion
        assert t.entries[0, 1] == 1

    def test_labeled_and_unlabeled_never_pair(self):
        t = build_supervised_targets(layout(2, 2, [self.tags[0], None]))
        assert np.all(t.entries[:, 2:] == 0) and np.all(t.entries[2:, :] == 0)

    def test_no_labels_gives_zero_matrix(self):
        t = build_supervised_targets(layout(3, 2))
        assert not t.entries.any()

    def test_criterion_must_be_positive(self):
        with pytest.raises(ValueError):
            build_supervised_targets(layout(2, 2, self.tags), criterion=0)


class TestSemanticWeights:
    def test_half_weight(self):
        lab = [frozenset({"a", "b", "c"}), frozenset({"a"})]
        w = compute_semantic_weights(layout(2, 2, lab))
        assert w.entries[0, 2] == pytest.approx(0.5)
        assert w.mode == "weighted"

    def test_identical_and_disjoint(self):
        lab = [frozenset({"a", "b"}), frozenset({"a", "b"}), frozenset({"c"})]
        w = compute_semantic_weights(layout(3, 2, lab)).entries
        assert w[0, 2] == 1.0
        assert w[0, 4] == 0.0

    def test_unlabeled_rows_only_siblings(self):
        lab = [frozenset({"a"}), None]
        w = compute_semantic_weights(layout(2, 2, lab)).entries
        assert np.array_equal(w[2], [0, 0, 0, 1])


class TestCombine:
    def test_all_unlabeled_equals_ssl(self):
        lay = layout(4, 2)
        ssl = build_self_supervised_targets(lay)
        assert np.array_equal(combine_targets(ssl, build_supervised_targets(lay)).entries, ssl.entries)

    def test_fully_labeled_single_class(self):
        lay = layout(3, 2, [frozenset({"x"})] * 3)
        t = build_targets(lay)
        assert np.array_equal(t.entries, 1 - np.eye(6))

    def test_mode_promotion(self):
        lay = layout(2, 2, [frozenset({"x"}), None])
        t = combine_targets(build_self_supervised_targets(lay), compute_semantic_weights(lay))
        assert t.mode == "weighted"

    def test_dimension_mismatch(self):
        with pytest.raises(StructuralError):
            combine_targets(build_self_supervised_targets(layout(2, 2)),
                            build_self_supervised_targets(layout(3, 2)))

    def test_mixed_batches_match_pairwise_membership(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            n, m, labels = random_multilabel_layout(rng)
            lay = layout(n, m, labels)
            for c in (1, 2, 4, 6):
                expected = target_by_pairs(lay.origin_of, labels, criterion=c)
                assert np.array_equal(build_targets(lay, "binary", c).entries, expected)
            expected = target_by_pairs(lay.origin_of, labels, weighted=True)
            np.testing.assert_allclose(build_targets(lay, "weighted").entries, expected, rtol=0, atol=1e-15)


class TestSparsity:
    def test_pure_ssl_two_views(self):
        lay = layout(5, 2)
        rep = sparsity(build_self_supervised_targets(lay), lay)
        assert rep.mean_positives_per_anchor == 1.0
        assert rep.s_sl is None and rep.mean_supervised_positives is None

    def test_fully_positive(self):
        lay = layout(2, 2, [frozenset({"a"})] * 2)
        rep = sparsity(build_targets(lay), lay)
        assert rep.s_smssl == 1.0 and rep.s_sl == 1.0

    def test_counts_match_scan(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            n, m, labels = random_multilabel_layout(rng)
            lay = layout(n, m, labels)
            t = build_targets(lay, "binary", 1)
            rep = sparsity(t, lay)
            v = lay.total_views
            count = sum(1 for i in range(v) for j in range(v) if t.entries[i, j] != 0)
            assert rep.s_smssl == count / (v * (v - 1))
            lab = [i for i in range(v) if labels[lay.origin_of[i]] is not None]
            if len(lab) == 0:
                assert rep.s_sl is None
            else:
                sub = sum(1 for i in lab for j in lab if t.entries[i, j] != 0)
                assert rep.s_sl == sub / (len(lab) * (len(lab) - 1))


@settings(max_examples=60, deadline=None)
@given(layouts(), st.integers(1, 5))
def test_built_targets_are_symmetric_and_monotone_in_criterion(lay, c):
    a = build_targets(lay, "binary", c).entries
    b = build_targets(lay, "binary", c + 1).entries
    assert np.array_equal(a, a.T)
    assert np.all(b <= a)
    w = build_targets(lay, "weighted").entries
    assert np.array_equal(w, w.T) and w.min() >= 0 and w.max() <= 1


@settings(max_examples=60, deadline=None)
@given(layouts(), st.randoms(use_true_random=False))
def test_permutation_equivariance(lay, rnd):
    perm = list(range(lay.total_views))
    rnd.shuffle(perm)
    perm = np.array(perm)
    for strategy in ("binary", "weighted"):
        full = build_targets(lay, strategy)
        permuted = build_targets(lay.permuted(perm), strategy)
        assert np.array_equal(permuted.entries, full.permuted(perm).entries)


@settings(max_examples=60, deadline=None)
@given(layouts())
def test_alpha_is_one_iff_identical_and_zero_iff_disjoint(lay):
    w = compute_semantic_weights(lay).entries
    for i in range(lay.total_views):
        for j in range(lay.total_views):
            oi, oj = lay.origin_of[i], lay.origin_of[j]
            li, lj = lay.label_of[oi], lay.label_of[oj]
            if i == j or oi == oj or li is None or lj is None:
                continue
            assert (w[i, j] == 1.0) == (li == lj)
            assert (w[i, j] == 0.0) == (not (li & lj))


def test_target_matrix_validation():
    with pytest.raises(StructuralError):
        TargetMatrix(np.array([[0, 1], [0, 0]]))
    with pytest.raises(StructuralError):
        TargetMatrix(np.eye(2))
    with pytest.raises(StructuralError):
        TargetMatrix(np.array([[0, 0.5], [0.5, 0]]), "binary")
