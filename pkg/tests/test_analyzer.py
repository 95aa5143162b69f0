import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import all_splits, entropy_of, interpret_rules
from immunids.analyzer import (ATTACK, NORMAL, AnalyzerConfig, DecisionTreeModel, FeedbackStore, RuleList,
                               analyzer_from_text, analyzer_to_text, entropy, evaluate, retrain_with_feedback,
                               train_analyzer, train_decision_tree, train_rule_list)
from immunids.errors import ParseError, ValidationError
from immunids.optimizer import fit_projection


def check_splits_against_oracle(tree: DecisionTreeModel, x, y, min_leaf=1):
    """Every internal node's split has the brute-force best gain and is the first such split."""
    x = np.asarray(x, dtype=float)
    y = list(y)
    checked = 0

    def walk(node, rows):
        nonlocal checked
        if node.is_leaf:
            return
        sub_x, sub_y = x[rows], [y[i] for i in rows]
        splits = all_splits(sub_x, sub_y, min_leaf)
        top = max(g for g, _, _ in splits)
        first = next((f, t) for g, f, t in splits if g >= top - 1e-12)
        assert (node.feature, node.threshold) == first
        mask = sub_x[:, node.feature] <= node.threshold
        left = [r for r, m in zip(rows, mask) if m]
        right = [r for r, m in zip(rows, mask) if not m]
        gain = entropy_of(sub_y) - (len(left) * entropy_of([y[i] for i in left])
                                    + len(right) * entropy_of([y[i] for i in right])) / len(rows)
        assert abs(gain - top) <= 1e-12
        checked += 1
        walk(node.left, left)
        walk(node.right, right)

    walk(tree.root, list(range(len(y))))
    return checked


def accuracy(model, x, y):
    return np.mean([model.predict(row) == lab for row, lab in zip(x, y)])


# ------------------------------------------------------------------- tree ---

def test_entropy_values():
    assert entropy([5, 5]) == 1.0
    assert entropy([4, 0]) == 0.0
    assert np.allclose(entropy([[1, 1], [3, 0]]), [1.0, 0.0])


def test_single_class_is_leaf():
    tree = train_decision_tree([[1], [2], [3]], ["a", "a", "a"])
    assert tree.root.is_leaf and tree.predict_proba([9]) == {"a": 1.0}


def test_hand_worked_split():
    x, y = [[1], [2], [3], [4]], ["A", "A", "B", "B"]
    tree = train_decision_tree(x, y)
    assert tree.depth() == 1
    assert tree.root.feature == 0 and tree.root.threshold == 2.5
    assert accuracy(tree, x, y) == 1.0
    gains = {t: g for g, _, t in all_splits(x, y)}
    assert gains[2.5] == 1.0 and all(g < 1.0 for t, g in gains.items() if t != 2.5)


def test_informative_feature_chosen_over_noise():
    rng = np.random.default_rng(0)
    y = [0] * 10 + [1] * 10
    x = np.column_stack([np.r_[rng.uniform(0, 1, 10), rng.uniform(2, 3, 10)], rng.uniform(0, 3, 20)])
    tree = train_decision_tree(x, y)
    assert tree.root.feature == 0
    g = {f: max(gg for gg, ff, _ in all_splits(x, y) if ff == f) for f in (0, 1)}
    assert g[0] > g[1]


def test_limits_respected():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(60, 3))
    y = rng.integers(0, 2, 60)
    assert train_decision_tree(x, y, max_depth=2).depth() <= 2
    tree = train_decision_tree(x, y, min_samples_leaf=7)
    assert all(sum(n.counts) >= 7 for n in tree.nodes() if n.is_leaf)


def test_tree_empty_data_error():
    with pytest.raises(ValidationError):
        train_decision_tree(np.zeros((0, 2)), [])


def test_tree_text_round_trip():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(40, 3))
    y = (x[:, 0] + x[:, 1] > 0).astype(int)
    tree = train_decision_tree(x, y)
    again = DecisionTreeModel.from_text(tree.to_text())
    assert again == tree
    assert all(again.predict(r) == tree.predict(r) for r in x)
    with pytest.raises(ParseError):
        DecisionTreeModel.from_text("tree v0\n")


def test_gain_ties_break_to_lower_feature_and_threshold():
    # both features separate perfectly; feature 0 must win
    x = [[0, 0], [1, 1], [5, 5], [6, 6]]
    tree = train_decision_tree(x, [0, 0, 1, 1])
    assert (tree.root.feature, tree.root.threshold) == (0, 3.0)
    # two equally good thresholds on one feature; the lower one wins
    tree = train_decision_tree([[0], [1], [2]], [0, 1, 0])
    assert tree.root.threshold == 0.5


consistent = st.integers(2, 20).flatmap(lambda n: st.tuples(
    st.lists(st.lists(st.integers(0, 4), min_size=2, max_size=2), min_size=n, max_size=n),
    st.lists(st.integers(0, 2), min_size=n, max_size=n)))


@settings(max_examples=200, deadline=None)
@given(consistent)
def test_property_splits_match_enumerator_and_fit_is_perfect(case):
    rows, labels = case
    first = {}
    for r, lab in zip(rows, labels):
        first.setdefault(tuple(r), lab)
    y = [first[tuple(r)] for r in rows]  # make the dataset consistent
    tree = train_decision_tree(rows, y)
    check_splits_against_oracle(tree, rows, y)
    assert accuracy(tree, rows, y) == 1.0
    for leaf in (n for n in tree.nodes() if n.is_leaf):
        assert sum(leaf.counts) > 0


# ------------------------------------------------------------------ rules ---

def test_all_normal_gives_empty_rule_list():
    rl = train_rule_list([[1], [2], [3]], [NORMAL] * 3, positive=ATTACK)
    assert rl.rules == [] and rl.default_class == NORMAL


def test_threshold_rule():
    x = [[1], [2], [3], [6], [7], [8]]
    y = [NORMAL, NORMAL, NORMAL, ATTACK, ATTACK, ATTACK]
    rl = train_rule_list(x, y, positive=ATTACK)
    assert len(rl.rules) == 1
    r = rl.rules[0]
    assert r.conditions == ((0, ">", 4.5),) and r.predicted == ATTACK
    assert r.coverage == 3 and r.accuracy == 1.0
    assert rl.default_class == NORMAL
    assert all(rl.predict(row) == lab for row, lab in zip(x, y))


def test_single_class_gives_no_rules():
    rl = train_rule_list([[1], [2], [3]], [ATTACK, ATTACK, ATTACK], positive=ATTACK)
    assert rl.rules == [] and rl.default_class == ATTACK


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_property_some_row_stays_uncovered(seed):
    # every condition excludes at least one row, so the default class always comes
    # from uncovered rows and the global-majority fallback is never needed
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 15))
    x = rng.integers(0, 4, size=(n, 2)).astype(float)
    y = rng.integers(0, 2, n)
    rl = train_rule_list(x, y, min_rule_accuracy=0.5, positive=ATTACK)
    uncovered = [lab for row, lab in zip(x, y) if rl.matching_rule(row) is None]
    assert uncovered
    assert rl.default_rate == pytest.approx(np.mean(uncovered), abs=1e-12)


def test_rule_list_minority_default():
    x = [[0], [1], [2], [3], [10]]
    y = ["n", "n", "n", "n", "a"]
    rl = train_rule_list(x, y)
    assert rl.positive == "a" and rl.rules[0].predicted == "a"


def test_rule_list_empty_data():
    with pytest.raises(ValidationError):
        train_rule_list(np.zeros((0, 1)), [])


def test_rule_list_text_round_trip():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(50, 2))
    y = ((x[:, 0] > 0.5) | (x[:, 1] < -1)).astype(int)
    rl = train_rule_list(x, y, positive=ATTACK)
    assert RuleList.from_text(rl.to_text()) == rl


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(5, 40))
def test_property_rule_list_matches_interpreter(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 6, size=(n, 3)).astype(float)
    y = rng.integers(0, 2, n)
    rl = train_rule_list(x, y, min_rule_accuracy=0.6, positive=ATTACK)
    plain = [(r.conditions, r.predicted) for r in rl.rules]
    for row in rng.integers(-1, 7, size=(30, 3)).astype(float):
        assert rl.predict(row) == interpret_rules(plain, rl.default_class, row)
    for r in rl.rules:
        assert r.accuracy >= 0.6


# -------------------------------------------------------------- analyzer ---

def separable_2d(n=40, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal([0, 0], 0.3, size=(n, 2))
    b = rng.normal([3, 3], 0.3, size=(n, 2))
    return np.vstack([a, b]), np.r_[np.zeros(n, int), np.ones(n, int)]


def test_p_one_global_arity():
    dims, g = train_analyzer([[1], [2], [8], [9]], [0, 0, 1, 1])
    assert len(dims) == 1 and g.p == 1 and g.model.n_features == 1


def test_separable_end_to_end_accuracy():
    x, y = separable_2d()
    # brute-force classifier oracle: the line x0 + x1 = 3 separates the toy set
    assert all((row.sum() > 3) == bool(lab) for row, lab in zip(x, y))
    for kind in ("tree", "rules"):
        dims, g = train_analyzer(x, y, AnalyzerConfig(model_kind=kind))
        preds = [evaluate(dims, g, row) >= 0.5 for row in x]
        assert np.mean(np.array(preds) == y.astype(bool)) == 1.0


def test_label_constant_global_leaf():
    dims, g = train_analyzer([[1.0], [2.0], [3.0]], [0, 0, 0])
    assert g.model.root.is_leaf


def test_evaluate_pure_leaves_and_arity():
    x, y = separable_2d()
    dims, g = train_analyzer(x, y)
    assert evaluate(dims, g, x[-1]) == 1.0
    assert evaluate(dims, g, x[0]) == 0.0
    with pytest.raises(ValidationError):
        evaluate(dims, g, [1.0, 2.0, 3.0])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_property_evaluate_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(30, 3))
    y = rng.integers(0, 2, 30)
    dims, g = train_analyzer(x, y, AnalyzerConfig(model_kind=["tree", "rules"][seed % 2]))
    for row in rng.normal(scale=5, size=(20, 3)):
        assert 0.0 <= evaluate(dims, g, row) <= 1.0


def test_threads_do_not_change_models():
    x, y = separable_2d(seed=4)
    a = analyzer_to_text(*train_analyzer(x, y, AnalyzerConfig(threads=1)))
    b = analyzer_to_text(*train_analyzer(x, y, AnalyzerConfig(threads=4)))
    assert a == b


def test_analyzer_text_round_trip():
    x, y = separable_2d(seed=5)
    for kind in ("tree", "rules"):
        dims, g = train_analyzer(x, y, AnalyzerConfig(model_kind=kind))
        text = analyzer_to_text(dims, g)
        assert analyzer_to_text(*analyzer_from_text(text)) == text


# --------------------------------------------------------------- feedback ---

def test_retrain_with_no_rows_is_fixed_point():
    x, y = separable_2d(seed=6)
    proj = fit_projection(x, p=2)
    store = FeedbackStore(1000)
    first = analyzer_to_text(*retrain_with_feedback(store, x, y, proj))
    second = analyzer_to_text(*retrain_with_feedback(store, [], [], proj))
    assert first == second


def test_first_attack_rows_are_learned():
    rng = np.random.default_rng(7)
    normals = rng.normal(0, 1, size=(30, 2))
    proj = fit_projection(normals, p=2)
    store = FeedbackStore(1000)
    dims, g = retrain_with_feedback(store, normals, [0] * 30, proj)
    attacks = np.array([[8.0, 8.0], [9.0, 7.5]])
    dims, g = retrain_with_feedback(store, attacks, [1, 1], proj)
    for row in attacks:
        assert evaluate(dims, g, proj.components @ (row - proj.mean)) >= 0.5


def test_store_fifo_bound():
    store = FeedbackStore(5)
    store.extend([[i] for i in range(4)], [0] * 4)
    store.extend([[i] for i in range(4, 8)], [1] * 4)
    assert len(store) == 5
    assert [r[0][0] for r in store.rows] == [3.0, 4.0, 5.0, 6.0, 7.0]
    again = FeedbackStore.from_text(store.to_text())
    assert again.rows == store.rows and again.capacity == 5


def test_xor_is_fit_through_zero_gain_root():
    x = [[1, 1], [2, 0], [2, 1], [1, 0]]
    y = [0, 0, 1, 1]
    tree = train_decision_tree(x, y)
    assert (tree.root.feature, tree.root.threshold) == (0, 1.5)
    assert accuracy(tree, x, y) == 1.0
