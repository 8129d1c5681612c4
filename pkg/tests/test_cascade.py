import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from d2dpath import cascade
from d2dpath.cascade import DiffusionTree, Node
from d2dpath.errors import InputError, ParseError
from d2dpath.features import TransferRecord


def tr(s, r, ts, content="x", cat=1):
    return TransferRecord(s, r, content, cat, ts, 10.0, 20.0)


def test_simple_chain_and_fanout():
    trees = cascade.build_trees([tr("a", "b", 1), tr("b", "c", 2), tr("a", "d", 3)])
    assert len(trees) == 1
    t = trees[0]
    assert [n.user_id for n in t.nodes] == ["a", "b", "c", "d"]
    assert t.node(0).children == [1, 3] and t.node(1).children == [2]
    assert t.content_category == 1


def test_duplicate_receipt_keeps_first_parent():
    trees, report = cascade.build_trees_report([tr("a", "b", 1), tr("a", "c", 2), tr("c", "b", 3)])
    assert report.duplicate_receipts == 1
    assert trees[0].parents()[1] == 0


def test_self_transfer_makes_single_node_tree():
    trees, report = cascade.build_trees_report([tr("a", "a", 1, content="y")])
    assert report.self_transfers == 1
    assert len(trees) == 1 and len(trees[0]) == 1


def test_unseen_sender_roots_new_tree():
    trees = cascade.build_trees([tr("a", "b", 1, "x"), tr("z", "q", 2, "x")])
    assert len(trees) == 2


def test_record_order_is_by_timestamp():
    recs = [tr("b", "c", 2), tr("a", "b", 1)]
    assert cascade.build_trees(recs) == cascade.build_trees(sorted(recs, key=lambda r: r.ts))


def test_validate_catches_bad_structures():
    with pytest.raises(InputError, match="duplicate"):
        DiffusionTree(0, [Node(0), Node(0)]).validate()
    with pytest.raises(InputError, match="dangling"):
        DiffusionTree(0, [Node(0, children=[5])]).validate()
    with pytest.raises(InputError, match="multiple roots"):
        DiffusionTree(0, [Node(0), Node(1)]).validate()
    with pytest.raises(InputError, match="several parents"):
        DiffusionTree(0, [Node(0, children=[1, 2]), Node(1, children=[2]), Node(2)]).validate()
    with pytest.raises(InputError):
        DiffusionTree(0, [Node(0), Node(1, children=[2]), Node(2, children=[1])]).validate()


@settings(max_examples=50)
@given(st.integers(1, 15), st.integers(0, 10_000))
def test_serialize_round_trip(n, seed):
    t = cascade.random_tree(np.random.default_rng(seed), n, k=6)
    line = cascade.serialize_tree(t)
    assert cascade.parse_tree(line) == t


def test_parse_errors_carry_line_numbers(tmp_path):
    p = tmp_path / "t.jsonl"
    good = cascade.serialize_tree(cascade.path_tree([0, 1]))
    p.write_text(good + "\n" + '{"cat":0,"root":0,"nodes":[{"id":0,"children":[3]}]}\n')
    with pytest.raises(ParseError, match="line 2"):
        cascade.read_trees(p)
    p.write_text("not json\n")
    with pytest.raises(ParseError, match="line 1"):
        cascade.read_trees(p)


@pytest.mark.parametrize("name", ["t.jsonl", "t.jsonl.gz"])
def test_tree_file_io(tmp_path, name):
    rng = np.random.default_rng(1)
    trees = [cascade.random_tree(rng, 5, 3) for _ in range(4)]
    cascade.write_trees(tmp_path / name, trees)
    assert cascade.read_trees(tmp_path / name) == trees


def test_split_sizes_and_determinism():
    trees = [cascade.path_tree([i]) for i in range(10)]
    a = cascade.split(trees, seed=3)
    assert (len(a.train), len(a.val), len(a.test)) == (8, 1, 1)
    b = cascade.split(trees, seed=3)
    assert a.test == b.test
    ids = sorted(t.nodes[0].prototype_id for t in a.train + a.val + a.test)
    assert ids == list(range(10))


def test_split_rejects_bad_args():
    trees = [cascade.path_tree([0])] * 5
    with pytest.raises(InputError):
        cascade.split(trees[:2])
    with pytest.raises(InputError):
        cascade.split(trees, ratios=(0.5, 0.4, 0.2))


@given(st.integers(3, 200))
def test_split_largest_remainder_sums(n):
    s = cascade.split([cascade.path_tree([0])] * n, seed=0)
    assert len(s.train) + len(s.val) + len(s.test) == n
    assert abs(len(s.train) - 0.8 * n) < 1


def test_tree_helpers():
    t = cascade.path_tree([4, 5, 6])
    assert t.depths() == {0: 0, 1: 1, 2: 2}
    assert [n.node_id for n in t.leaves()] == [2]
    assert t.n_edges == 2 and len(t) == 3
