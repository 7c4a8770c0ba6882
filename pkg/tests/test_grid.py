import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hdsse.fixtures import build_feeder60, chain_feeder, small_hierarchy
from hdsse.grid import (Branch, FeederParseError, FeederValidationError, Node, Role, bundled_feeder_path,
                        format_feeder, load_feeder, make_feeder, parse_feeder)

MINIMAL = """
[base]
s_base_va = 100000
v_base_primary_v = 13800
v_base_secondary_v = 240

[nodes]
0 substation a
1 primary_junction a

[branches]
0 0 1 0.01 0.02
"""


def star(n_leaves=3):
    nodes = [Node(0, Role.SUBSTATION), Node(1, Role.PRIMARY_JUNCTION)]
    nodes += [Node(i, Role.PRIMARY_JUNCTION) for i in range(2, 2 + n_leaves)]
    branches = [Branch(0, 0, 1, 0.01, 0.01)] + [Branch(i - 1, 1, i, 0.01, 0.01) for i in range(2, 2 + n_leaves)]
    return make_feeder(nodes, branches, 0)


def random_tree(seed, n):
    rng = np.random.default_rng(seed)
    nodes = [Node(0, Role.SUBSTATION)] + [Node(i, Role.PRIMARY_JUNCTION) for i in range(1, n)]
    branches = []
    for i in range(1, n):
        p = int(rng.integers(i))
        # store half of the branches against the flow direction
        a, b = (p, i) if rng.random() < 0.5 else (i, p)
        branches.append(Branch(i - 1, a, b, float(rng.uniform(0, 0.02)), float(rng.uniform(-0.01, 0.03))))
    return make_feeder(nodes, branches, 0)


def test_minimal_file_gives_one_branch():
    m = parse_feeder(MINIMAL)
    assert m.n_branches == 1
    assert m.root == 0
    assert m.base.v_base_secondary_v == 240


def test_duplicated_branch_names_the_cycle():
    text = MINIMAL.replace("0 0 1 0.01 0.02", "0 0 1 0.01 0.02\n1 1 0 0.01 0.02")
    with pytest.raises(FeederValidationError, match="branch 1"):
        parse_feeder(text)


def test_disconnected_node_reported():
    nodes = [Node(0, Role.SUBSTATION), Node(1, Role.PRIMARY_JUNCTION), Node(2, Role.PRIMARY_JUNCTION),
             Node(3, Role.PRIMARY_JUNCTION)]
    branches = [Branch(0, 0, 1, 0, 0), Branch(1, 2, 3, 0, 0), Branch(2, 3, 2, 0, 0)]
    with pytest.raises(FeederValidationError):
        make_feeder(nodes, branches, 0)


def test_parse_error_has_line_number():
    with pytest.raises(FeederParseError, match="line"):
        parse_feeder(MINIMAL.replace("0 0 1 0.01 0.02", "0 0 one 0.01 0.02"))


def test_negative_resistance_rejected():
    with pytest.raises(FeederValidationError):
        parse_feeder(MINIMAL.replace("0 0 1 0.01 0.02", "0 0 1 -0.01 0.02"))


def test_customer_outside_secondary():
    text = MINIMAL.replace("1 primary_junction a", "1 customer a")
    with pytest.raises(FeederValidationError, match="1"):
        parse_feeder(text)


def test_bundled_feeder_counts():
    m = load_feeder(bundled_feeder_path())
    assert len(m.primary_nodes) == 60
    assert len(m.secondaries) == 44
    assert len(m.customers) == 238
    assert m.n_branches == m.n_nodes - 1


def test_bundled_file_matches_generator():
    assert format_feeder(load_feeder(bundled_feeder_path())) == format_feeder(build_feeder60())


def test_format_round_trip():
    m = small_hierarchy()
    again = parse_feeder(format_feeder(m))
    assert again == m


def test_path_to_root_examples():
    m = chain_feeder(4)
    assert m.path_to_root(0) == []
    assert chain_feeder(2).path_to_root(1) == [0]
    assert m.path_to_root(3) == [0, 1, 2]
    with pytest.raises(KeyError):
        m.path_to_root(9)


def test_downstream_examples():
    m = chain_feeder(4)
    assert m.downstream_branches(3) == set()
    assert m.downstream_branches(0) == {0, 1, 2}
    assert star(3).downstream_branches(1) == {1, 2, 3}
    with pytest.raises(KeyError):
        m.downstream_branches(-1)


def test_secondary_state_dim():
    m = small_hierarchy(customers=(3,))
    s = m.secondaries[0]
    assert s.state_dim == 2 * len(s.branches) == 8


def test_circuit_submodel_rooted_at_transformer():
    m = build_feeder60()
    for s in m.secondaries:
        sub = m.circuits[s.id]
        assert sub.nodes[0] == s.transformer_node
        assert sub.model.n_branches == len(s.branches)
        assert sorted(sub.branches.tolist()) == sorted(s.branches)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 40))
def test_tree_properties(seed, n):
    m = random_tree(seed, n)
    assert m.n_branches == n - 1
    # every node reached exactly once from the root
    seen = [m.root]
    stack = [m.root]
    while stack:
        k = stack.pop()
        for b in m.children[k]:
            t = m.branches[b].to_node
            seen.append(t)
            stack.append(t)
    assert sorted(seen) == list(range(n))
    assert m.downstream_branches(m.root) == set(range(n - 1))
    for node in range(n):
        walk = m.root
        for b in m.path_to_root(node):
            assert m.branches[b].from_node == walk
            walk = m.branches[b].to_node
        assert walk == node
