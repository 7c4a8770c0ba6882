"""Deterministic synthetic test feeders.

``build_feeder60`` produces the bundled ``feeder60.model``: a 60-node
13.8 kV primary feeder with 44 service transformers and 238 customers on
240 V secondary circuits, in per unit on a 100 kVA base.
"""

from __future__ import annotations

import numpy as np

from .grid import BaseValues, Branch, Customer, FeederModel, Node, Role, SecondaryCircuit, make_feeder

S_BASE = 100e3
V_PRIMARY = 13.8e3
V_SECONDARY = 240.0

# ohm per km
Z_PRIMARY_KM = complex(0.19, 0.39)
Z_SECONDARY_KM = complex(0.32, 0.08)
Z_SERVICE_KM = complex(0.60, 0.09)
XFMR_Z_PCT = complex(1.2, 2.0)


def _pu(z_ohm: complex, v_base: float) -> complex:
    return z_ohm / (v_base ** 2 / S_BASE)


def _split_counts(rng, total, parts, lo, hi):
    counts = rng.integers(lo, hi + 1, size=parts)
    while counts.sum() != total:
        i = rng.integers(parts)
        if counts.sum() > total and counts[i] > lo:
            counts[i] -= 1
        elif counts.sum() < total and counts[i] < hi:
            counts[i] += 1
    return counts


def build_feeder60(seed: int = 60, n_primary: int = 60, n_transformers: int = 44, n_customers: int = 238,
                   meter_fraction: float = 0.1, pv_fraction: float = 0.4) -> FeederModel:
    rng = np.random.default_rng(seed)
    parents = [-1]
    for i in range(1, n_primary):
        parents.append(int(rng.integers(max(0, i - 4), i)))
    n_children = np.bincount(parents[1:], minlength=n_primary)
    n_junctions = n_primary - 1 - n_transformers
    # branching points become plain junctions, everything else hosts a transformer
    order = sorted(range(1, n_primary), key=lambda n: (-n_children[n], n))
    junctions = set(order[:n_junctions])
    nodes = [Node(0, Role.SUBSTATION)]
    for i in range(1, n_primary):
        nodes.append(Node(i, Role.PRIMARY_JUNCTION if i in junctions else Role.TRANSFORMER))
    branches = []
    for i in range(1, n_primary):
        km = rng.uniform(0.2, 1.2)
        z = _pu(Z_PRIMARY_KM * km, V_PRIMARY)
        branches.append(Branch(i - 1, parents[i], i, z.real, z.imag))

    xfmr_nodes = [n.id for n in nodes if n.role is Role.TRANSFORMER]
    counts = _split_counts(rng, n_customers, len(xfmr_nodes), 2, 9)
    all_customers = n_customers
    metered = set(rng.choice(all_customers, size=int(round(meter_fraction * all_customers)), replace=False).tolist())
    with_pv = set(rng.choice(all_customers, size=int(round(pv_fraction * all_customers)), replace=False).tolist())

    secondaries = []
    next_node = n_primary
    next_branch = n_primary - 1
    cust_index = 0
    for sid, (t, k) in enumerate(zip(xfmr_nodes, counts)):
        kva = 25.0 if k <= 4 else 50.0 if k <= 7 else 75.0
        zt = XFMR_Z_PCT / 100.0 * (S_BASE / (kva * 1e3))
        lv = next_node
        nodes.append(Node(lv, Role.SECONDARY_JUNCTION))
        branches.append(Branch(next_branch, t, lv, zt.real, zt.imag))
        sec_nodes, sec_branches, custs = [lv], [next_branch], []
        next_node += 1
        next_branch += 1
        n_ped = 1 if k <= 4 else 2
        peds = []
        for _ in range(n_ped):
            p = next_node
            z = _pu(Z_SECONDARY_KM * rng.uniform(0.03, 0.08), V_SECONDARY)
            nodes.append(Node(p, Role.SECONDARY_JUNCTION))
            branches.append(Branch(next_branch, lv, p, z.real, z.imag))
            sec_nodes.append(p)
            sec_branches.append(next_branch)
            peds.append(p)
            next_node += 1
            next_branch += 1
        for j in range(k):
            c = next_node
            z = _pu(Z_SERVICE_KM * rng.uniform(0.015, 0.04), V_SECONDARY)
            nodes.append(Node(c, Role.CUSTOMER))
            branches.append(Branch(next_branch, peds[j % n_ped], c, z.real, z.imag))
            sec_nodes.append(c)
            sec_branches.append(next_branch)
            custs.append(Customer(c, cust_index in metered, cust_index in with_pv))
            cust_index += 1
            next_node += 1
            next_branch += 1
        secondaries.append(SecondaryCircuit(sid, t, tuple(sec_nodes), tuple(sec_branches), tuple(custs)))

    return make_feeder(nodes, branches, 0, secondaries, BaseValues(S_BASE, V_PRIMARY, V_SECONDARY))


def chain_feeder(n: int, z: complex = complex(0.01, 0.02)) -> FeederModel:
    """Plain n-node chain 0-1-...-(n-1) without secondary circuits."""
    nodes = [Node(0, Role.SUBSTATION)] + [Node(i, Role.PRIMARY_JUNCTION) for i in range(1, n)]
    branches = [Branch(i - 1, i - 1, i, z.real, z.imag) for i in range(1, n)]
    return make_feeder(nodes, branches, 0)


def small_hierarchy(n_primary: int = 6, seed: int = 3, customers=(3, 2, 4)) -> FeederModel:
    """A small chain primary with one secondary circuit per listed customer count.

    Transformers sit on the last ``len(customers)`` primary nodes; every
    customer is metered.
    """
    rng = np.random.default_rng(seed)
    nodes = [Node(0, Role.SUBSTATION)]
    n_xf = len(customers)
    for i in range(1, n_primary):
        role = Role.TRANSFORMER if i >= n_primary - n_xf else Role.PRIMARY_JUNCTION
        nodes.append(Node(i, role))
    branches = []
    for i in range(1, n_primary):
        z = _pu(Z_PRIMARY_KM * rng.uniform(0.5, 1.5), V_PRIMARY)
        branches.append(Branch(i - 1, i - 1, i, z.real, z.imag))
    secondaries = []
    nid, bid = n_primary, n_primary - 1
    for sid, k in enumerate(customers):
        t = n_primary - n_xf + sid
        zt = XFMR_Z_PCT / 100.0 * (S_BASE / 50e3)
        lv = nid
        nodes.append(Node(lv, Role.SECONDARY_JUNCTION))
        branches.append(Branch(bid, t, lv, zt.real, zt.imag))
        sn, sb, cs = [lv], [bid], []
        nid += 1
        bid += 1
        for _ in range(k):
            z = _pu(Z_SERVICE_KM * rng.uniform(0.02, 0.05), V_SECONDARY)
            nodes.append(Node(nid, Role.CUSTOMER))
            branches.append(Branch(bid, lv, nid, z.real, z.imag))
            sn.append(nid)
            sb.append(bid)
            cs.append(Customer(nid, True, bool(rng.integers(2))))
            nid += 1
            bid += 1
        secondaries.append(SecondaryCircuit(sid, t, tuple(sn), tuple(sb), tuple(cs)))
    return make_feeder(nodes, branches, 0, secondaries, BaseValues(S_BASE, V_PRIMARY, V_SECONDARY))
