"""Radial feeder model: primary feeder plus attached secondary circuits.

Node and branch ids are dense integers starting at 0.  Every model is a tree
rooted at the substation and every branch is stored oriented away from the
root, so a positive branch current flows from ``from_node`` to ``to_node``.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np


class FeederError(ValueError):
    """Base class for feeder model problems."""


class FeederParseError(FeederError):
    pass


class FeederValidationError(FeederError):
    pass


class Role(str, enum.Enum):
    SUBSTATION = "substation"
    PRIMARY_JUNCTION = "primary_junction"
    TRANSFORMER = "secondary_transformer"
    SECONDARY_JUNCTION = "secondary_junction"
    CUSTOMER = "customer"


PRIMARY_ROLES = (Role.SUBSTATION, Role.PRIMARY_JUNCTION, Role.TRANSFORMER)


@dataclass(frozen=True)
class Node:
    id: int
    role: Role
    phase: str = "a"


@dataclass(frozen=True)
class Branch:
    id: int
    from_node: int
    to_node: int
    r: float
    x: float

    @property
    def z(self) -> complex:
        return complex(self.r, self.x)


@dataclass(frozen=True)
class Customer:
    node: int
    has_meter: bool = False
    has_pv: bool = False


@dataclass(frozen=True)
class SecondaryCircuit:
    id: int
    transformer_node: int
    nodes: tuple[int, ...]
    branches: tuple[int, ...]
    customers: tuple[Customer, ...]

    @property
    def state_dim(self) -> int:
        return 2 * len(self.branches)

    @property
    def metered(self) -> tuple[int, ...]:
        return tuple(c.node for c in self.customers if c.has_meter)


@dataclass(frozen=True)
class BaseValues:
    s_base_va: float = 100e3
    v_base_primary_v: float = 13.8e3
    v_base_secondary_v: float = 240.0


@dataclass(frozen=True, eq=False)
class SubModel:
    """A subtree re-indexed as a standalone model.

    ``nodes[i]`` / ``branches[j]`` give the global id of local node i and
    local branch j of ``model``.
    """

    model: "FeederModel"
    nodes: np.ndarray
    branches: np.ndarray

    @cached_property
    def local_node(self) -> dict[int, int]:
        return {int(g): i for i, g in enumerate(self.nodes)}

    @cached_property
    def local_branch(self) -> dict[int, int]:
        return {int(g): i for i, g in enumerate(self.branches)}


@dataclass(frozen=True)
class FeederModel:
    nodes: tuple[Node, ...]
    branches: tuple[Branch, ...]
    root: int
    secondaries: tuple[SecondaryCircuit, ...] = ()
    base: BaseValues = field(default_factory=BaseValues)

    def __post_init__(self):
        _validate(self)

    # -- lookups ----------------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    @property
    def transformers(self) -> tuple[tuple[int, int], ...]:
        return tuple((s.transformer_node, s.id) for s in self.secondaries)

    @property
    def customers(self) -> tuple[Customer, ...]:
        return tuple(c for s in self.secondaries for c in s.customers)

    def secondary(self, sec_id: int) -> SecondaryCircuit:
        for s in self.secondaries:
            if s.id == sec_id:
                return s
        raise KeyError(f"unknown secondary circuit {sec_id}")

    def _check_node(self, n: int) -> None:
        if not 0 <= n < self.n_nodes:
            raise KeyError(f"unknown node id {n}")

    # -- cached topology arrays -------------------------------------------

    @cached_property
    def parent_branch(self) -> np.ndarray:
        pb = np.full(self.n_nodes, -1, dtype=int)
        for b in self.branches:
            pb[b.to_node] = b.id
        return pb

    @cached_property
    def from_idx(self) -> np.ndarray:
        return np.array([b.from_node for b in self.branches], dtype=int)

    @cached_property
    def to_idx(self) -> np.ndarray:
        return np.array([b.to_node for b in self.branches], dtype=int)

    @cached_property
    def z(self) -> np.ndarray:
        return np.array([b.z for b in self.branches], dtype=complex)

    @cached_property
    def children(self) -> tuple[tuple[int, ...], ...]:
        kids: list[list[int]] = [[] for _ in self.nodes]
        for b in self.branches:
            kids[b.from_node].append(b.id)
        return tuple(tuple(k) for k in kids)

    @cached_property
    def path_matrix(self) -> np.ndarray:
        """P[n, b] = 1 when branch b lies on the root-to-n path."""
        P = np.zeros((self.n_nodes, self.n_branches))
        for n in _bfs_order(self):
            b = self.parent_branch[n]
            if b >= 0:
                parent = self.branches[b].from_node
                P[n] = P[parent]
                P[n, b] = 1.0
        return P

    @cached_property
    def incidence(self) -> np.ndarray:
        """A[n, b] = +1 if b flows into n, -1 if b flows out of n."""
        A = np.zeros((self.n_nodes, self.n_branches))
        idx = np.arange(self.n_branches)
        A[self.to_idx, idx] = 1.0
        A[self.from_idx, idx] = -1.0
        return A

    @cached_property
    def node_secondary(self) -> dict[int, int]:
        """Map secondary node id -> secondary circuit id (transformer excluded)."""
        return {n: s.id for s in self.secondaries for n in s.nodes}

    @cached_property
    def primary_nodes(self) -> tuple[int, ...]:
        return tuple(n.id for n in self.nodes if n.role in PRIMARY_ROLES)

    @cached_property
    def primary(self) -> SubModel:
        return extract_subtree(self, self.primary_nodes, self.root)

    @cached_property
    def circuits(self) -> dict[int, SubModel]:
        return {
            s.id: extract_subtree(self, (s.transformer_node,) + s.nodes, s.transformer_node)
            for s in self.secondaries
        }

    # -- graph queries ----------------------------------------------------

    def path_to_root(self, n: int) -> list[int]:
        """Branch ids on the root-to-n path, root first."""
        self._check_node(n)
        path = []
        while n != self.root:
            b = int(self.parent_branch[n])
            path.append(b)
            n = self.branches[b].from_node
        return path[::-1]

    def downstream_branches(self, n: int) -> set[int]:
        self._check_node(n)
        out: set[int] = set()
        stack = [n]
        while stack:
            m = stack.pop()
            for b in self.children[m]:
                out.add(b)
                stack.append(self.branches[b].to_node)
        return out


def _bfs_order(model: FeederModel) -> list[int]:
    order = [model.root]
    q = deque([model.root])
    while q:
        m = q.popleft()
        for b in model.children[m]:
            t = model.branches[b].to_node
            order.append(t)
            q.append(t)
    return order


# ---------------------------------------------------------------------------
# construction and validation


def _find_cycle_branch(n_nodes: int, branches) -> Branch | None:
    parent = list(range(n_nodes))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for b in branches:
        ra, rb = find(b.from_node), find(b.to_node)
        if ra == rb:
            return b
        parent[ra] = rb
    return None


def orient(n_nodes: int, branches, root: int) -> tuple[Branch, ...]:
    """Return branches re-oriented away from ``root``; validates the tree."""
    for b in branches:
        if not (0 <= b.from_node < n_nodes and 0 <= b.to_node < n_nodes):
            raise FeederValidationError(f"branch {b.id} references an unknown node")
        if b.from_node == b.to_node:
            raise FeederValidationError(f"branch {b.id} is a self-loop at node {b.from_node}")
    bad = _find_cycle_branch(n_nodes, branches)
    if bad is not None:
        raise FeederValidationError(f"branch {bad.id} closes a cycle ({bad.from_node}-{bad.to_node})")
    adj: list[list[Branch]] = [[] for _ in range(n_nodes)]
    for b in branches:
        adj[b.from_node].append(b)
        adj[b.to_node].append(b)
    seen = [False] * n_nodes
    seen[root] = True
    out = {}
    q = deque([root])
    while q:
        m = q.popleft()
        for b in adj[m]:
            other = b.to_node if b.from_node == m else b.from_node
            if seen[other]:
                continue
            seen[other] = True
            out[b.id] = Branch(b.id, m, other, b.r, b.x)
            q.append(other)
    missing = [i for i, s in enumerate(seen) if not s]
    if missing:
        raise FeederValidationError(f"node {missing[0]} is disconnected from the root")
    return tuple(out[b.id] for b in branches)


def _validate(model: FeederModel) -> None:
    nodes, branches = model.nodes, model.branches
    for i, n in enumerate(nodes):
        if n.id != i:
            raise FeederValidationError(f"node ids must be dense from 0; got {n.id} at position {i}")
    for i, b in enumerate(branches):
        if b.id != i:
            raise FeederValidationError(f"branch ids must be dense from 0; got {b.id} at position {i}")
        if b.r < 0:
            raise FeederValidationError(f"branch {b.id} has negative resistance {b.r}")
        if not (np.isfinite(b.r) and np.isfinite(b.x)):
            raise FeederValidationError(f"branch {b.id} has non-finite impedance")
    if not 0 <= model.root < len(nodes):
        raise FeederValidationError(f"root {model.root} is not a node")
    if nodes[model.root].role is not Role.SUBSTATION:
        raise FeederValidationError(f"root node {model.root} must have role substation")
    subs = [n.id for n in nodes if n.role is Role.SUBSTATION]
    if len(subs) != 1:
        raise FeederValidationError(f"exactly one substation node expected, found {subs}")
    if len(branches) != len(nodes) - 1:
        extra = branches[-1].id if len(branches) >= len(nodes) else None
        bad = _find_cycle_branch(len(nodes), branches)
        if bad is not None:
            raise FeederValidationError(f"branch {bad.id} closes a cycle ({bad.from_node}-{bad.to_node})")
        raise FeederValidationError(
            f"a tree over {len(nodes)} nodes needs {len(nodes) - 1} branches, found {len(branches)}"
            + (f" (first surplus branch {extra})" if extra is not None else "")
        )
    oriented = orient(len(nodes), branches, model.root)
    for b, o in zip(branches, oriented):
        if (b.from_node, b.to_node) != (o.from_node, o.to_node):
            raise FeederValidationError(f"branch {b.id} is not oriented away from the root")
    _validate_secondaries(model)


def _validate_secondaries(model: FeederModel) -> None:
    owner: dict[int, int] = {}
    seen_ids = set()
    for s in model.secondaries:
        if s.id in seen_ids:
            raise FeederValidationError(f"duplicate secondary circuit id {s.id}")
        seen_ids.add(s.id)
        t = s.transformer_node
        if not 0 <= t < model.n_nodes or model.nodes[t].role is not Role.TRANSFORMER:
            raise FeederValidationError(f"secondary {s.id}: node {t} is not a secondary_transformer")
        if not s.customers:
            raise FeederValidationError(f"secondary {s.id} has no customers")
        members = set(s.nodes)
        for n in s.nodes:
            if n in owner:
                raise FeederValidationError(f"node {n} belongs to secondaries {owner[n]} and {s.id}")
            owner[n] = s.id
            if model.nodes[n].role not in (Role.SECONDARY_JUNCTION, Role.CUSTOMER):
                raise FeederValidationError(f"secondary {s.id}: node {n} has primary role {model.nodes[n].role.value}")
        allowed = members | {t}
        for b in s.branches:
            br = model.branches[b]
            if br.from_node not in allowed or br.to_node not in allowed:
                raise FeederValidationError(f"secondary {s.id}: branch {b} leaves the circuit")
        if len(s.branches) != len(s.nodes):
            raise FeederValidationError(f"secondary {s.id} is not a tree rooted at node {t}")
        # every circuit node must hang below the transformer through circuit branches
        own_branches = set(s.branches)
        for n in s.nodes:
            b = int(model.parent_branch[n])
            if b not in own_branches:
                raise FeederValidationError(f"secondary {s.id}: node {n} is fed from outside the circuit")
        for c in s.customers:
            if c.node not in members:
                raise FeederValidationError(f"customer {c.node} is not a node of secondary {s.id}")
            if model.nodes[c.node].role is not Role.CUSTOMER:
                raise FeederValidationError(f"secondary {s.id}: node {c.node} listed as customer has role {model.nodes[c.node].role.value}")
    customer_nodes = {c.node for s in model.secondaries for c in s.customers}
    for n in model.nodes:
        if n.role is Role.CUSTOMER and n.id not in customer_nodes:
            raise FeederValidationError(f"customer node {n.id} is outside any secondary circuit")
        if n.role in (Role.SECONDARY_JUNCTION,) and n.id not in owner:
            raise FeederValidationError(f"secondary junction {n.id} is outside any secondary circuit")
    # primary nodes may only be joined by primary branches
    for b in model.branches:
        f_primary = model.nodes[b.from_node].role in PRIMARY_ROLES
        t_primary = model.nodes[b.to_node].role in PRIMARY_ROLES
        if t_primary and not f_primary:
            raise FeederValidationError(f"branch {b.id} feeds primary node {b.to_node} from a secondary node")


def make_feeder(nodes, branches, root: int, secondaries=(), base: BaseValues | None = None) -> FeederModel:
    """Build a FeederModel, orienting branches away from the root first."""
    nodes = tuple(nodes)
    branches = tuple(branches)
    for i, n in enumerate(nodes):
        if n.id != i:
            raise FeederValidationError(f"node ids must be dense from 0; got {n.id} at position {i}")
    for i, b in enumerate(branches):
        if b.id != i:
            raise FeederValidationError(f"branch ids must be dense from 0; got {b.id} at position {i}")
    if len(branches) != len(nodes) - 1:
        bad = _find_cycle_branch(len(nodes), [b for b in branches if 0 <= b.from_node < len(nodes) and 0 <= b.to_node < len(nodes)])
        if bad is not None:
            raise FeederValidationError(f"branch {bad.id} closes a cycle ({bad.from_node}-{bad.to_node})")
        raise FeederValidationError(
            f"a tree over {len(nodes)} nodes needs {len(nodes) - 1} branches, found {len(branches)}"
        )
    if not 0 <= root < len(nodes):
        raise FeederValidationError(f"root {root} is not a node")
    oriented = orient(len(nodes), branches, root)
    return FeederModel(nodes, oriented, root, tuple(secondaries), base or BaseValues())


def extract_subtree(model: FeederModel, node_ids, root: int) -> SubModel:
    """Re-index the subtree spanned by ``node_ids`` (which must contain ``root``)."""
    node_ids = list(node_ids)
    members = set(node_ids)
    order = [root] + [n for n in node_ids if n != root]
    local = {g: i for i, g in enumerate(order)}
    br_global = [b.id for b in model.branches if b.from_node in members and b.to_node in members]
    nodes = []
    for g in order:
        role = model.nodes[g].role
        if g == root:
            role = Role.SUBSTATION
        elif role in (Role.SECONDARY_JUNCTION, Role.CUSTOMER):
            # local views carry no circuit records, so treat them as plain junctions
            role = Role.PRIMARY_JUNCTION
        nodes.append(Node(local[g], role, model.nodes[g].phase))
    branches = [
        Branch(i, local[model.branches[b].from_node], local[model.branches[b].to_node],
               model.branches[b].r, model.branches[b].x)
        for i, b in enumerate(br_global)
    ]
    sub = FeederModel(tuple(nodes), tuple(branches), 0, (), model.base)
    return SubModel(sub, np.array(order, dtype=int), np.array(br_global, dtype=int))


# ---------------------------------------------------------------------------
# file format


def _parse_flags(tokens, lineno):
    flags = {}
    for tok in tokens:
        if "=" not in tok:
            raise FeederParseError(f"line {lineno}: expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        if v not in ("0", "1"):
            raise FeederParseError(f"line {lineno}: flag {k} must be 0 or 1")
        flags[k] = v == "1"
    return flags


def parse_feeder(text: str) -> FeederModel:
    nodes: dict[int, Node] = {}
    branches: dict[int, Branch] = {}
    transformers: dict[int, int] = {}
    secs: dict[int, dict] = {}
    base = {}
    section = None
    sec_id = None

    def add_node(tok, lineno):
        if len(tok) not in (2, 3):
            raise FeederParseError(f"line {lineno}: node record needs id role [phase]")
        try:
            nid = int(tok[0])
            role = Role(tok[1])
        except ValueError as exc:
            raise FeederParseError(f"line {lineno}: bad node record: {exc}") from None
        if nid in nodes:
            raise FeederParseError(f"line {lineno}: duplicate node id {nid}")
        nodes[nid] = Node(nid, role, tok[2] if len(tok) == 3 else "a")
        return nid

    def add_branch(tok, lineno):
        if len(tok) != 5:
            raise FeederParseError(f"line {lineno}: branch record needs id from to r_pu x_pu")
        try:
            b = Branch(int(tok[0]), int(tok[1]), int(tok[2]), float(tok[3]), float(tok[4]))
        except ValueError as exc:
            raise FeederParseError(f"line {lineno}: bad branch record: {exc}") from None
        if b.id in branches:
            raise FeederParseError(f"line {lineno}: duplicate branch id {b.id}")
        branches[b.id] = b
        return b.id

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise FeederParseError(f"line {lineno}: unterminated section header")
            head = line[1:-1].split()
            section = head[0] if head else ""
            if section == "secondary":
                if len(head) != 2:
                    raise FeederParseError(f"line {lineno}: expected [secondary <id>]")
                try:
                    sec_id = int(head[1])
                except ValueError:
                    raise FeederParseError(f"line {lineno}: bad secondary id {head[1]!r}") from None
                if sec_id in secs:
                    raise FeederParseError(f"line {lineno}: duplicate secondary {sec_id}")
                secs[sec_id] = {"nodes": [], "branches": [], "customers": []}
            elif section not in ("nodes", "branches", "transformers", "base"):
                raise FeederParseError(f"line {lineno}: unknown section [{section}]")
            continue
        tok = line.split()
        if section is None:
            raise FeederParseError(f"line {lineno}: record outside any section")
        if section == "nodes":
            add_node(tok, lineno)
        elif section == "branches":
            add_branch(tok, lineno)
        elif section == "transformers":
            if len(tok) != 2:
                raise FeederParseError(f"line {lineno}: transformer record needs primary_node secondary_id")
            try:
                transformers[int(tok[1])] = int(tok[0])
            except ValueError:
                raise FeederParseError(f"line {lineno}: bad transformer record") from None
        elif section == "base":
            parts = line.replace("=", " ").split()
            if len(parts) != 2:
                raise FeederParseError(f"line {lineno}: base record needs key = value")
            try:
                base[parts[0]] = float(parts[1])
            except ValueError:
                raise FeederParseError(f"line {lineno}: bad base value {parts[1]!r}") from None
        elif section == "secondary":
            kind, rest = tok[0], tok[1:]
            entry = secs[sec_id]
            if kind == "node":
                entry["nodes"].append(add_node(rest, lineno))
            elif kind == "branch":
                entry["branches"].append(add_branch(rest, lineno))
            elif kind == "customer":
                if not rest:
                    raise FeederParseError(f"line {lineno}: customer record needs a node id")
                try:
                    cn = int(rest[0])
                except ValueError:
                    raise FeederParseError(f"line {lineno}: bad customer node {rest[0]!r}") from None
                flags = _parse_flags(rest[1:], lineno)
                entry["customers"].append(Customer(cn, flags.get("meter", False), flags.get("pv", False)))
            else:
                raise FeederParseError(f"line {lineno}: unknown secondary record {kind!r}")

    known = {"s_base_va", "v_base_primary_v", "v_base_secondary_v"}
    unknown = set(base) - known
    if unknown:
        raise FeederParseError(f"unknown base keys {sorted(unknown)}")
    node_list = [nodes[i] for i in sorted(nodes)]
    branch_list = [branches[i] for i in sorted(branches)]
    roots = [n.id for n in node_list if n.role is Role.SUBSTATION]
    if len(roots) != 1:
        raise FeederValidationError(f"exactly one substation node expected, found {roots}")
    for sid in secs:
        if sid not in transformers:
            raise FeederValidationError(f"secondary {sid} has no [transformers] record")
    for sid in transformers:
        if sid not in secs:
            raise FeederValidationError(f"transformer record names missing secondary {sid}")
    secondaries = tuple(
        SecondaryCircuit(sid, transformers[sid], tuple(e["nodes"]), tuple(e["branches"]), tuple(e["customers"]))
        for sid, e in sorted(secs.items())
    )
    return make_feeder(node_list, branch_list, roots[0], secondaries, BaseValues(**base))


def load_feeder(path) -> FeederModel:
    path = Path(path)
    return parse_feeder(path.read_text())


def format_feeder(model: FeederModel) -> str:
    lines = [
        "[base]",
        f"s_base_va = {model.base.s_base_va!r}",
        f"v_base_primary_v = {model.base.v_base_primary_v!r}",
        f"v_base_secondary_v = {model.base.v_base_secondary_v!r}",
        "",
        "[nodes]",
        "# id role phase",
    ]
    sec_nodes = model.node_secondary
    sec_branches = {b for s in model.secondaries for b in s.branches}
    for n in model.nodes:
        if n.id not in sec_nodes:
            lines.append(f"{n.id} {n.role.value} {n.phase}")
    lines += ["", "[branches]", "# id from to r_pu x_pu"]
    for b in model.branches:
        if b.id not in sec_branches:
            lines.append(f"{b.id} {b.from_node} {b.to_node} {b.r!r} {b.x!r}")
    lines += ["", "[transformers]", "# primary_node secondary_id"]
    for node, sid in model.transformers:
        lines.append(f"{node} {sid}")
    for s in model.secondaries:
        lines += ["", f"[secondary {s.id}]"]
        for n in s.nodes:
            nd = model.nodes[n]
            lines.append(f"node {nd.id} {nd.role.value} {nd.phase}")
        for bid in s.branches:
            b = model.branches[bid]
            lines.append(f"branch {b.id} {b.from_node} {b.to_node} {b.r!r} {b.x!r}")
        for c in s.customers:
            lines.append(f"customer {c.node} meter={int(c.has_meter)} pv={int(c.has_pv)}")
    return "\n".join(lines) + "\n"


def save_feeder(model: FeederModel, path) -> None:
    Path(path).write_text(format_feeder(model))


def bundled_feeder_path() -> Path:
    return Path(__file__).parent / "data" / "feeder60.model"
