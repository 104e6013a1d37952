"""Decision-tree-ensemble data model, vertical partitioning, and model documents.

A trained ensemble is a list of binary trees whose leaves carry real
weights. Under a vertical partition every feature column belongs to
exactly one party; the guest (one distinguished party) additionally
owns all leaf weights. Splitting the model hands each party the full
tree *skeleton* (node ids, child links, leaf indices) but only the
thresholds and feature ids of the nodes it owns.

Split semantics: a sample goes LEFT iff feature value < threshold.
Leaf indices are assigned left-to-right in depth-first order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

GBDT_SIGMOID = "gbdt_sigmoid"
RF_AVERAGE = "rf_average"
STRATEGIES = (GBDT_SIGMOID, RF_AVERAGE)

SCHEMA_VERSION = 1


class ModelFormatError(ValueError):
    """A model document or tree structure violates the schema."""


class PartitionError(ValueError):
    """A vertical partition does not cover the model's features."""


class OverflowRiskError(ValueError):
    """Aggregating this ensemble could wrap around the plaintext modulus."""


def goes_left(value: float, threshold: float) -> bool:
    return value < threshold


@dataclass(frozen=True)
class TreeNode:
    node_id: int
    feature_id: int | None = None
    threshold: float | None = None
    left: int | None = None
    right: int | None = None
    leaf_index: int | None = None
    weight: float | None = None

    @staticmethod
    def split(node_id: int, feature_id: int, threshold: float, left: int, right: int) -> "TreeNode":
        return TreeNode(node_id, feature_id=feature_id, threshold=float(threshold),
                        left=left, right=right)

    @staticmethod
    def leaf(node_id: int, leaf_index: int, weight: float) -> "TreeNode":
        return TreeNode(node_id, leaf_index=leaf_index, weight=float(weight))

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass(frozen=True)
class DecisionTree:
    tree_id: int
    root_id: int
    nodes: Mapping[int, TreeNode]

    def validate(self) -> None:
        if self.root_id not in self.nodes:
            raise ModelFormatError(f"tree {self.tree_id}: root {self.root_id} not among nodes")
        seen: set[int] = set()
        stack = [self.root_id]
        while stack:
            node_id = stack.pop()
            if node_id in seen:
                raise ModelFormatError(f"tree {self.tree_id}: node {node_id} reachable twice (cycle or shared child)")
            seen.add(node_id)
            node = self.nodes[node_id]
            if node.is_leaf:
                if node.leaf_index is None or node.weight is None:
                    raise ModelFormatError(f"tree {self.tree_id}: leaf {node_id} missing leaf_index or weight")
                continue
            if node.right is None or node.feature_id is None or node.threshold is None:
                raise ModelFormatError(f"tree {self.tree_id}: internal node {node_id} incomplete")
            for child in (node.left, node.right):
                if child not in self.nodes:
                    raise ModelFormatError(f"tree {self.tree_id}: node {node_id} references missing child {child}")
            stack.append(node.right)
            stack.append(node.left)
        if seen != set(self.nodes):
            orphans = sorted(set(self.nodes) - seen)
            raise ModelFormatError(f"tree {self.tree_id}: unreachable nodes {orphans}")
        indices = sorted(n.leaf_index for n in self.nodes.values() if n.is_leaf)
        if indices != list(range(len(indices))):
            raise ModelFormatError(f"tree {self.tree_id}: leaf indices {indices} are not 0..T-1 exactly once")

    @property
    def leaf_count(self) -> int:
        return sum(1 for n in self.nodes.values() if n.is_leaf)

    @property
    def depth(self) -> int:
        def walk(node_id: int) -> int:
            node = self.nodes[node_id]
            if node.is_leaf:
                return 0
            return 1 + max(walk(node.left), walk(node.right))

        return walk(self.root_id)

    def leaf_weights(self) -> list[float]:
        """Weights ordered by leaf_index."""
        leaves = sorted((n for n in self.nodes.values() if n.is_leaf), key=lambda n: n.leaf_index)
        return [n.weight for n in leaves]


@dataclass(frozen=True)
class TreeEnsemble:
    trees: tuple[DecisionTree, ...]
    strategy: str
    shrinkage: tuple[float, ...]
    base_score: float
    feature_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "trees", tuple(self.trees))
        object.__setattr__(self, "shrinkage", tuple(float(a) for a in self.shrinkage))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    def validate(self) -> None:
        if len(self.trees) < 1:
            raise ModelFormatError("ensemble must contain at least one tree")
        if self.strategy not in STRATEGIES:
            raise ModelFormatError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if len(self.shrinkage) != len(self.trees):
            raise ModelFormatError("shrinkage must supply one factor per tree")
        if any(a <= 0 for a in self.shrinkage):
            raise ModelFormatError("all shrinkage factors must be positive")
        d = len(self.feature_names)
        for tree in self.trees:
            tree.validate()
            for node in tree.nodes.values():
                if not node.is_leaf and not (0 <= node.feature_id < d):
                    raise ModelFormatError(
                        f"tree {tree.tree_id}: node {node.node_id} uses feature {node.feature_id} outside 0..{d - 1}"
                    )

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @property
    def max_depth(self) -> int:
        return max(t.depth for t in self.trees)

    def used_features(self) -> set[int]:
        return {
            n.feature_id for t in self.trees for n in t.nodes.values() if not n.is_leaf
        }


@dataclass(frozen=True)
class VerticalPartition:
    """Assignment of feature columns to parties 0..M-1; one party is the guest."""

    party_count: int
    owner_of_feature: Mapping[int, int]
    guest_party: int = 0

    def validate(self, n_features: int) -> None:
        if self.party_count < 1:
            raise PartitionError("party_count must be >= 1")
        if not (0 <= self.guest_party < self.party_count):
            raise PartitionError(f"guest party {self.guest_party} outside 0..{self.party_count - 1}")
        for feature_id in range(n_features):
            owner = self.owner_of_feature.get(feature_id)
            if owner is None:
                raise PartitionError(f"feature {feature_id} has no owner")
            if not (0 <= owner < self.party_count):
                raise PartitionError(f"feature {feature_id} owned by unknown party {owner}")
        extra = set(self.owner_of_feature) - set(range(n_features))
        if extra:
            raise PartitionError(f"owners listed for unknown features {sorted(extra)}")

    def owner(self, feature_id: int) -> int:
        try:
            return self.owner_of_feature[feature_id]
        except KeyError:
            raise PartitionError(f"feature {feature_id} has no owner") from None

    def features_of(self, party_id: int) -> list[int]:
        return sorted(f for f, m in self.owner_of_feature.items() if m == party_id)

    def dimensions(self) -> list[int]:
        """Per-party feature counts d_m."""
        return [len(self.features_of(m)) for m in range(self.party_count)]

    def host_parties(self) -> list[int]:
        return [m for m in range(self.party_count) if m != self.guest_party]


def single_party_partition(n_features: int) -> VerticalPartition:
    return VerticalPartition(1, {f: 0 for f in range(n_features)}, guest_party=0)


def guest_first_partition(n_features: int, guest_features: int, party_count: int = 2,
                          guest_party: int = 0) -> VerticalPartition:
    """Guest takes the first guest_features columns; the rest are dealt
    contiguously and as evenly as possible to the hosts."""
    if not (0 <= guest_features <= n_features):
        raise PartitionError(f"guest_features {guest_features} outside 0..{n_features}")
    if party_count < 1 or (party_count == 1 and guest_features != n_features):
        raise PartitionError("single-party partition must give the guest every feature")
    owners = {f: guest_party for f in range(guest_features)}
    hosts = [m for m in range(party_count) if m != guest_party]
    rest = list(range(guest_features, n_features))
    if rest and not hosts:
        raise PartitionError("features left over but no host parties to own them")
    for i, feature_id in enumerate(rest):
        owners[feature_id] = hosts[i * len(hosts) // len(rest)]
    return VerticalPartition(party_count, owners, guest_party=guest_party)


@dataclass(frozen=True)
class PartyNode:
    """One node of a tree as a single party sees it.

    The skeleton (children, leaf indices) is always present; feature_id
    and threshold only when this party owns the node; weight only in the
    guest view; owner_party only in the guest view (the guest knows which
    party answers for every node).
    """

    node_id: int
    left: int | None = None
    right: int | None = None
    leaf_index: int | None = None
    feature_id: int | None = None
    threshold: float | None = None
    weight: float | None = None
    owner_party: int | None = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    @property
    def is_owned(self) -> bool:
        return self.feature_id is not None


@dataclass(frozen=True)
class PartyTreeView:
    tree_id: int
    party_id: int
    root_id: int
    nodes: Mapping[int, PartyNode]
    leaf_count: int


@dataclass(frozen=True)
class SubModel:
    """One party's share of the ensemble.

    Hosts carry bare skeletons plus their own split rules. The guest view
    additionally carries leaf weights and the ensemble metadata needed to
    turn an aggregated margin into a prediction.
    """

    party_id: int
    is_guest: bool
    trees: tuple[PartyTreeView, ...]
    strategy: str | None = None
    shrinkage: tuple[float, ...] | None = None
    base_score: float | None = None

    def owned_internal_nodes(self, tree_id: int) -> set[int]:
        view = self.trees[tree_id]
        return {n.node_id for n in view.nodes.values() if n.is_owned}


def partition_model(ensemble: TreeEnsemble, partition: VerticalPartition) -> list[SubModel]:
    """Split the ensemble into per-party views with disjoint node ownership."""
    ensemble.validate()
    partition.validate(ensemble.n_features)
    sub_models = []
    for party in range(partition.party_count):
        is_guest = party == partition.guest_party
        views = []
        for tree in ensemble.trees:
            nodes = {}
            for node in tree.nodes.values():
                if node.is_leaf:
                    nodes[node.node_id] = PartyNode(
                        node.node_id,
                        leaf_index=node.leaf_index,
                        weight=node.weight if is_guest else None,
                    )
                    continue
                owner = partition.owner(node.feature_id)
                owned = owner == party
                nodes[node.node_id] = PartyNode(
                    node.node_id,
                    left=node.left,
                    right=node.right,
                    feature_id=node.feature_id if owned else None,
                    threshold=node.threshold if owned else None,
                    owner_party=owner if is_guest else None,
                )
            views.append(PartyTreeView(tree.tree_id, party, tree.root_id, nodes, tree.leaf_count))
        sub_models.append(SubModel(
            party_id=party,
            is_guest=is_guest,
            trees=tuple(views),
            strategy=ensemble.strategy if is_guest else None,
            shrinkage=ensemble.shrinkage if is_guest else None,
            base_score=ensemble.base_score if is_guest else None,
        ))
    return sub_models


def validate_overflow(ensemble: TreeEnsemble, codec) -> None:
    """Reject ensembles whose aggregated margin could wrap modulo n.

    The encrypted pipeline sums at most K scaled leaf contributions, so
    K * max|alpha_k * w| * scale must stay below n/2.
    """
    peak = 0.0
    for tree, alpha in zip(ensemble.trees, ensemble.shrinkage):
        for node in tree.nodes.values():
            if node.is_leaf:
                peak = max(peak, abs(alpha * node.weight))
    bound = ensemble.n_trees * peak * codec.scale
    if 2 * bound >= codec.n:
        raise OverflowRiskError(
            f"worst-case margin {ensemble.n_trees} * {peak:g} * 2^{codec.scale_bits} = {bound:g} "
            f"reaches n/2 = {codec.n / 2:g}"
        )


# --- model document (JSON-compatible) -------------------------------------

def _node_to_doc(node: TreeNode) -> dict:
    if node.is_leaf:
        return {"id": node.node_id, "kind": "leaf",
                "leaf_index": node.leaf_index, "weight": node.weight}
    return {"id": node.node_id, "kind": "split", "feature": node.feature_id,
            "threshold": node.threshold, "left": node.left, "right": node.right}


def _node_from_doc(tree_id: int, doc: dict) -> TreeNode:
    try:
        kind = doc["kind"]
        if kind == "leaf":
            return TreeNode.leaf(doc["id"], doc["leaf_index"], doc["weight"])
        if kind == "split":
            return TreeNode.split(doc["id"], doc["feature"], doc["threshold"],
                                  doc["left"], doc["right"])
    except KeyError as exc:
        raise ModelFormatError(f"tree {tree_id}: node document missing field {exc}") from None
    raise ModelFormatError(f"tree {tree_id}: unknown node kind {kind!r}")


def save_model(ensemble: TreeEnsemble, partition: VerticalPartition) -> dict:
    ensemble.validate()
    partition.validate(ensemble.n_features)
    return {
        "schema_version": SCHEMA_VERSION,
        "meta": {
            "strategy": ensemble.strategy,
            "base_score": ensemble.base_score,
            "shrinkage": list(ensemble.shrinkage),
            "n_trees": ensemble.n_trees,
            "max_depth": ensemble.max_depth,
        },
        "feature_names": list(ensemble.feature_names),
        "trees": [
            {
                "tree_id": t.tree_id,
                "root": t.root_id,
                "nodes": [_node_to_doc(t.nodes[i]) for i in sorted(t.nodes)],
            }
            for t in ensemble.trees
        ],
        "partition": {
            "party_count": partition.party_count,
            "guest": partition.guest_party,
            "owners": {ensemble.feature_names[f]: m for f, m in sorted(partition.owner_of_feature.items())},
        },
    }


def load_model(document: dict) -> tuple[TreeEnsemble, VerticalPartition]:
    try:
        version = document["schema_version"]
        if version != SCHEMA_VERSION:
            raise ModelFormatError(f"unsupported schema_version {version}")
        meta = document["meta"]
        feature_names = tuple(document["feature_names"])
        trees = []
        for tree_doc in document["trees"]:
            nodes = {}
            for node_doc in tree_doc["nodes"]:
                node = _node_from_doc(tree_doc["tree_id"], node_doc)
                if node.node_id in nodes:
                    raise ModelFormatError(
                        f"tree {tree_doc['tree_id']}: duplicate node id {node.node_id}")
                nodes[node.node_id] = node
            trees.append(DecisionTree(tree_doc["tree_id"], tree_doc["root"], nodes))
        ensemble = TreeEnsemble(
            trees=tuple(trees),
            strategy=meta["strategy"],
            shrinkage=tuple(meta["shrinkage"]),
            base_score=meta["base_score"],
            feature_names=feature_names,
        )
        part_doc = document["partition"]
        name_to_id = {name: i for i, name in enumerate(feature_names)}
        owners = {}
        for name, party in part_doc["owners"].items():
            if name not in name_to_id:
                raise ModelFormatError(f"partition names unknown feature {name!r}")
            owners[name_to_id[name]] = party
        partition = VerticalPartition(part_doc["party_count"], owners,
                                      guest_party=part_doc["guest"])
    except KeyError as exc:
        raise ModelFormatError(f"model document missing field {exc}") from None
    ensemble.validate()
    partition.validate(ensemble.n_features)
    return ensemble, partition


def save_model_file(path, ensemble: TreeEnsemble, partition: VerticalPartition) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(save_model(ensemble, partition), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model_file(path) -> tuple[TreeEnsemble, VerticalPartition]:
    with open(path, encoding="utf-8") as fh:
        return load_model(json.load(fh))
