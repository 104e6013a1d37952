"""Per-party candidate computation and the encrypted intersection.

Each party enumerates the leaves of a tree that remain reachable when
only its own split rules are enforced (unowned nodes constrain
nothing). The guest turns its candidate set into a vector of
ciphertexts over all T_k leaves: the scaled, encoded leaf weight for
candidates and an encryption of zero elsewhere. A host's vector is a
plain 0/1 mask. The homomorphic inner product of the two selects the
single leaf in the intersection of all candidate sets, which by
construction of mutually exclusive splits is exactly the leaf the full
tree would reach.

Everything here is a pure function over immutable inputs and safe to
call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .encoding import FixedPointCodec
from .model import (
    GBDT_SIGMOID,
    RF_AVERAGE,
    DecisionTree,
    PartyTreeView,
    TreeEnsemble,
    TreeNode,
    goes_left,
)
from .paillier import Ciphertext, PublicKey


@dataclass(frozen=True)
class CandidateSet:
    tree_id: int
    party_id: int
    leaves: frozenset[int]


@dataclass(frozen=True)
class GuestDecisionVector:
    tree_id: int
    entries: tuple[Ciphertext, ...]


@dataclass(frozen=True)
class HostDecisionVector:
    tree_id: int
    bits: tuple[int, ...]


def candidate_set(view: PartyTreeView, features: Mapping[int, float]) -> CandidateSet:
    """Leaves reachable when only this party's owned splits are enforced.

    A leaf qualifies iff every owned internal node on its root path is
    satisfied in the path's direction; nodes owned by other parties let
    both subtrees through.
    """
    leaves: list[int] = []
    stack = [view.root_id]
    while stack:
        node = view.nodes[stack.pop()]
        if node.is_leaf:
            leaves.append(node.leaf_index)
            continue
        if node.is_owned:
            try:
                value = features[node.feature_id]
            except KeyError:
                raise ValueError(
                    f"party {view.party_id} lacks feature {node.feature_id} "
                    f"required by node {node.node_id} of tree {view.tree_id}"
                ) from None
            stack.append(node.left if goes_left(value, node.threshold) else node.right)
        else:
            stack.append(node.right)
            stack.append(node.left)
    return CandidateSet(view.tree_id, view.party_id, frozenset(leaves))


def intersect_candidate_sets(candidate_sets: Iterable[CandidateSet]) -> frozenset[int]:
    result: frozenset[int] | None = None
    for cs in candidate_sets:
        result = cs.leaves if result is None else result & cs.leaves
    if result is None:
        raise ValueError("no candidate sets given")
    return result


def encoded_guest_entries(candidates: CandidateSet, weights: Sequence[float],
                          alpha: float, codec: FixedPointCodec) -> list[int]:
    """Plaintext entries of the guest vector: encode(alpha * w_j) or 0."""
    return [
        codec.encode(alpha * weights[j]) if j in candidates.leaves else 0
        for j in range(len(weights))
    ]


def guest_decision_vector(candidates: CandidateSet, weights: Sequence[float],
                          alpha: float, encryptor, codec: FixedPointCodec) -> GuestDecisionVector:
    """Encrypt the guest's candidate weights, zeros elsewhere.

    Every entry gets fresh randomness, so candidate and non-candidate
    positions are indistinguishable to the holder of the vector.
    """
    entries = tuple(encryptor.encrypt(m)
                    for m in encoded_guest_entries(candidates, weights, alpha, codec))
    return GuestDecisionVector(candidates.tree_id, entries)


def host_decision_vector(candidates: CandidateSet, leaf_count: int) -> HostDecisionVector:
    bits = tuple(1 if j in candidates.leaves else 0 for j in range(leaf_count))
    return HostDecisionVector(candidates.tree_id, bits)


def intersect_inner_product(public_key: PublicKey, guest_vector: GuestDecisionVector,
                            host_vector: HostDecisionVector) -> Ciphertext:
    """Homomorphic inner product <encrypted guest entries, host bits>.

    Sums the guest entries at the host's candidate positions; every
    summand outside the true decision path decrypts to zero, so the
    result decrypts to the scaled weight of the unique common leaf.
    """
    if len(guest_vector.entries) != len(host_vector.bits):
        raise ValueError(
            f"vector length mismatch: {len(guest_vector.entries)} encrypted entries "
            f"vs {len(host_vector.bits)} bits"
        )
    selected = [e for e, bit in zip(guest_vector.entries, host_vector.bits) if bit]
    if not selected:
        raise ValueError("host decision vector has no candidate leaves")
    acc = selected[0].value
    nsquare = public_key.nsquare
    for entry in selected[1:]:
        public_key.check_ciphertext(entry)
        acc = acc * entry.value % nsquare
    return Ciphertext(acc, public_key.key_id)


def aggregate_trees(public_key: PublicKey, tree_sums: Sequence[Ciphertext]) -> Ciphertext:
    """Homomorphic sum of the per-tree intersection results."""
    if not tree_sums:
        raise ValueError("nothing to aggregate")
    acc = tree_sums[0].value
    public_key.check_ciphertext(tree_sums[0])
    nsquare = public_key.nsquare
    for c in tree_sums[1:]:
        public_key.check_ciphertext(c)
        acc = acc * c.value % nsquare
    return Ciphertext(acc, public_key.key_id)


def ensemble_combine(margin: float, strategy: str, base_score: float, n_trees: int) -> float:
    if strategy == GBDT_SIGMOID:
        return float(expit(base_score + margin))
    if strategy == RF_AVERAGE:
        return float(margin / n_trees)
    raise ValueError(f"unknown ensemble strategy {strategy!r}")


# --- plaintext oracle ------------------------------------------------------

def realized_leaf(tree: DecisionTree, x: np.ndarray) -> TreeNode:
    """Standard top-down traversal of the full tree."""
    node = tree.nodes[tree.root_id]
    while not node.is_leaf:
        value = x[node.feature_id]
        node = tree.nodes[node.left if goes_left(value, node.threshold) else node.right]
    return node


def realized_path(tree: DecisionTree, x: np.ndarray) -> list[int]:
    """Node ids visited from root to the realized leaf, inclusive."""
    path = [tree.root_id]
    node = tree.nodes[tree.root_id]
    while not node.is_leaf:
        value = x[node.feature_id]
        node = tree.nodes[node.left if goes_left(value, node.threshold) else node.right]
        path.append(node.node_id)
    return path


def raw_margin(ensemble: TreeEnsemble, x: np.ndarray) -> float:
    margin = 0.0
    for tree, alpha in zip(ensemble.trees, ensemble.shrinkage):
        margin += alpha * realized_leaf(tree, x).weight
    return margin


def plaintext_predict(ensemble: TreeEnsemble, x: np.ndarray) -> float:
    """Reference prediction both protocols are measured against."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != ensemble.n_features:
        raise ValueError(f"expected {ensemble.n_features} features, got {x.shape[0]}")
    return ensemble_combine(raw_margin(ensemble, x), ensemble.strategy,
                            ensemble.base_score, ensemble.n_trees)


def batch_margins(ensemble: TreeEnsemble, X: np.ndarray) -> np.ndarray:
    """Vectorized margins; per-element arithmetic identical to raw_margin."""
    from .training import tree_raw_values

    X = np.asarray(X, dtype=np.float64)
    margins = np.zeros(X.shape[0])
    for tree, alpha in zip(ensemble.trees, ensemble.shrinkage):
        margins = margins + alpha * tree_raw_values(tree, X)
    return margins


def predict_batch(ensemble: TreeEnsemble, X: np.ndarray) -> np.ndarray:
    """Vectorized oracle over rows; identical arithmetic to plaintext_predict."""
    margins = batch_margins(ensemble, X)
    if ensemble.strategy == GBDT_SIGMOID:
        return expit(ensemble.base_score + margins)
    return margins / ensemble.n_trees
