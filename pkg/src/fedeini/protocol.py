"""Two-stage encrypted inference, the multi-party chain, and the
multi-interactive baseline.

All strategies run one guest (weights + private key) against M-1 hosts
(public key only) over a counting transport:

* ``fedeini``: every party enumerates candidate leaves locally and in
  parallel; the guest ships encrypted per-tree decision vectors in a
  single batched message, the host intersects and aggregates
  homomorphically and returns one encrypted margin per sample. Two
  protocol messages per batch, independent of depth and batch size.
* ``chain``: for three or more parties the vectors travel
  guest -> host_1 -> ... -> host_{M-1}; each intermediate host zeroes
  the entries its own rules exclude (as fresh encryptions of zero) and
  rerandomizes survivors, and the last host aggregates and returns the
  result. M messages total.
* ``multi``: the baseline walks every tree top-down, paying one query
  round trip for every host-owned node on the realized path.
* ``plaintext``: the oracle; no parties, no messages.

Private keys never enter any message; the sole host-to-guest payload in
the encrypted strategies is the aggregated ciphertext.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
import uuid
from dataclasses import dataclass, field

import numpy as np
from gmpy2 import mpz

from . import engine, wire
from .data import FeatureTable, merge_tables
from .encoding import FixedPointCodec
from .model import (
    SubModel,
    TreeEnsemble,
    VerticalPartition,
    goes_left,
    partition_model,
    save_model,
    validate_overflow,
)
from .paillier import Ciphertext, KeyPair, PublicKey, keygen
from .transport import (
    DEFAULT_TIMEOUT_S,
    PHASE_PROTOCOL,
    PHASE_SETUP,
    PHASE_TEARDOWN,
    MessageRecord,
    PartyEndpoint,
    Transport,
    make_transport,
)

STRATEGY_FEDEINI = "fedeini"
STRATEGY_CHAIN = "chain"
STRATEGY_MULTI = "multi"
STRATEGY_PLAINTEXT = "plaintext"
STRATEGIES = (STRATEGY_FEDEINI, STRATEGY_CHAIN, STRATEGY_MULTI, STRATEGY_PLAINTEXT)

GUEST_NAME = "guest"


class ProtocolError(RuntimeError):
    pass


def party_name(party_id: int, guest_party: int) -> str:
    return GUEST_NAME if party_id == guest_party else f"host{party_id}"


def model_version_of(ensemble: TreeEnsemble, partition: VerticalPartition) -> str:
    """Digest of the model document; all parties must agree on it."""
    doc = json.dumps(save_model(ensemble, partition), sort_keys=True)
    return hashlib.sha256(doc.encode("utf-8")).hexdigest()[:16]


@dataclass
class SessionState:
    role: str
    name: str
    session_id: bytes
    model_version: str
    phase: str = "setup"
    public_key: PublicKey | None = None
    keypair: KeyPair | None = None


@dataclass(frozen=True)
class ProtocolTrace:
    records: tuple[MessageRecord, ...]

    def in_phase(self, phase: str) -> list[MessageRecord]:
        return [r for r in self.records if r.phase == phase]

    @property
    def setup_messages(self) -> int:
        return len(self.in_phase(PHASE_SETUP))

    @property
    def message_count(self) -> int:
        """Protocol-phase messages; setup and teardown are not counted."""
        return len(self.in_phase(PHASE_PROTOCOL))

    @property
    def total_bytes(self) -> int:
        return sum(r.n_bytes for r in self.in_phase(PHASE_PROTOCOL))

    def variants(self, sender: str | None = None, receiver: str | None = None) -> list[str]:
        return [r.variant for r in self.in_phase(PHASE_PROTOCOL)
                if (sender is None or r.sender == sender)
                and (receiver is None or r.receiver == receiver)]


@dataclass(frozen=True)
class RunResult:
    strategy: str
    sample_ids: tuple[int, ...]
    predictions: np.ndarray
    margins: np.ndarray
    trace: ProtocolTrace
    wall_ms: float
    latency_ms: float
    party_count: int
    key_bits: int | None
    scale_bits: int | None
    per_sample_queries: tuple[int, ...] | None = None


@dataclass(frozen=True)
class ProtocolConfig:
    key_bits: int = 2048
    scale_bits: int = 32
    latency_ms: float = 10.0
    timeout_s: float = DEFAULT_TIMEOUT_S
    serve_timeout_s: float = 900.0
    batched: bool = True
    transport: str = "inproc"
    keep_frames: bool = False


class GuestRuntime:
    """The guest's sequential state machine."""

    def __init__(self, sub_model: SubModel, table: FeatureTable, endpoint: PartyEndpoint,
                 host_names: list[str], names_by_party: dict[int, str],
                 model_version: str, key_bits: int, scale_bits: int,
                 timeout_s: float = DEFAULT_TIMEOUT_S):
        if not sub_model.is_guest:
            raise ProtocolError("guest runtime requires the guest sub-model")
        self.sub_model = sub_model
        self.table = table
        self.endpoint = endpoint
        self.host_names = list(host_names)
        self.names_by_party = dict(names_by_party)
        self.timeout_s = timeout_s
        self.key_bits = key_bits
        self.scale_bits = scale_bits
        self.state = SessionState("guest", endpoint.name, b"", model_version)
        self.keypair: KeyPair | None = None
        self.codec: FixedPointCodec | None = None
        # leaf weights per tree ordered by leaf index, from the guest view
        self._weights = []
        for view in sub_model.trees:
            leaves = sorted((n for n in view.nodes.values() if n.is_leaf),
                            key=lambda n: n.leaf_index)
            self._weights.append([n.weight for n in leaves])

    def setup(self) -> SessionState:
        """Generate keys and fan the public key out to every host."""
        if self.state.session_id:
            raise ProtocolError("session already established")
        self.keypair = keygen(self.key_bits)
        self.codec = FixedPointCodec.for_key(self.keypair.public_key, self.scale_bits)
        self.state.session_id = uuid.uuid4().bytes
        self.state.public_key = self.keypair.public_key
        self.state.keypair = self.keypair
        for host in self.host_names:
            self.endpoint.send_message(host, wire.Setup(
                session_id=self.state.session_id,
                seq=self.endpoint.next_seq(),
                model_version=self.state.model_version,
                public_key_fields=self.keypair.public_key.to_dict(),
            ))
        self.state.phase = "computed"
        return self.state

    # ---- stage 1 ----------------------------------------------------------

    def _encrypted_vector(self, sample_id: int, tree_id: int) -> tuple:
        row = self.table.row(sample_id)
        view = self.sub_model.trees[tree_id]
        candidates = engine.candidate_set(view, row)
        alpha = self.sub_model.shrinkage[tree_id]
        encoded = engine.encoded_guest_entries(candidates, self._weights[tree_id],
                                               alpha, self.codec)
        raw_encrypt = self.keypair.private_key.raw_encrypt
        return tuple(raw_encrypt(m) for m in encoded)

    def _build_vectors(self, sample_ids, tree_ids) -> tuple:
        return tuple(
            tuple(self._encrypted_vector(sid, k) for k in tree_ids)
            for sid in sample_ids
        )

    # ---- strategies -------------------------------------------------------

    def _finish(self, sample_ids, reply) -> tuple[np.ndarray, np.ndarray]:
        if not isinstance(reply, wire.HostAggregate):
            raise ProtocolError(f"expected HostAggregate, got {type(reply).__name__}")
        if reply.session_id != self.state.session_id:
            raise ProtocolError("aggregate from a different session")
        if tuple(reply.sample_ids) != tuple(sample_ids):
            raise ProtocolError("aggregate does not cover the requested batch")
        key_id = self.keypair.public_key.key_id
        margins = np.array([
            self.codec.decode(self.keypair.decrypt(Ciphertext(value, key_id)))
            for value in reply.values
        ])
        predictions = np.array([
            engine.ensemble_combine(m, self.sub_model.strategy,
                                    self.sub_model.base_score, len(self.sub_model.trees))
            for m in margins
        ])
        self.state.phase = "done"
        return margins, predictions

    def run_fed_eini(self, sample_ids, batched: bool = True) -> tuple[np.ndarray, np.ndarray]:
        if not self.host_names:
            return self._run_local(sample_ids)
        if len(self.host_names) > 1:
            raise ProtocolError("two-party mode supports one host; use the chain for more")
        host = self.host_names[0]
        all_trees = tuple(range(len(self.sub_model.trees)))
        if batched:
            self.endpoint.send_message(host, wire.GuestVectors(
                self.state.session_id, self.endpoint.next_seq(),
                tuple(int(s) for s in sample_ids), all_trees,
                self._build_vectors(sample_ids, all_trees),
            ))
        else:
            for k in all_trees:  # one push per tree; same payload volume
                self.endpoint.send_message(host, wire.GuestVectors(
                    self.state.session_id, self.endpoint.next_seq(),
                    tuple(int(s) for s in sample_ids), (k,),
                    self._build_vectors(sample_ids, (k,)),
                ))
        self.state.phase = "synchronized"
        reply = self.endpoint.recv_message(timeout=self.timeout_s)
        return self._finish(sample_ids, reply)

    def run_chain(self, sample_ids) -> tuple[np.ndarray, np.ndarray]:
        if len(self.host_names) < 2:
            raise ProtocolError("chain mode requires at least 3 parties")
        all_trees = tuple(range(len(self.sub_model.trees)))
        self.endpoint.send_message(self.host_names[0], wire.GuestVectors(
            self.state.session_id, self.endpoint.next_seq(),
            tuple(int(s) for s in sample_ids), all_trees,
            self._build_vectors(sample_ids, all_trees),
        ))
        self.state.phase = "synchronized"
        reply = self.endpoint.recv_message(timeout=self.timeout_s)
        return self._finish(sample_ids, reply)

    def run_multi_interactive(self, sample_ids) -> tuple[np.ndarray, np.ndarray, list[int]]:
        margins = np.zeros(len(sample_ids))
        queries = [0] * len(sample_ids)
        for i, sid in enumerate(sample_ids):
            row = self.table.row(sid)
            margin = 0.0
            for k, view in enumerate(self.sub_model.trees):
                node = view.nodes[view.root_id]
                while not node.is_leaf:
                    if node.is_owned:
                        left = goes_left(row[node.feature_id], node.threshold)
                    else:
                        owner = self.names_by_party[node.owner_party]
                        self.endpoint.send_message(owner, wire.SplitQuery(
                            self.state.session_id, self.endpoint.next_seq(),
                            k, node.node_id, int(sid)))
                        answer = self.endpoint.recv_message(timeout=self.timeout_s)
                        if not isinstance(answer, wire.SplitAnswer):
                            raise ProtocolError(
                                f"expected SplitAnswer, got {type(answer).__name__}")
                        queries[i] += 1
                        left = bool(answer.go_left)
                    node = view.nodes[node.left if left else node.right]
                margin += self.sub_model.shrinkage[k] * node.weight
            margins[i] = margin
        predictions = np.array([
            engine.ensemble_combine(m, self.sub_model.strategy,
                                    self.sub_model.base_score, len(self.sub_model.trees))
            for m in margins
        ])
        self.state.phase = "done"
        return margins, predictions, queries

    def _run_local(self, sample_ids) -> tuple[np.ndarray, np.ndarray]:
        # single-party degenerate case: the guest owns everything
        margins = np.zeros(len(sample_ids))
        for i, sid in enumerate(sample_ids):
            row = self.table.row(sid)
            margin = 0.0
            for k, view in enumerate(self.sub_model.trees):
                node = view.nodes[view.root_id]
                while not node.is_leaf:
                    node = view.nodes[node.left if goes_left(row[node.feature_id], node.threshold)
                                      else node.right]
                margin += self.sub_model.shrinkage[k] * node.weight
            margins[i] = margin
        predictions = np.array([
            engine.ensemble_combine(m, self.sub_model.strategy,
                                    self.sub_model.base_score, len(self.sub_model.trees))
            for m in margins
        ])
        return margins, predictions

    def end_session(self) -> None:
        for host in self.host_names:
            self.endpoint.send_message(host, wire.EndSession(
                self.state.session_id, self.endpoint.next_seq()))


class HostRuntime:
    """A host's sequential state machine: serve until EndSession."""

    def __init__(self, sub_model: SubModel, table: FeatureTable, endpoint: PartyEndpoint,
                 guest_name: str, model_version: str, next_hop: str | None = None,
                 serve_timeout_s: float = 900.0):
        if sub_model.is_guest:
            raise ProtocolError("host runtime requires a host sub-model")
        self.sub_model = sub_model
        self.table = table
        self.endpoint = endpoint
        self.guest_name = guest_name
        self.next_hop = next_hop
        self.serve_timeout_s = serve_timeout_s
        self.state = SessionState("host", endpoint.name, b"", model_version)
        self.error: BaseException | None = None
        # streaming mode accumulates per-sample sums until all trees arrive
        self._partial: dict[int, mpz] | None = None
        self._trees_seen: set[int] = set()

    def serve(self) -> None:
        try:
            while True:
                message = self.endpoint.recv_message(timeout=self.serve_timeout_s)
                if isinstance(message, wire.EndSession):
                    self.state.phase = "done"
                    return
                if isinstance(message, wire.Setup):
                    self._handle_setup(message)
                    continue
                self._check_session(message)
                if isinstance(message, (wire.GuestVectors, wire.ChainForward)):
                    self._handle_vectors(message)
                elif isinstance(message, wire.SplitQuery):
                    self._handle_split_query(message)
                else:
                    raise ProtocolError(
                        f"{self.endpoint.name}: unexpected {type(message).__name__}")
        except BaseException as exc:  # surfaced by the driver after join
            self.error = exc

    def _handle_setup(self, message: wire.Setup) -> None:
        if self.state.session_id:
            raise ProtocolError(f"{self.endpoint.name}: duplicate session setup")
        if message.model_version != self.state.model_version:
            raise ProtocolError(
                f"{self.endpoint.name}: model version mismatch "
                f"(guest {message.model_version}, local {self.state.model_version})")
        self.state.session_id = message.session_id
        self.state.public_key = PublicKey.from_dict(message.public_key_fields)
        self.state.phase = "computed"

    def _check_session(self, message) -> None:
        if not self.state.session_id:
            raise ProtocolError(f"{self.endpoint.name}: message before session setup")
        if message.session_id != self.state.session_id:
            raise ProtocolError(f"{self.endpoint.name}: message from a foreign session")

    def _candidate_leaves(self, sample_id: int, tree_id: int) -> frozenset[int]:
        view = self.sub_model.trees[tree_id]
        return engine.candidate_set(view, self.table.row(sample_id)).leaves

    def _handle_vectors(self, message) -> None:
        pk = self.state.public_key
        nsquare = pk.nsquare
        if self.next_hop is not None:
            forwarded = []
            for i, sid in enumerate(message.sample_ids):
                per_tree = []
                for t, k in enumerate(message.tree_ids):
                    leaves = self._candidate_leaves(sid, k)
                    entries = message.vectors[i][t]
                    self._check_length(k, entries)
                    # survivors are rerandomized; pruned slots become fresh
                    # encryptions of zero so the vector shape never leaks
                    per_tree.append(tuple(
                        int(mpz(value) * pk.random_obfuscator() % nsquare)
                        if j in leaves else int(pk.raw_encrypt(0))
                        for j, value in enumerate(entries)
                    ))
                forwarded.append(tuple(per_tree))
            self.endpoint.send_message(self.next_hop, wire.ChainForward(
                message.session_id, self.endpoint.next_seq(),
                message.sample_ids, message.tree_ids, tuple(forwarded)))
            return
        # final host: intersect with local bits and accumulate the margin sum
        if self._partial is None:
            self._partial = {int(sid): mpz(1) for sid in message.sample_ids}
        for i, sid in enumerate(message.sample_ids):
            acc = self._partial[int(sid)]
            for t, k in enumerate(message.tree_ids):
                leaves = self._candidate_leaves(sid, k)
                entries = message.vectors[i][t]
                self._check_length(k, entries)
                if not leaves:
                    raise ProtocolError(f"empty candidate set for tree {k}")
                s_k = mpz(1)
                for j in leaves:
                    s_k = s_k * entries[j] % nsquare
                acc = acc * s_k % nsquare
            self._partial[int(sid)] = acc
        self._trees_seen.update(message.tree_ids)
        if len(self._trees_seen) == len(self.sub_model.trees):
            self.endpoint.send_message(self.guest_name, wire.HostAggregate(
                message.session_id, self.endpoint.next_seq(),
                tuple(self._partial), tuple(int(v) for v in self._partial.values())))
            self._partial = None
            self._trees_seen = set()
            self.state.phase = "synchronized"

    def _check_length(self, tree_id: int, entries) -> None:
        expected = self.sub_model.trees[tree_id].leaf_count
        if len(entries) != expected:
            raise ProtocolError(
                f"tree {tree_id}: vector length {len(entries)} != leaf count {expected}")

    def _handle_split_query(self, message: wire.SplitQuery) -> None:
        try:
            view = self.sub_model.trees[message.tree_id]
            node = view.nodes[message.node_id]
        except (IndexError, KeyError):
            raise ProtocolError(
                f"{self.endpoint.name}: unknown node {message.node_id} "
                f"in tree {message.tree_id}") from None
        if not node.is_owned:
            raise ProtocolError(
                f"{self.endpoint.name}: queried for node {message.node_id} it does not own")
        value = self.table.row(message.sample_id)[node.feature_id]
        self.endpoint.send_message(self.guest_name, wire.SplitAnswer(
            message.session_id, self.endpoint.next_seq(),
            int(goes_left(value, node.threshold))))


def setup_session(guest: GuestRuntime, hosts: list[HostRuntime]) -> list[SessionState]:
    """Key generation plus public-key fan-out; returns every party's state.

    Hosts must already be serving. The guest keeps the private key; the
    returned host states carry the shared public key only.
    """
    guest.setup()
    deadline = time.monotonic() + guest.timeout_s
    for host in hosts:
        while host.state.public_key is None and host.error is None:
            if time.monotonic() > deadline:
                raise ProtocolError(f"{host.endpoint.name}: setup not acknowledged")
            time.sleep(0.001)
        if host.error is not None:
            raise host.error
    return [guest.state] + [h.state for h in hosts]


# --- top-level driver -------------------------------------------------------

def _chain_order(partition: VerticalPartition) -> list[int]:
    return partition.host_parties()


def run_strategy(strategy: str, ensemble: TreeEnsemble, partition: VerticalPartition,
                 tables: dict[int, FeatureTable], sample_ids=None,
                 config: ProtocolConfig = ProtocolConfig()) -> RunResult:
    """Run one inference strategy end to end and return predictions + trace.

    Timing covers candidate computation, encryption, transport (virtual
    latency included), intersection, and decryption; key generation and
    session setup are excluded.
    """
    if strategy not in STRATEGIES:
        raise ProtocolError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    ensemble.validate()
    partition.validate(ensemble.n_features)
    guest_table = tables[partition.guest_party]
    if sample_ids is None:
        sample_ids = [int(s) for s in guest_table.sample_ids]
    sample_ids = [int(s) for s in sample_ids]

    if strategy == STRATEGY_PLAINTEXT:
        X = merge_tables(tables, ensemble.n_features)
        pos = {int(s): i for i, s in enumerate(guest_table.sample_ids)}
        rows = np.array([pos[s] for s in sample_ids])
        t0 = time.perf_counter()
        predictions = engine.predict_batch(ensemble, X[rows])
        margins = np.zeros(len(sample_ids))
        for i, s in enumerate(sample_ids):
            margins[i] = engine.raw_margin(ensemble, X[pos[s]])
        wall_ms = (time.perf_counter() - t0) * 1000.0
        return RunResult(strategy, tuple(sample_ids), predictions, margins,
                         ProtocolTrace(()), wall_ms, 0.0, partition.party_count,
                         None, None)

    M = partition.party_count
    if strategy == STRATEGY_FEDEINI and M > 2:
        raise ProtocolError("fedeini runs one guest against one host; use chain for M >= 3")
    if strategy == STRATEGY_CHAIN and M < 3:
        raise ProtocolError("chain requires M >= 3 parties")
    if strategy == STRATEGY_MULTI and M < 1:
        raise ProtocolError("multi-interactive requires at least the guest")

    sub_models = partition_model(ensemble, partition)
    names_by_party = {m: party_name(m, partition.guest_party) for m in range(M)}
    version = model_version_of(ensemble, partition)
    transport = make_transport(config.transport, list(names_by_party.values()),
                               latency_ms=config.latency_ms, keep_frames=config.keep_frames)
    host_order = _chain_order(partition)
    hosts: list[HostRuntime] = []
    for pos_in_chain, m in enumerate(host_order):
        if strategy == STRATEGY_CHAIN and pos_in_chain + 1 < len(host_order):
            next_hop = names_by_party[host_order[pos_in_chain + 1]]
        else:
            next_hop = None
        hosts.append(HostRuntime(
            sub_models[m], tables[m], PartyEndpoint(transport, names_by_party[m]),
            guest_name=GUEST_NAME, model_version=version, next_hop=next_hop,
            serve_timeout_s=config.serve_timeout_s))
    guest = GuestRuntime(
        sub_models[partition.guest_party], guest_table,
        PartyEndpoint(transport, GUEST_NAME),
        host_names=[names_by_party[m] for m in host_order],
        names_by_party=names_by_party, model_version=version,
        key_bits=config.key_bits, scale_bits=config.scale_bits,
        timeout_s=config.timeout_s)

    threads = [threading.Thread(target=h.serve, daemon=True, name=h.endpoint.name)
               for h in hosts]
    for t in threads:
        t.start()
    queries = None
    try:
        if hosts:
            setup_session(guest, hosts)
            validate_overflow(ensemble, guest.codec)
        transport.set_phase(PHASE_PROTOCOL)
        sim_before = transport.simulated_ms
        t0 = time.perf_counter()
        if strategy == STRATEGY_FEDEINI:
            if hosts:
                margins, predictions = guest.run_fed_eini(sample_ids, batched=config.batched)
            else:
                margins, predictions = guest._run_local(sample_ids)
        elif strategy == STRATEGY_CHAIN:
            margins, predictions = guest.run_chain(sample_ids)
        else:
            margins, predictions, queries = guest.run_multi_interactive(sample_ids)
        wall_ms = (time.perf_counter() - t0) * 1000.0 + (transport.simulated_ms - sim_before)
    finally:
        transport.set_phase(PHASE_TEARDOWN)
        try:
            guest.end_session()
        except Exception:
            pass
        for t in threads:
            t.join(timeout=10.0)
        transport.close()
    for host in hosts:
        if host.error is not None:
            raise host.error
    return RunResult(strategy, tuple(sample_ids), predictions, margins,
                     ProtocolTrace(tuple(transport.records)), wall_ms,
                     config.latency_ms, M,
                     config.key_bits if strategy in (STRATEGY_FEDEINI, STRATEGY_CHAIN) and hosts else None,
                     config.scale_bits if strategy in (STRATEGY_FEDEINI, STRATEGY_CHAIN) and hosts else None,
                     per_sample_queries=tuple(queries) if queries is not None else None)
