"""Coordinator and participant state machines for the two-phase protocol.

Phase one (optional, one-shot): fingerprint exchange — every node submits
its local fingerprint, the server concatenates them and broadcasts the
global fingerprint back. Phase two: per-round state-dict aggregation —
the server collects all submissions, matches layers, averages the
compatible set and broadcasts the result; nodes overwrite matched layers
and keep the rest.

Rounds are synchronous and full-participation: a missing submission
aborts the round for everyone, so no node ever applies a partial update.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .channels import (TcpListener, simulated_transport, tcp_connect)
from .data import preprocess_case
from .errors import FederationAbort, ProtocolError, UsageError
from .fingerprint import (Fingerprint, GlobalFingerprint,
                          aggregate_fingerprints, extract_fingerprint,
                          make_plan)
from .model import SegModel
from .statedict import (StateDict, aggregate_asym, apply_update, match_layers)
from .train import SgdTrainer, train_epoch
from .wire import (MsgType, RoundMessage, SERVER_ID, decode_state_dict,
                   encode_state_dict, json_payload)

STRATEGIES = ("ffe", "asym")


def _round_seed(seed: int, node_id: int, round_idx: int, epoch: int):
    return [seed & 0xFFFFFFFF, node_id, round_idx, epoch]


@dataclass
class ServerResult:
    global_fingerprint: GlobalFingerprint = None
    aggregates: list = field(default_factory=list)
    node_ids: list = field(default_factory=list)


class FederationServer:
    """Coordinator: registration, optional fingerprint phase, then rounds."""

    def __init__(self, endpoints, expected_nodes: int, strategy: str,
                 total_rounds: int, matching_mode: str = "strict",
                 weighted: bool = False, timeout: float = 60.0,
                 dump_aggregate=None):
        if strategy not in STRATEGIES:
            raise UsageError(f"unknown strategy {strategy!r}")
        self.endpoints = list(endpoints)
        self.expected_nodes = expected_nodes
        self.strategy = strategy
        self.total_rounds = total_rounds
        self.matching_mode = matching_mode
        self.weighted = weighted
        self.timeout = timeout
        self.dump_aggregate = dump_aggregate
        self.phase = "Registering"
        self.round = 0
        self.by_node = {}     # node_id -> endpoint
        self.num_cases = {}   # node_id -> reported dataset size
        self.result = ServerResult()

    def _abort(self, reason: str, missing=None):
        payload = json_payload({"reason": reason,
                                "missing": sorted(missing or [])})
        for ep in self.by_node.values() or self.endpoints:
            try:
                ep.send(RoundMessage(MsgType.ABORT, SERVER_ID, self.round,
                                     payload))
            except Exception:
                pass
        raise FederationAbort(reason, missing_nodes=missing or [])

    def _recv_expect(self, endpoint, msg_type, node_id=None):
        try:
            msg = endpoint.recv(timeout=self.timeout)
        except TimeoutError:
            missing = [node_id] if node_id is not None else []
            self._abort(f"timeout waiting for {msg_type.name}"
                        + (f" from node {node_id}" if node_id is not None
                           else ""), missing)
        if msg.msg_type != msg_type:
            self._abort(f"expected {msg_type.name}, got {msg.msg_type.name}"
                        + (f" from node {node_id}" if node_id is not None
                           else ""))
        return msg

    def register(self):
        if len(self.endpoints) != self.expected_nodes:
            self._abort(f"expected {self.expected_nodes} nodes, have "
                        f"{len(self.endpoints)} endpoints")
        for ep in self.endpoints:
            msg = self._recv_expect(ep, MsgType.HELLO)
            hello = msg.json()
            nid = int(hello["node_id"])
            if nid in self.by_node:
                self._abort(f"duplicate node_id {nid} at registration")
            self.by_node[nid] = ep
            self.num_cases[nid] = int(hello.get("num_cases", 1))
        self.result.node_ids = sorted(self.by_node)
        ack = json_payload({"ffe": self.strategy == "ffe",
                            "total_rounds": self.total_rounds,
                            "matching": self.matching_mode})
        for nid in sorted(self.by_node):
            self.by_node[nid].send(
                RoundMessage(MsgType.ROUND_ACK, SERVER_ID, 0, ack))
        self.phase = ("FingerprintCollect" if self.strategy == "ffe"
                      else "Training")

    def run_ffe_phase(self) -> GlobalFingerprint:
        if self.phase != "FingerprintCollect":
            raise UsageError(f"ffe phase not allowed in phase {self.phase}")
        contributions = []
        for nid in sorted(self.by_node):
            msg = self._recv_expect(self.by_node[nid],
                                    MsgType.FINGERPRINT_SUBMIT, nid)
            contributions.append((nid, Fingerprint.from_dict(msg.json())))
        global_fp = aggregate_fingerprints(contributions)
        payload = json_payload(global_fp.to_dict())
        for nid in sorted(self.by_node):
            self.by_node[nid].send(RoundMessage(
                MsgType.GLOBAL_FINGERPRINT_BCAST, SERVER_ID, 0, payload))
        self.result.global_fingerprint = global_fp
        self.phase = "Training"
        return global_fp

    def run_round(self, round_idx: int) -> StateDict:
        if self.phase != "Training":
            raise UsageError(f"cannot run a round in phase {self.phase}")
        self.round = round_idx
        submissions = []
        for nid in sorted(self.by_node):
            msg = self._recv_expect(self.by_node[nid],
                                    MsgType.STATE_DICT_SUBMIT, nid)
            if msg.round != round_idx:
                self._abort(f"node {nid} submitted round {msg.round}, "
                            f"expected {round_idx}")
            submissions.append(decode_state_dict(msg.payload, node_id=nid,
                                                 round=round_idx))
        compat = match_layers(submissions, mode=self.matching_mode)
        if self.strategy == "ffe":
            for sd in submissions:
                for name in sd.names():
                    if name not in compat:
                        self._abort(
                            f"architecture drift under FFE-FedAvg: layer "
                            f"{name!r} of node {sd.node_id} is not covered")
        weights = ({nid: float(self.num_cases[nid]) for nid in self.by_node}
                   if self.weighted else None)
        aggregated = aggregate_asym(submissions, compat, weights=weights)
        if self.dump_aggregate is not None:
            self.dump_aggregate(round_idx, aggregated)
        payload = encode_state_dict(aggregated)
        for nid in sorted(self.by_node):
            self.by_node[nid].send(RoundMessage(
                MsgType.AGGREGATE_BCAST, SERVER_ID, round_idx, payload))
        self.result.aggregates.append(aggregated)
        return aggregated

    def shutdown(self):
        for nid in sorted(self.by_node):
            self.by_node[nid].send(
                RoundMessage(MsgType.SHUTDOWN, SERVER_ID, self.round))
        self.phase = "Done"

    def run(self) -> ServerResult:
        self.register()
        if self.strategy == "ffe":
            self.run_ffe_phase()
        for t in range(self.total_rounds):
            self.run_round(t)
        self.shutdown()
        return self.result


@dataclass
class NodeResult:
    node_id: int
    state_dict: StateDict
    plan: object = None
    model: SegModel = None
    losses: list = field(default_factory=list)


class FederationNode:
    """Participant: trains one (or more) local epochs per round and applies
    the server's update before advancing — strict lockstep."""

    def __init__(self, endpoint, node_id: int, *, dataset=None,
                 memory_budget: int = None, lr: float = 0.01,
                 seed: int = 0, shared_init: bool = True,
                 epochs_per_round: int = 1, state_dict: StateDict = None,
                 timeout: float = 120.0):
        if dataset is None and state_dict is None:
            raise UsageError("node needs a dataset or a fixed state dict")
        self.endpoint = endpoint
        self.node_id = node_id
        self.dataset = dataset
        self.memory_budget = memory_budget
        self.lr = lr
        self.seed = seed
        self.shared_init = shared_init
        self.epochs_per_round = epochs_per_round
        self.fixed_state_dict = state_dict
        self.timeout = timeout
        self.phase = "Registering"
        self.round = 0
        self.plan = None
        self.model = None
        self.state_dict = state_dict
        self.losses = []

    def _recv(self, *accept):
        msg = self.endpoint.recv(timeout=self.timeout)
        if msg.msg_type == MsgType.ABORT:
            info = msg.json() if msg.payload else {}
            raise FederationAbort(
                f"server aborted: {info.get('reason', 'unknown')}",
                missing_nodes=info.get("missing", []))
        if msg.msg_type not in accept:
            raise ProtocolError(
                f"node {self.node_id}: unexpected {msg.msg_type.name}")
        return msg

    def _init_training(self, ffe_active: bool):
        if self.fixed_state_dict is not None:
            self.state_dict = self.fixed_state_dict
            return
        local_fp = extract_fingerprint(self.dataset)
        if ffe_active:
            self.endpoint.send(RoundMessage(
                MsgType.FINGERPRINT_SUBMIT, self.node_id, 0,
                json_payload(local_fp.to_dict())))
            msg = self._recv(MsgType.GLOBAL_FINGERPRINT_BCAST)
            global_fp = GlobalFingerprint.from_dict(msg.json())
        else:
            global_fp = GlobalFingerprint.from_local(local_fp, self.node_id)
        self.plan = make_plan(global_fp, self.memory_budget)
        init_seed = self.seed if self.shared_init else self.seed ^ self.node_id
        self.model = SegModel.create(self.plan, init_seed,
                                     node_id=self.node_id)
        self.state_dict = self.model.params
        pre = [preprocess_case(img, msk, sp, self.plan)
               for img, msk, sp in self.dataset]
        self._images = np.stack([p[0] for p in pre])
        self._masks = np.stack([p[1] for p in pre])
        self._trainer = SgdTrainer(self.model, self.lr)

    def _train_round(self, round_idx: int):
        if self.fixed_state_dict is not None:
            return
        for e in range(self.epochs_per_round):
            loss = train_epoch(self._trainer, self._images, self._masks,
                               self.plan.batch_size,
                               _round_seed(self.seed, self.node_id,
                                           round_idx, e))
            self.losses.append(loss)
        self.state_dict = self.model.params

    def run(self) -> NodeResult:
        self.endpoint.send(RoundMessage(
            MsgType.HELLO, self.node_id, 0,
            json_payload({"node_id": self.node_id,
                          "num_cases": len(self.dataset or [])})))
        ack = self._recv(MsgType.ROUND_ACK).json()
        total_rounds = int(ack["total_rounds"])
        self._init_training(bool(ack["ffe"]))
        self.phase = "Training"
        for t in range(total_rounds):
            self.round = t
            self._train_round(t)
            self.state_dict.round = t
            self.endpoint.send(RoundMessage(
                MsgType.STATE_DICT_SUBMIT, self.node_id, t,
                encode_state_dict(self.state_dict)))
            msg = self._recv(MsgType.AGGREGATE_BCAST)
            if msg.round != t:
                raise ProtocolError(
                    f"node {self.node_id}: aggregate for round {msg.round} "
                    f"while in round {t}")
            aggregated = decode_state_dict(msg.payload, node_id=SERVER_ID,
                                           round=t)
            self.state_dict = apply_update(self.state_dict, aggregated)
            if self.model is not None:
                self.model.load_state_dict(self.state_dict)
        self._recv(MsgType.SHUTDOWN)
        self.phase = "Done"
        return NodeResult(self.node_id, self.state_dict, self.plan,
                          self.model, self.losses)


def _run_threads(workers):
    """Run callables on threads; re-raise the first failure."""
    results = [None] * len(workers)
    errors = [None] * len(workers)

    def wrap(i, fn):
        def target():
            try:
                results[i] = fn()
            except BaseException as e:  # noqa: BLE001 - propagated below
                errors[i] = e
        return target

    threads = [threading.Thread(target=wrap(i, fn), daemon=True)
               for i, fn in enumerate(workers)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    for e in errors:
        if e is not None:
            raise e
    return results


def run_federation(node_kwargs_by_id: dict, *, strategy: str, rounds: int,
                   transport: str = "sim", matching_mode: str = "strict",
                   weighted: bool = False, timeout: float = 120.0,
                   dump_aggregate=None, host: str = "127.0.0.1",
                   port: int = 0):
    """Drive a complete federation in-process; returns
    (ServerResult, {node_id: NodeResult})."""
    node_ids = sorted(node_kwargs_by_id)
    if transport == "sim":
        net = simulated_transport()
        server_eps, node_eps = [], {}
        for nid in node_ids:
            s_ep, n_ep = net.pair(f"server<-{nid}", f"node-{nid}")
            server_eps.append(s_ep)
            node_eps[nid] = n_ep
        server = FederationServer(server_eps, len(node_ids), strategy,
                                  rounds, matching_mode=matching_mode,
                                  weighted=weighted, timeout=timeout,
                                  dump_aggregate=dump_aggregate)
        nodes = [FederationNode(node_eps[nid], nid, timeout=timeout,
                                **node_kwargs_by_id[nid])
                 for nid in node_ids]
    elif transport == "tcp":
        listener = TcpListener(host, port)
        accepted = []

        def accept_all():
            for _ in node_ids:
                accepted.append(listener.accept(timeout=timeout))
            return accepted

        def connect(nid):
            return tcp_connect(host, listener.port, timeout=timeout)

        eps = _run_threads([accept_all]
                           + [lambda nid=nid: connect(nid)
                              for nid in node_ids])
        server = FederationServer(accepted, len(node_ids), strategy,
                                  rounds, matching_mode=matching_mode,
                                  weighted=weighted, timeout=timeout,
                                  dump_aggregate=dump_aggregate)
        nodes = [FederationNode(eps[1 + i], nid, timeout=timeout,
                                **node_kwargs_by_id[nid])
                 for i, nid in enumerate(node_ids)]
    else:
        raise UsageError(f"unknown transport {transport!r}")

    outcomes = _run_threads([server.run] + [n.run for n in nodes])
    if transport == "tcp":
        listener.close()
    server_result = outcomes[0]
    node_results = {r.node_id: r for r in outcomes[1:]}
    return server_result, node_results
