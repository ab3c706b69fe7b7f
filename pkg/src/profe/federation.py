"""Synchronous full-mesh federation: local training, exchange, aggregation, evaluation."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .codec import (Algorithm, ByteLedger, QuantMode, RoundMessage, build_message, decode_message,
                    encode_message)
from .config import ExperimentConfig
from .data import (LabeledDataset, gen_blobs, load_mnist, partition, split_global_test, stratified_subset,
                   train_test_split)
from .distill import DistillConfig, decay_alpha, student_loss, teacher_loss
from .errors import ConfigError, DataError, ProfeError, ProtocolError
from .functional import LabelBatch, cross_entropy
from .metrics import MetricsRecord, macro_f1
from .model import SplitModel, forward_split, mlp_split_model, sgd_step
from .prototype import GlobalPrototypeTable, aggregate_global, compute_local_prototypes, predict_nearest_batch
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

SHARES_MODEL = {Algorithm.PROFE, Algorithm.FEDAVG}
SHARES_PROTOTYPES = {Algorithm.PROFE, Algorithm.FEDPROTO}


class ExperimentError(ProfeError, RuntimeError):
    def __init__(self, msg: str, node: int | None, round_index: int):
        where = f"round {round_index}" + (f", node {node}" if node is not None else "")
        super().__init__(f"{where}: {msg}")
        self.node = node
        self.round_index = round_index


@dataclass(frozen=True)
class Topology:
    n_nodes: int
    kind: str = "full"

    def neighbors(self, node: int) -> list[int]:
        return [j for j in range(self.n_nodes) if j != node]

    def adjacency(self) -> np.ndarray:
        return ~np.eye(self.n_nodes, dtype=bool)


@dataclass(frozen=True)
class RoundPlan:
    rounds: int
    epochs: int
    algorithm: Algorithm

    def __post_init__(self):
        if self.rounds < 1 or self.epochs < 1:
            raise ConfigError(f"rounds and epochs must be >= 1, got {self.rounds}, {self.epochs}")


@dataclass
class Node:
    """One participant. ``model`` is the shared network (the student under ProFe)."""

    node_id: int
    algorithm: Algorithm
    model: SplitModel
    train: LabeledDataset
    test: LabeledDataset
    distill: DistillConfig = field(default_factory=DistillConfig)
    teacher: SplitModel | None = None
    global_protos: GlobalPrototypeTable = field(default_factory=GlobalPrototypeTable)
    lr: float = 0.05
    batch_size: int = 8
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    divide_protos_by_nodes: bool = False
    last_loss: float = float("nan")

    @property
    def student(self) -> SplitModel:
        return self.model


def local_train(node: Node, epochs: int) -> Node:
    """Run ``epochs`` passes of minibatch SGD over the node's training shard."""
    data = node.train
    if len(data) == 0:
        raise ConfigError(f"node {node.node_id} has an empty training shard")
    n_classes = node.model.n_classes
    total, batches = 0.0, 0
    for _ in range(epochs):
        order = node.rng.permutation(len(data))
        for start in range(0, len(order), node.batch_size):
            idx = order[start:start + node.batch_size]
            x = Tensor(data.inputs[idx])
            labels = LabelBatch(data.labels[idx], n_classes)
            loss = _train_batch(node, x, labels)
            total += loss
            batches += 1
    node.last_loss = total / batches
    if not np.isfinite(node.last_loss):
        raise DataError(f"node {node.node_id} training loss diverged ({node.last_loss})")
    return node


def _train_batch(node: Node, x: Tensor, labels: LabelBatch) -> float:
    if node.algorithm is Algorithm.FEDAVG:
        _, logits = forward_split(node.model, x)
        loss = cross_entropy(logits, labels)
    elif node.algorithm is Algorithm.FEDPROTO:
        r, logits = forward_split(node.model, x)
        loss = teacher_loss(logits, r, labels, node.global_protos, node.distill.beta_s)
    else:
        y_t = repr_t = None
        if node.distill.alpha_s > 0 and node.teacher is not None:
            repr_t, y_t = forward_split(node.teacher, x)
            t_loss = teacher_loss(y_t, repr_t, labels, node.global_protos, node.distill.beta_t)
            t_loss.backward()
            sgd_step(node.teacher, node.lr)
            # the student distills from the pre-step teacher outputs of this batch
        r, logits = forward_split(node.model, x)
        loss = student_loss(logits, y_t, r, repr_t, labels, node.global_protos, node.distill)
    value = loss.item()
    loss.backward()
    sgd_step(node.model, node.lr)
    return value


def make_message(node: Node, round_index: int, mode: QuantMode) -> RoundMessage:
    """What ``node`` broadcasts after local training."""
    params: list[np.ndarray] = []
    protos = []
    if node.algorithm in SHARES_MODEL:
        params = node.model.state()
    if node.algorithm in SHARES_PROTOTYPES:
        protos = compute_local_prototypes(node.model, node.train.inputs, node.train.labels)
    if node.algorithm is Algorithm.FEDAVG:
        mode = QuantMode.FLOAT32
    return build_message(node.node_id, round_index, node.algorithm, params, protos, mode)


@dataclass
class Exchange:
    inboxes: dict[int, list[RoundMessage]]
    own: dict[int, RoundMessage]
    errors: dict[int, int]


def broadcast_round(messages: dict[int, RoundMessage], topology: Topology, ledger: ByteLedger,
                    tamper: Callable[[int, int, bytes], bytes] | None = None) -> Exchange:
    """Deliver every node's encoded message to each neighbor.

    ``tamper(sender, receiver, payload)`` may rewrite bytes in flight (fault
    injection). Undecodable messages are dropped and counted per receiver.
    """
    inboxes: dict[int, list[RoundMessage]] = {i: [] for i in messages}
    errors = {i: 0 for i in messages}
    own = {}
    for sender in sorted(messages):
        payload = encode_message(messages[sender])
        own[sender] = decode_message(payload)
        for receiver in topology.neighbors(sender):
            data = tamper(sender, receiver, payload) if tamper else payload
            ledger.record_send(sender, len(data))
            ledger.record_receive(receiver, len(data))
            try:
                inboxes[receiver].append(decode_message(data))
            except ProtocolError as exc:
                errors[receiver] += 1
                log.warning("node %d dropped message from %d: %s", receiver, sender, exc)
    return Exchange(inboxes, own, errors)


def average_parameters(param_sets: Sequence[Sequence[np.ndarray]]) -> list[np.ndarray]:
    """Elementwise unweighted mean, accumulated in float64 in the given order."""
    if not param_sets:
        raise ProtocolError("nothing to average")
    shapes = [a.shape for a in param_sets[0]]
    for i, ps in enumerate(param_sets[1:], 1):
        if [a.shape for a in ps] != shapes:
            raise ProtocolError(f"parameter set {i} has architecture {[a.shape for a in ps]}, expected {shapes}")
    out = []
    for k in range(len(shapes)):
        acc = np.zeros(shapes[k], dtype=np.float64)
        for ps in param_sets:
            acc += ps[k]
        out.append((acc / len(param_sets)).astype(np.float32))
    return out


def aggregate_models(own: SplitModel, received: Sequence[Sequence[np.ndarray]]) -> SplitModel:
    """New model whose parameters are the mean over ``own`` and every received set."""
    merged = own.clone()
    merged.load_state(average_parameters([own.state(), *received]))
    return merged


def aggregate_node(node: Node, own: RoundMessage, inbox: Sequence[RoundMessage]) -> None:
    """Fold this round's messages into ``node``.

    The node's own contribution is taken as it went on the wire, and all
    contributions are ordered by sender, so every node computes the same mean.
    """
    msgs = sorted([own, *inbox], key=lambda m: m.sender)
    if node.algorithm in SHARES_MODEL:
        node.model.load_state(average_parameters([m.parameters() for m in msgs]))
    if node.algorithm in SHARES_PROTOTYPES:
        node.global_protos = aggregate_global([(m.sender, m.local_prototypes()) for m in msgs],
                                              divide_protos_by_nodes=node.divide_protos_by_nodes)


def predict(node: Node, inputs: np.ndarray) -> np.ndarray:
    """Nearest global prototype once a table exists (ProFe/FedProto), logits argmax otherwise."""
    with no_grad():
        r, logits = forward_split(node.model, Tensor(inputs))
    if node.algorithm in SHARES_PROTOTYPES and len(node.global_protos):
        return predict_nearest_batch(r.data, node.global_protos)
    return np.argmax(logits.data, axis=1)


def evaluate(node: Node, data: LabeledDataset) -> float:
    return macro_f1(predict(node, data.inputs), data.labels, data.n_classes)


# -- experiment driver ---------------------------------------------------

@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list[MetricsRecord]
    ledger: ByteLedger
    nodes: list[Node]
    dropped_messages: int
    wall_seconds: float
    alpha_history: list[float]

    def final_mean_f1(self) -> float:
        last = max(r.round for r in self.records)
        return float(np.mean([r.macro_f1 for r in self.records if r.round == last]))

    def round_mean_f1(self) -> list[float]:
        rounds = sorted({r.round for r in self.records})
        return [float(np.mean([x.macro_f1 for x in self.records if x.round == k])) for k in rounds]

    @property
    def total_bytes(self) -> int:
        return self.ledger.total_sent + self.ledger.total_received


def load_dataset(cfg: ExperimentConfig) -> LabeledDataset:
    if cfg.dataset == "mnist":
        ds = load_mnist(cfg.data_dir)
    else:
        ds = gen_blobs(cfg.blob_classes, cfg.blob_per_class, cfg.blob_dim, cfg.blob_spread, seed=cfg.seed)
    if cfg.subset is not None:
        ds = stratified_subset(ds, cfg.subset, seed=cfg.seed)
    return ds


def build_nodes(cfg: ExperimentConfig, pool: LabeledDataset) -> list[Node]:
    shards = partition(pool, cfg.partition_spec)
    algo = cfg.algo
    # ProFe shares the student; the baselines share / keep the teacher-sized network
    shared_hidden = cfg.student_hidden if algo is Algorithm.PROFE else cfg.teacher_hidden
    init = mlp_split_model(pool.width, shared_hidden, cfg.repr_width, pool.n_classes,
                           seed=np.random.default_rng([cfg.seed, 4]))
    nodes = []
    for i, shard in enumerate(shards):
        train, test = train_test_split(shard, cfg.local_train_fraction, seed=[cfg.seed, 2, i])
        teacher = None
        if algo is Algorithm.PROFE:
            teacher = mlp_split_model(pool.width, cfg.teacher_hidden, cfg.repr_width, pool.n_classes,
                                      seed=np.random.default_rng([cfg.seed, 5, i]))
        nodes.append(Node(i, algo, init.clone(), train, test, cfg.distill, teacher,
                          lr=cfg.lr, batch_size=cfg.batch_size, rng=np.random.default_rng([cfg.seed, 3, i]),
                          divide_protos_by_nodes=cfg.divide_protos_by_nodes))
    return nodes


def run_experiment(cfg: ExperimentConfig, on_round: Callable[[int, list[Node]], None] | None = None,
                   tamper: Callable[[int, int, bytes], bytes] | None = None) -> ExperimentResult:
    """Run ``cfg.rounds`` synchronous rounds and collect per-node metrics.

    Each round: local training, prototype computation and broadcast,
    aggregation, KD-weight decay, then macro F1 on the global test split.
    """
    RoundPlan(cfg.rounds, cfg.epochs, cfg.algo)
    started = time.perf_counter()
    ds = load_dataset(cfg)
    pool, global_test = split_global_test(ds, cfg.test_fraction, seed=[cfg.seed, 1])
    nodes = build_nodes(cfg, pool)
    topology = Topology(len(nodes))
    ledger = ByteLedger()
    elapsed = {n.node_id: 0.0 for n in nodes}
    records: list[MetricsRecord] = []
    alpha_history = []
    dropped = 0
    mode = cfg.quant_mode
    log.info("%s: %d nodes, %d rounds x %d epochs, partition %s, %d train samples/node",
             cfg.algorithm, len(nodes), cfg.rounds, cfg.epochs, cfg.partition, len(nodes[0].train))

    def train_and_pack(node: Node, rnd: int) -> tuple[RoundMessage, float]:
        t0 = time.perf_counter()
        try:
            local_train(node, cfg.epochs)
            msg = make_message(node, rnd, mode)
        except ProfeError as exc:
            raise ExperimentError(str(exc), node.node_id, rnd) from exc
        return msg, time.perf_counter() - t0

    pool_exec = None if cfg.sequential or cfg.workers == 1 else ThreadPoolExecutor(cfg.workers)
    try:
        for rnd in range(1, cfg.rounds + 1):
            if pool_exec is None:
                results = [train_and_pack(n, rnd) for n in nodes]
            else:
                results = list(pool_exec.map(lambda n: train_and_pack(n, rnd), nodes))
            messages = {n.node_id: msg for n, (msg, _) in zip(nodes, results)}
            for n, (_, dt) in zip(nodes, results):
                elapsed[n.node_id] += dt

            try:
                exchange = broadcast_round(messages, topology, ledger, tamper)
            except ProfeError as exc:
                raise ExperimentError(str(exc), None, rnd) from exc
            dropped += sum(exchange.errors.values())
            for n in nodes:
                t0 = time.perf_counter()
                try:
                    aggregate_node(n, exchange.own[n.node_id], exchange.inboxes[n.node_id])
                except ProfeError as exc:
                    raise ExperimentError(str(exc), n.node_id, rnd) from exc
                if n.algorithm is Algorithm.PROFE:
                    n.distill = decay_alpha(n.distill)
                elapsed[n.node_id] += time.perf_counter() - t0
            alpha_history.append(nodes[0].distill.alpha_s)

            for n in nodes:
                f1 = evaluate(n, global_test)
                records.append(MetricsRecord(rnd, n.node_id, f1, ledger.bytes_sent(n.node_id),
                                             ledger.bytes_received(n.node_id),
                                             round(elapsed[n.node_id], 6) if cfg.timing else 0.0))
            log.info("round %d: mean F1 %.4f, loss %.4f, alpha_s %.4g", rnd,
                     np.mean([r.macro_f1 for r in records[-len(nodes):]]),
                     np.mean([n.last_loss for n in nodes]), nodes[0].distill.alpha_s)
            if on_round is not None:
                on_round(rnd, nodes)
    finally:
        if pool_exec is not None:
            pool_exec.shutdown()

    return ExperimentResult(cfg, records, ledger, nodes, dropped, time.perf_counter() - started, alpha_history)
