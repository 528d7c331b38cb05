"""Clients, reliability-weighted prompt exchange and the global training loop."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .config import Ablation, RunConfig
from .data import ClientDataset, Splits, gen_synthetic, load_jsonl, split
from .losses import Batch, LossWeights, client_loss
from .model import (
    TOWERS,
    AnswerHead,
    Backbone,
    ConfigError,
    HeadParams,
    PromptSet,
    answer_forward,
    encode,
)
from .numerics import Tensor

log = logging.getLogger(__name__)

EVAL_CHUNK = 256


class TrainingError(RuntimeError):
    pass


@dataclass
class ClientState:
    id: int
    local: dict[str, PromptSet]
    shared: dict[str, PromptSet]
    head: AnswerHead
    answer_vocab: list[int]
    data: Splits
    rng: np.random.Generator
    acc: float = 0.0

    @classmethod
    def init(cls, cid: int, data: Splits, config: RunConfig) -> "ClientState":
        mcfg = config.model
        init_rng = np.random.default_rng([config.seed, 0xC1, cid])
        local = {t: PromptSet.random(mcfg, t, init_rng) for t in TOWERS}
        shared = {t: PromptSet.zeros(mcfg, t, "shared") for t in TOWERS}
        n_answers = data.train.n_answers
        head = AnswerHead.init(mcfg, n_answers, init_rng)
        return cls(
            id=cid, local=local, shared=shared, head=head,
            answer_vocab=list(range(n_answers)), data=data,
            rng=np.random.default_rng([config.seed, 0xC2, cid]),
        )

    def message(self, towers: Sequence[str]) -> "PromptMessage":
        """Snapshot of what this client publishes: its local prompts and accuracy."""
        return PromptMessage(
            client=self.id, acc=float(self.acc),
            prompts={t: self.local[t].values.copy() for t in towers},
        )


@dataclass(frozen=True)
class PromptMessage:
    client: int
    acc: float
    prompts: dict[str, np.ndarray]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.prompts[t].reshape(-1) for t in TOWERS if t in self.prompts]) \
            if self.prompts else np.zeros(0)

    @property
    def payload_bytes(self) -> int:
        return sum(v.size * 8 for v in self.prompts.values()) + 8

    def to_bytes(self) -> bytes:
        header = {
            "client": self.client,
            "acc": self.acc,
            "prompts": {t: list(v.shape) for t, v in sorted(self.prompts.items())},
        }
        body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for _, v in sorted(self.prompts.items()))
        return json.dumps(header, sort_keys=True).encode() + b"\n" + body

    @classmethod
    def from_bytes(cls, raw: bytes) -> "PromptMessage":
        head, body = raw.split(b"\n", 1)
        header = json.loads(head)
        prompts, offset = {}, 0
        for t, shape in sorted(header["prompts"].items()):
            n = int(np.prod(shape)) * 8
            prompts[t] = np.frombuffer(body[offset:offset + n], dtype="<f8").reshape(shape).copy()
            offset += n
        return cls(client=header["client"], acc=header["acc"], prompts=prompts)


@dataclass(frozen=True)
class ReliabilityVector:
    peers: tuple[int, ...]
    weights: np.ndarray
    degenerate: bool = False

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.peers, self.weights.tolist()))


def reliability(t: int, messages: Sequence[PromptMessage]) -> ReliabilityVector:
    """Peer weights proportional to acc * max(0, cos(peer prompt, own prompt)).

    Falls back to uniform weights when every raw weight is zero.
    """
    if len(messages) < 2:
        raise ConfigError(f"reliability needs at least 2 clients, got {len(messages)}")
    by_id = {m.client: m for m in messages}
    own = by_id[t].flat()
    peers = tuple(m.client for m in messages if m.client != t)
    raw = np.array([by_id[i].acc * max(0.0, nx.cosine(by_id[i].flat(), own)) for i in peers])
    total = raw.sum()
    if not total > 0.0:
        return ReliabilityVector(peers, np.full(len(peers), 1.0 / len(peers)), degenerate=True)
    return ReliabilityVector(peers, raw / total)


def aggregate_shared(
    t: int, messages: Sequence[PromptMessage], eta: ReliabilityVector
) -> dict[str, PromptSet]:
    """Weighted sum of peers' local prompts, per tower; own prompt excluded."""
    by_id = {m.client: m for m in messages}
    towers = list(by_id[t].prompts)
    out = {}
    for tower in towers:
        shape = by_id[t].prompts[tower].shape
        acc = np.zeros(shape)
        for peer, w in zip(eta.peers, eta.weights):
            if peer == t:
                raise ConfigError("reliability vector includes the target client itself")
            vals = by_id[peer].prompts[tower]
            if vals.shape != shape:
                raise ConfigError(f"client {peer} {tower} prompt shape {vals.shape} != {shape}")
            acc += w * vals
        out[tower] = PromptSet(acc, tower, "shared")
    return out


@dataclass
class RoundResult:
    eta: dict[int, ReliabilityVector]
    shared: dict[int, dict[str, PromptSet]]
    payload_bytes: int


def communicate(messages: Sequence[PromptMessage]) -> RoundResult:
    """One synchronous round over immutable message snapshots."""
    messages = sorted(messages, key=lambda m: m.client)
    etas, shared = {}, {}
    for m in messages:
        eta = reliability(m.client, messages)
        etas[m.client] = eta
        shared[m.client] = aggregate_shared(m.client, messages, eta)
    return RoundResult(etas, shared, sum(m.payload_bytes for m in messages))


# ---------------------------------------------------------------------------
# local training


@dataclass
class StepRecord:
    loss: float
    ce: float
    ld: float
    reg: float


def make_batch(ds: ClientDataset, idx=None) -> Batch:
    if idx is not None:
        ds = ds.subset(idx)
    return Batch(ds.image, ds.question, ds.question_valid, ds.answer)


def _prompt_inputs(client: ClientState, ablation: Ablation, trainable: bool):
    towers = ablation.prompted_towers()
    local = {t: (Tensor(client.local[t].values, requires_grad=trainable) if t in towers else None) for t in TOWERS}
    shared = {t: (Tensor(client.shared[t].values) if t in towers else None) for t in TOWERS}
    return local, shared


def local_step(
    client: ClientState,
    batch: Batch,
    lr: float,
    weights: LossWeights,
    ablation: Ablation,
    backbone: Backbone,
    context: str = "",
) -> StepRecord:
    """One SGD step on the client's local prompts and head."""
    local, shared = _prompt_inputs(client, ablation, trainable=True)
    head = HeadParams.of(client.head, requires_grad=True)
    parts = client_loss(batch, backbone, local, shared, head, weights, train=True, rng=client.rng)
    loss = parts.total.item()
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss} for client {client.id} at lr={lr} {context}".strip())
    parts.total.backward()
    for t in TOWERS:
        if shared[t] is not None and shared[t].grad is not None:
            raise AssertionError("gradient reached a shared prompt")
    for name, p in head.tensors().items():
        getattr(client.head, name)[...] -= lr * p.grad
    for t, p in local.items():
        if p is not None and p.grad is not None:
            client.local[t].values[...] -= lr * p.grad
    return StepRecord(loss, parts.ce, parts.ld, parts.reg)


def predict(client: ClientState, ds: ClientDataset, backbone: Backbone, ablation: Ablation) -> np.ndarray:
    local, shared = _prompt_inputs(client, ablation, trainable=False)
    preds = []
    for start in range(0, len(ds), EVAL_CHUNK):
        b = make_batch(ds, np.arange(start, min(start + EVAL_CHUNK, len(ds))))
        img = encode(b.image_tokens, "image", local["image"], shared["image"], backbone)
        txt = encode(b.question_tokens, "text", local["text"], shared["text"], backbone, b.question_valid)
        logits = answer_forward(img, txt, client.head, train=False)
        preds.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(client: ClientState, split_name: str, backbone: Backbone, ablation: Ablation) -> float:
    """Argmax accuracy on the client's own val or test split; dropout off."""
    if split_name not in ("train", "val", "test"):
        raise ConfigError(f"unknown split {split_name!r}")
    ds: ClientDataset = getattr(client.data, split_name)
    if len(ds) == 0:
        raise ConfigError(f"client {client.id}: {split_name} split is empty")
    return float(np.mean(predict(client, ds, backbone, ablation) == ds.answer))


# ---------------------------------------------------------------------------
# history


HISTORY_FIELDS = ("epoch", "client", "train_loss", "ce", "ld", "reg", "val_acc", "test_acc", "lr")


@dataclass
class EpochRecord:
    epoch: int
    client: int
    train_loss: float
    ce: float
    ld: float
    reg: float
    val_acc: float
    test_acc: float
    lr: float

    def row(self) -> list[str]:
        return [str(self.epoch), str(self.client)] + [repr(float(getattr(self, k))) for k in HISTORY_FIELDS[2:]]


@dataclass
class CommRecord:
    epoch: int
    eta: list[list[float]]  # eta[t][i]; zero on the diagonal
    payload_bytes: int
    degenerate: list[int] = field(default_factory=list)


@dataclass
class RunHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    rounds: list[CommRecord] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = [",".join(HISTORY_FIELDS)]
        lines += [",".join(r.row()) for r in self.epochs]
        return "\n".join(lines) + "\n"

    def final_test_acc(self) -> dict[int, float]:
        last = max((r.epoch for r in self.epochs), default=0)
        return {r.client: r.test_acc for r in self.epochs if r.epoch == last}


@dataclass
class RunResult:
    history: RunHistory
    clients: list[ClientState]
    backbone: Backbone


class RunAborted(RuntimeError):
    def __init__(self, message: str, history: RunHistory):
        super().__init__(message)
        self.history = history


def prepare_datasets(config: RunConfig) -> list[Splits]:
    """Materialise each client's train/val/test splits from the data section."""
    data = config.data
    if data.source == "synth":
        datasets, _ = gen_synthetic(data.synth)
        ratios = data.synth.split_ratios
    else:
        datasets = [
            load_jsonl(p, config.model.image_vocab, config.model.text_vocab, config.model.question_len)
            for p in data.paths
        ]
        ratios = data.split_ratios
    return [split(ds, ratios, seed=config.seed * 1000 + t) for t, ds in enumerate(datasets)]


def init_clients(config: RunConfig, datasets: Sequence[Splits]) -> list[ClientState]:
    return [ClientState.init(t, d, config) for t, d in enumerate(datasets)]


def _local_phase(client: ClientState, config: RunConfig, backbone: Backbone, epoch: int, lr: float):
    s = config.schedule
    train = client.data.train
    recs = []
    for local_epoch in range(s.local_epochs):
        order = client.rng.permutation(len(train))
        for start in range(0, len(order), s.batch_size):
            batch = make_batch(train, order[start:start + s.batch_size])
            recs.append(local_step(client, batch, lr, config.losses, config.ablation, backbone,
                                   context=f"(epoch {epoch}, local epoch {local_epoch + 1})"))
    client.acc = evaluate(client, "val", backbone, config.ablation)
    test_acc = evaluate(client, "test", backbone, config.ablation)
    return (*np.mean([[r.loss, r.ce, r.ld, r.reg] for r in recs], axis=0), test_acc)


def run(
    config: RunConfig,
    datasets: Sequence[Splits],
    threads: int = 1,
    on_epoch: Callable[[RunHistory], None] | None = None,
    on_message: Callable[[bytes], None] | None = None,
    clients: list[ClientState] | None = None,
    backbone: Backbone | None = None,
) -> RunResult:
    """Global epochs of local training followed by one synchronous exchange.

    Validation and test accuracy are measured at the end of each local phase,
    i.e. on the model the client just trained, and the last epoch has no
    exchange, so the returned states are exactly the evaluated models.
    ``on_message`` sees every serialized inter-client message.
    """
    config.validate(check_paths=False)
    backbone = backbone or Backbone.init(config.model, config.seed)
    clients = clients if clients is not None else init_clients(config, datasets)
    ablation = config.ablation
    towers = ablation.prompted_towers()
    history = RunHistory()
    n = len(clients)
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for epoch in range(1, config.schedule.global_epochs + 1):
            lr = config.schedule.lr_at(epoch)
            try:
                if pool is None:
                    stats = [_local_phase(c, config, backbone, epoch, lr) for c in clients]
                else:
                    stats = list(pool.map(lambda c: _local_phase(c, config, backbone, epoch, lr), clients))
            except TrainingError as exc:
                raise RunAborted(str(exc), history) from exc

            # a round after the final epoch would produce shared prompts nobody trains with
            if ablation.communicates and epoch < config.schedule.global_epochs:
                wire = [c.message(towers).to_bytes() for c in clients]
                if on_message is not None:
                    for raw in wire:
                        on_message(raw)
                result = communicate([PromptMessage.from_bytes(raw) for raw in wire])
                for c in clients:
                    for t, ps in result.shared[c.id].items():
                        c.shared[t] = ps
                eta = np.zeros((n, n))
                for t, vec in result.eta.items():
                    for peer, w in vec.as_dict().items():
                        eta[t, peer] = w
                history.rounds.append(CommRecord(
                    epoch, eta.tolist(), result.payload_bytes,
                    [t for t, v in result.eta.items() if v.degenerate],
                ))

            for c, (loss, ce, ld, reg, test_acc) in zip(clients, stats):
                history.epochs.append(EpochRecord(epoch, c.id, float(loss), float(ce), float(ld), float(reg),
                                                  c.acc, test_acc, lr))
                log.info("epoch %d client %d loss %.4f val %.3f test %.3f", epoch, c.id, loss, c.acc, test_acc)
            if on_epoch is not None:
                on_epoch(history)
    finally:
        if pool is not None:
            pool.shutdown()
    return RunResult(history, clients, backbone)
