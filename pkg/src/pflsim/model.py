"""Two-tower prompt-conditioned encoder and the per-client answer head."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor

TOWERS = ("image", "text")
PAD = 0


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    blocks: int = 12  # r
    prompt_len: int = 4  # L
    width: int = 512  # D
    heads: int = 8  # m
    image_vocab: int = 64
    text_vocab: int = 32
    image_len: int = 6
    question_len: int = 3
    ffn_mult: int = 4
    head_hidden: int = 512
    head_dropout: float = 0.2
    init_std: float = 0.02
    embed_std: float = 0.02
    prompt_std: float = 0.02
    ln_eps: float = 1e-5

    def validate(self) -> "ModelConfig":
        if self.prompt_len < 0 or self.prompt_len % 2:
            raise ConfigError(f"model.prompt_len must be even and >= 0, got {self.prompt_len}")
        if self.blocks < 1 or self.width < 1 or self.heads < 1:
            raise ConfigError("model.blocks, model.width and model.heads must be positive")
        if self.width % self.heads:
            raise ConfigError(f"model.heads={self.heads} does not divide model.width={self.width}")
        if self.image_vocab < 1 or self.text_vocab < 2:
            raise ConfigError("vocabularies too small")
        if not 0.0 <= self.head_dropout < 1.0:
            raise ConfigError(f"model.head_dropout must be in [0, 1), got {self.head_dropout}")
        return self

    @property
    def max_len(self) -> int:
        return max(self.image_len, self.question_len)


def clip_scale_profile() -> ModelConfig:
    """Parameter-count stand-in for a CLIP-sized two-tower backbone (~1.5e8).

    Only used for accounting; never instantiated. The image vocabulary plays
    the role of a 96k-entry visual codebook so that both towers together land
    near the size of CLIP ViT-B/32.
    """
    return ModelConfig(blocks=12, prompt_len=4, width=512, heads=8,
                       image_vocab=96_000, text_vocab=49_408, image_len=50, question_len=77)


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class BlockWeights:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(f.name, getattr(self, f.name).data) for f in fields(self)]


@dataclass(frozen=True)
class Tower:
    embedding: Tensor
    blocks: tuple[BlockWeights, ...]


@dataclass(frozen=True)
class Backbone:
    """Frozen encoder weights; one instance is shared read-only by every client."""

    config: ModelConfig
    towers: dict[str, Tower]
    pos_enc: np.ndarray

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "Backbone":
        config.validate()
        rng = np.random.default_rng([seed, 0xB0])
        d, hid = config.width, config.width * config.ffn_mult

        def w(*shape):
            return Tensor(rng.normal(0.0, config.init_std, shape))

        towers = {}
        for tower in TOWERS:
            vocab = config.image_vocab if tower == "image" else config.text_vocab
            emb = Tensor(rng.normal(0.0, config.embed_std, (vocab, d)))
            blocks = tuple(
                BlockWeights(
                    ln1_g=Tensor(np.ones(d)), ln1_b=Tensor(np.zeros(d)),
                    wq=w(d, d), wk=w(d, d), wv=w(d, d), wo=w(d, d),
                    ln2_g=Tensor(np.ones(d)), ln2_b=Tensor(np.zeros(d)),
                    w1=w(d, hid), b1=Tensor(np.zeros(hid)),
                    w2=w(hid, d), b2=Tensor(np.zeros(d)),
                )
                for _ in range(config.blocks)
            )
            towers[tower] = Tower(embedding=emb, blocks=blocks)
        return cls(config=config, towers=towers, pos_enc=sinusoidal_positions(config.max_len, d))

    def named_arrays(self) -> Iterable[tuple[str, np.ndarray]]:
        for tower in TOWERS:
            tw = self.towers[tower]
            yield f"{tower}.embedding", tw.embedding.data
            for i, blk in enumerate(tw.blocks):
                for name, arr in blk.arrays():
                    yield f"{tower}.block{i}.{name}", arr
        yield "pos_enc", self.pos_enc

    def param_count(self) -> int:
        return sum(a.size for n, a in self.named_arrays() if n != "pos_enc")

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.named_arrays():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def has_gradients(self) -> bool:
        return any(
            getattr(blk, f.name).grad is not None
            for tw in self.towers.values()
            for blk in tw.blocks
            for f in fields(blk)
        ) or any(tw.embedding.grad is not None for tw in self.towers.values())


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass
class PromptSet:
    values: np.ndarray  # r x L x D
    modality: str
    kind: str  # "local" | "shared"

    def __post_init__(self):
        if self.modality not in TOWERS:
            raise ConfigError(f"unknown modality {self.modality!r}")
        if self.kind not in ("local", "shared"):
            raise ConfigError(f"unknown prompt kind {self.kind!r}")
        if self.values.ndim != 3 or self.values.shape[1] % 2:
            raise ConfigError(f"prompt values must be r x L x D with even L, got {self.values.shape}")

    @classmethod
    def zeros(cls, config: ModelConfig, modality: str, kind: str) -> "PromptSet":
        return cls(np.zeros((config.blocks, config.prompt_len, config.width)), modality, kind)

    @classmethod
    def random(cls, config: ModelConfig, modality: str, rng: np.random.Generator) -> "PromptSet":
        vals = rng.normal(0.0, config.prompt_std, (config.blocks, config.prompt_len, config.width))
        return cls(vals, modality, "local")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def copy(self) -> "PromptSet":
        return PromptSet(self.values.copy(), self.modality, self.kind)


@dataclass
class AnswerHead:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    dropout: float = 0.2

    @classmethod
    def init(cls, config: ModelConfig, n_answers: int, rng: np.random.Generator) -> "AnswerHead":
        d_in, hid = 2 * config.width, config.head_hidden
        return cls(
            w1=rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, hid)),
            b1=np.zeros(hid),
            w2=rng.normal(0.0, 1.0 / np.sqrt(hid), (hid, n_answers)),
            b2=np.zeros(n_answers),
            dropout=config.head_dropout,
        )

    @property
    def n_answers(self) -> int:
        return self.w2.shape[1]

    def param_count(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + self.b2.size

    def arrays(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def copy(self) -> "AnswerHead":
        return replace(self, w1=self.w1.copy(), b1=self.b1.copy(), w2=self.w2.copy(), b2=self.b2.copy())


@dataclass
class HeadParams:
    """Tensor view of an AnswerHead for one forward pass."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    dropout: float

    @classmethod
    def of(cls, head: AnswerHead, requires_grad: bool = False) -> "HeadParams":
        return cls(*(Tensor(a, requires_grad=requires_grad) for a in (head.w1, head.b1, head.w2, head.b2)),
                   dropout=head.dropout)

    def tensors(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


# ---------------------------------------------------------------------------
# forward pass


def _as_batch(tokens) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    return ids[None, :] if ids.ndim == 1 else ids


def embed(tokens, tower: str, backbone: Backbone) -> Tensor:
    """Token lookup plus sinusoidal positions; returns (B, S, D)."""
    ids = _as_batch(tokens)
    table = backbone.towers[tower].embedding
    vocab = table.shape[0]
    bad = np.argwhere((ids < 0) | (ids >= vocab))
    if bad.size:
        b, s = (int(i) for i in bad[0])
        raise InputError(f"{tower} token {ids[b, s]} at index ({b}, {s}) outside vocabulary of {vocab}")
    seq = ids.shape[1]
    if seq > backbone.pos_enc.shape[0]:
        raise InputError(f"{tower} sequence length {seq} exceeds positional table {backbone.pos_enc.shape[0]}")
    return nx.take_rows(table, ids) + Tensor(backbone.pos_enc[:seq])


@dataclass
class Prefix:
    """Key/value prefix rows for one block; any half may be ``None``."""

    local_k: Tensor | None = None
    local_v: Tensor | None = None
    shared_k: Tensor | None = None
    shared_v: Tensor | None = None

    def keys(self) -> list[Tensor]:
        return [t for t in (self.local_k, self.shared_k) if t is not None and t.shape[0] > 0]

    def values(self) -> list[Tensor]:
        return [t for t in (self.local_v, self.shared_v) if t is not None and t.shape[0] > 0]


def split_prompt(prompt: Tensor | PromptSet, block: int) -> tuple[Tensor, Tensor]:
    """Key half (first L/2 rows) and value half (last L/2 rows) of one block slice."""
    values = prompt if isinstance(prompt, Tensor) else Tensor(prompt.values)
    r, length = values.shape[0], values.shape[1]
    if not 0 <= block < r:
        raise IndexError(f"block {block} out of range for {r} prompt blocks")
    half = length // 2
    return values[block, :half], values[block, half:]


def block_prefix(local: Tensor | None, shared: Tensor | None, block: int) -> Prefix:
    pre = Prefix()
    if local is not None:
        pre.local_k, pre.local_v = split_prompt(local, block)
    if shared is not None:
        pre.shared_k, pre.shared_v = split_prompt(shared, block)
    return pre


def key_mask(valid: np.ndarray | None, batch: int, seq: int, n_prefix: int) -> np.ndarray | None:
    """Additive (B,1,1,P+S) mask; prompt positions are always visible."""
    if valid is None:
        return None
    valid = np.asarray(valid, dtype=bool).reshape(batch, seq)
    if valid.all():
        return None
    full = np.concatenate([np.ones((batch, n_prefix), dtype=bool), valid], axis=1)
    return np.where(full, 0.0, nx.MASK_VALUE)[:, None, None, :]


def attention_heads(
    h: Tensor, prefix: Prefix | None, valid: np.ndarray | None, blk: BlockWeights, heads: int
) -> Tensor:
    """Per-head attention outputs (B, m, S, D/m) before the output projection."""
    b, s, d = h.shape
    if d % heads:
        raise ConfigError(f"{heads} heads do not divide width {d}")
    prefix = prefix or Prefix()
    pk, pv = prefix.keys(), prefix.values()
    n_pre = sum(t.shape[0] for t in pk)
    if sum(t.shape[0] for t in pv) != n_pre:
        raise DimensionError("key and value prefixes differ in length")
    for t in pk + pv:
        if t.shape[-1] != d:
            raise DimensionError(f"prefix width {t.shape[-1]} != model width {d}")

    q = nx.linear(h, blk.wq)
    k = nx.linear(h, blk.wk)
    v = nx.linear(h, blk.wv)
    k_pre = v_pre = None
    if n_pre:
        # prompts enter before the frozen projections and carry no position
        pk_all = pk[0] if len(pk) == 1 else nx.concat(pk, axis=0)
        pv_all = pv[0] if len(pv) == 1 else nx.concat(pv, axis=0)
        k_pre = nx.linear(pk_all, blk.wk)
        v_pre = nx.linear(pv_all, blk.wv)
    return nx.attention(q, k, v, heads, key_mask(valid, b, s, n_pre), k_pre, v_pre)


def prefix_mha(
    h: Tensor, prefix: Prefix | None, valid: np.ndarray | None, blk: BlockWeights, heads: int
) -> Tensor:
    per_head = attention_heads(h, prefix, valid, blk, heads)
    b, _, s, dk = per_head.shape
    merged = nx.reshape(nx.transpose(per_head, (0, 2, 1, 3)), (b, s, heads * dk))
    return nx.linear(merged, blk.wo)


def pra_block(
    x: Tensor, prefix: Prefix | None, valid: np.ndarray | None, blk: BlockWeights,
    heads: int, eps: float = 1e-5,
) -> Tensor:
    x = x + prefix_mha(nx.layer_norm(x, blk.ln1_g, blk.ln1_b, eps), prefix, valid, blk, heads)
    hidden = nx.gelu(nx.linear(nx.layer_norm(x, blk.ln2_g, blk.ln2_b, eps), blk.w1, blk.b1))
    return x + nx.linear(hidden, blk.w2, blk.b2)


def encode(
    tokens,
    tower: str,
    local: Tensor | PromptSet | None,
    shared: Tensor | PromptSet | None,
    backbone: Backbone,
    valid: np.ndarray | None = None,
) -> Tensor:
    """Embed, run every pRA block, mean-pool real positions -> (B, D).

    ``local``/``shared`` may be ``None`` to run a block without that prefix.
    """
    cfg = backbone.config
    local = _prompt_tensor(local, tower, "local", cfg)
    shared = _prompt_tensor(shared, tower, "shared", cfg)
    ids = _as_batch(tokens)
    b, s = ids.shape
    if valid is not None:
        valid = np.asarray(valid, dtype=bool).reshape(b, s)
    x = embed(ids, tower, backbone)
    for i, blk in enumerate(backbone.towers[tower].blocks):
        pre = block_prefix(local, shared, i)
        x = pra_block(x, pre, valid, blk, cfg.heads, cfg.ln_eps)
    if valid is None:
        return nx.mean(x, axis=1)
    weights = valid.astype(np.float64)
    counts = weights.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise InputError(f"{tower} sequence with no real tokens")
    return nx.sum_(x * Tensor((weights / counts)[:, :, None]), axis=1)


def _prompt_tensor(p, tower, kind, cfg) -> Tensor | None:
    if p is None:
        return None
    if isinstance(p, PromptSet):
        if p.modality != tower:
            raise ConfigError(f"{p.modality} prompt passed to the {tower} tower")
        p = Tensor(p.values)
    if p.shape[0] != cfg.blocks or p.shape[2] != cfg.width:
        raise DimensionError(f"{kind} {tower} prompt shape {p.shape} does not fit r={cfg.blocks}, D={cfg.width}")
    return p


def answer_forward(
    img_feat: Tensor,
    txt_feat: Tensor,
    head: HeadParams | AnswerHead,
    train: bool = False,
    rng: np.random.Generator | None = None,
    mask: nx.DropoutMask | None = None,
) -> Tensor:
    """concat -> affine -> GELU -> dropout -> affine; raw logits."""
    if isinstance(head, AnswerHead):
        head = HeadParams.of(head)
    if img_feat.shape[-1] != txt_feat.shape[-1] or img_feat.shape[-1] * 2 != head.w1.shape[0]:
        raise DimensionError(
            f"answer head expects 2x{head.w1.shape[0] // 2} features, got {img_feat.shape} and {txt_feat.shape}"
        )
    joined = nx.concat([img_feat, txt_feat], axis=-1)
    hidden = nx.gelu(nx.linear(joined, head.w1, head.b1))
    hidden = nx.dropout(hidden, head.dropout, rng=rng, train=train, mask=mask)
    return nx.linear(hidden, head.w2, head.b2)


# ---------------------------------------------------------------------------
# parameter accounting


def backbone_param_count(cfg: ModelConfig) -> int:
    d, hid = cfg.width, cfg.width * cfg.ffn_mult
    per_block = 4 * d * d + 2 * d * hid + hid + d + 4 * d
    return 2 * cfg.blocks * per_block + (cfg.image_vocab + cfg.text_vocab) * d


def head_param_count(cfg: ModelConfig, n_answers: int) -> int:
    return 2 * cfg.width * cfg.head_hidden + cfg.head_hidden + cfg.head_hidden * n_answers + n_answers


@dataclass(frozen=True)
class ParamAccount:
    backbone_params: int
    prompt_params_per_client: int
    head_params: int
    payload_ratio: float

    def as_dict(self) -> dict:
        return {
            "backbone_params": self.backbone_params,
            "prompt_params_per_client": self.prompt_params_per_client,
            "head_params": self.head_params,
            "payload_ratio": self.payload_ratio,
        }


def count_params(
    backbone: Backbone | ModelConfig, prompted_towers: int = 2, n_answers: int | Sequence[int] = 2
) -> ParamAccount:
    """Shared-payload size versus the full per-client model.

    ``n_answers`` is one answer-vocabulary size or one per client; with several
    heads the head term is their mean so the ratio describes a typical client.
    """
    cfg = backbone.config if isinstance(backbone, Backbone) else backbone
    bb = backbone.param_count() if isinstance(backbone, Backbone) else backbone_param_count(cfg)
    sizes = [n_answers] if isinstance(n_answers, int) else list(n_answers)
    head = int(round(np.mean([head_param_count(cfg, n) for n in sizes])))
    prompts = prompted_towers * cfg.blocks * cfg.prompt_len * cfg.width
    total = bb + head + prompts
    return ParamAccount(bb, prompts, head, prompts / total if total else 0.0)


# ---------------------------------------------------------------------------
# raw tensor files: one JSON header line, then little-endian f64 payload


def write_tensor(path: str | Path, array: np.ndarray, header: dict) -> None:
    arr = np.ascontiguousarray(array, dtype="<f8")
    meta = dict(header)
    meta["shape"] = list(arr.shape)
    with open(path, "wb") as fh:
        fh.write(json.dumps(meta, sort_keys=True).encode() + b"\n")
        fh.write(arr.tobytes())


def read_tensor(path: str | Path) -> tuple[dict, np.ndarray]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        payload = fh.read()
    shape = tuple(header["shape"])
    arr = np.frombuffer(payload, dtype="<f8")
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise InputError(f"{path}: payload has {arr.size} values, header shape {shape}")
    return header, arr.reshape(shape).astype(np.float64)


def write_prompt(path: str | Path, prompt: PromptSet, client: int) -> None:
    write_tensor(path, prompt.values, {"client": client, "modality": prompt.modality, "kind": prompt.kind})


def read_prompt(path: str | Path) -> tuple[int, PromptSet]:
    header, arr = read_tensor(path)
    return int(header["client"]), PromptSet(arr, header["modality"], header["kind"])
