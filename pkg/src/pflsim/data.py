"""Synthetic heterogeneous two-modality QA data, JSONL I/O and splitting.

An "image" is a row of attribute tokens, one slot per attribute; a question
names one slot; the answer is the value in that slot, written in the client's
own answer vocabulary. All clients follow the same underlying rule but see it
through different token maps (feature drift) and value marginals (label skew).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .model import PAD, ConfigError, InputError

SLAKE_SIZES = (734, 829, 461, 335)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    image_tokens: tuple[int, ...]
    question_tokens: tuple[int, ...]  # real tokens only, no padding
    answer: int


@dataclass
class ClientDataset:
    image: np.ndarray  # (N, S_img) int64
    question: np.ndarray  # (N, S_q) int64, PAD-filled on the right
    answer: np.ndarray  # (N,) int64
    n_answers: int
    name: str = ""

    def __post_init__(self):
        self.answer = np.asarray(self.answer, dtype=np.int64).reshape(-1)
        self.image = np.asarray(self.image, dtype=np.int64)
        self.question = np.asarray(self.question, dtype=np.int64)
        if self.image.ndim != 2 or self.question.ndim != 2:
            raise DatasetError(f"image and question arrays must be 2-D, got {self.image.shape}, {self.question.shape}")
        if not len(self.image) == len(self.question) == len(self.answer):
            raise DatasetError(
                f"row counts differ: {len(self.image)} images, {len(self.question)} questions, "
                f"{len(self.answer)} answers"
            )

    def __len__(self) -> int:
        return len(self.answer)

    @property
    def question_valid(self) -> np.ndarray:
        return self.question != PAD

    def subset(self, idx) -> "ClientDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return ClientDataset(self.image[idx], self.question[idx], self.answer[idx], self.n_answers, self.name)

    def samples(self) -> Iterator[Sample]:
        for img, q, a in zip(self.image, self.question, self.answer):
            yield Sample(tuple(int(t) for t in img), tuple(int(t) for t in q if t != PAD), int(a))

    def label_distribution(self) -> np.ndarray:
        return np.bincount(self.answer, minlength=self.n_answers) / max(len(self), 1)

    def equals(self, other: "ClientDataset") -> bool:
        return (
            self.n_answers == other.n_answers
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.question, other.question)
            and np.array_equal(self.answer, other.answer)
        )


@dataclass
class Splits:
    train: ClientDataset
    val: ClientDataset
    test: ClientDataset


@dataclass
class SynthSpec:
    sizes: tuple[int, ...] = SLAKE_SIZES
    n_attrs: int = 6
    n_values: int = 4
    image_vocab: int = 64
    text_vocab: int = 32
    question_len: int = 3
    overlap: float = 0.5
    label_concentration: float = 1.0
    split_ratios: tuple[float, ...] = (0.7, 0.15, 0.15)
    seed: int = 0

    @property
    def n_clients(self) -> int:
        return len(self.sizes)

    def validate(self) -> "SynthSpec":
        if self.n_clients < 1 or any(n < 1 for n in self.sizes):
            raise ConfigError(f"data.sizes must be positive, got {list(self.sizes)}")
        if not 0.0 <= self.overlap <= 1.0:
            raise ConfigError(f"data.overlap must be in [0, 1], got {self.overlap}")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ConfigError(f"data.split_ratios must sum to 1, got {list(self.split_ratios)}")
        if self.n_attrs < 1 or self.n_values < 2:
            raise ConfigError("need at least one attribute and two values per attribute")
        if self.question_len < 1:
            raise ConfigError("data.question_len must be >= 1")
        if self.text_vocab < 1 + self.n_attrs + 1:
            raise ConfigError(
                f"data.text_vocab={self.text_vocab} too small for pad + {self.n_attrs} slot words + a filler"
            )
        if self.image_tokens_needed() > self.image_vocab:
            raise ConfigError(
                f"data.image_vocab={self.image_vocab} too small: overlap {self.overlap} "
                f"with {self.n_clients} clients needs {self.image_tokens_needed()} tokens"
            )
        if self.label_concentration <= 0:
            raise ConfigError("data.label_concentration must be > 0")
        return self

    def n_shared_pairs(self) -> int:
        return int(round(self.overlap * self.n_attrs * self.n_values))

    def image_tokens_needed(self) -> int:
        pairs = self.n_attrs * self.n_values
        shared = self.n_shared_pairs()
        return shared + self.n_clients * (pairs - shared)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sizes"] = list(self.sizes)
        d["split_ratios"] = list(self.split_ratios)
        return d


@dataclass(frozen=True)
class ClientMap:
    """Ground-truth decoding tables for one client."""

    token_of: np.ndarray  # (n_attrs, n_values) -> image token
    slot_word: np.ndarray  # (n_attrs,) -> text token naming the slot
    answer_of: np.ndarray  # (n_values,) -> client label
    value_marginal: np.ndarray  # (n_values,)


def _client_maps(spec: SynthSpec, rng: np.random.Generator) -> list[ClientMap]:
    k, v = spec.n_attrs, spec.n_values
    pairs = k * v
    shared_pairs = rng.permutation(pairs)[: spec.n_shared_pairs()]
    tokens = rng.permutation(spec.image_vocab)
    cursor = len(shared_pairs)
    shared_token = dict(zip(shared_pairs.tolist(), tokens[:cursor].tolist()))
    # value -> latent answer, sampled once and shared by every client
    latent = rng.permutation(v)
    maps = []
    for _ in range(spec.n_clients):
        token_of = np.empty(pairs, dtype=np.int64)
        for p in range(pairs):
            if p in shared_token:
                token_of[p] = shared_token[p]
            else:
                token_of[p] = tokens[cursor]
                cursor += 1
        relabel = rng.permutation(v)
        marginal = rng.dirichlet(np.full(v, spec.label_concentration))
        maps.append(
            ClientMap(
                token_of=token_of.reshape(k, v),
                slot_word=np.arange(1, k + 1),
                answer_of=relabel[latent],
                value_marginal=marginal,
            )
        )
    return maps


def gen_synthetic(spec: SynthSpec) -> tuple[list[ClientDataset], list[ClientMap]]:
    spec.validate()
    rng = np.random.default_rng([spec.seed, 0xDA7A])
    maps = _client_maps(spec, rng)
    fillers = np.arange(spec.n_attrs + 1, spec.text_vocab)
    datasets = []
    for t, (n, cmap) in enumerate(zip(spec.sizes, maps)):
        crng = np.random.default_rng([spec.seed, 0xDA7A, t])
        values = crng.choice(spec.n_values, size=(n, spec.n_attrs), p=cmap.value_marginal)
        image = cmap.token_of[np.arange(spec.n_attrs)[None, :], values]
        slots = crng.integers(0, spec.n_attrs, size=n)
        question = np.full((n, spec.question_len), PAD, dtype=np.int64)
        for j in range(n):
            n_real = int(crng.integers(1, spec.question_len + 1))
            words = list(crng.choice(fillers, size=n_real - 1))
            words.insert(int(crng.integers(0, n_real)), int(cmap.slot_word[slots[j]]))
            question[j, :n_real] = words
        answer = cmap.answer_of[values[np.arange(n), slots]]
        datasets.append(ClientDataset(image, question, answer, spec.n_values, name=f"client{t}"))
    return datasets, maps


def answer_oracle(sample: Sample, client_map: ClientMap) -> int:
    """Recompute the label from the sample's tokens using the client's tables."""
    slot_words = {int(w): s for s, w in enumerate(client_map.slot_word)}
    slots = [slot_words[t] for t in sample.question_tokens if t in slot_words]
    if len(slots) != 1:
        raise DatasetError(f"question {sample.question_tokens} names {len(slots)} slots")
    slot = slots[0]
    token = sample.image_tokens[slot]
    hits = np.flatnonzero(client_map.token_of[slot] == token)
    if hits.size != 1:
        raise DatasetError(f"image token {token} is not a value of slot {slot}")
    return int(client_map.answer_of[hits[0]])


def split(dataset: ClientDataset, ratios: Sequence[float] = (0.7, 0.15, 0.15), seed: int = 0) -> Splits:
    """Seeded shuffle, then contiguous train/val/test blocks.

    Two ratios mean train/test only; validation then reuses the train block.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) not in (2, 3) or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be 2 or 3 non-negative numbers summing to 1, got {list(ratios)}")
    n = len(dataset)
    order = np.random.default_rng([seed, 0x5B17]).permutation(n)
    counts = [int(np.floor(r * n + 1e-9)) for r in ratios]
    counts[0] += n - sum(counts)
    bounds = np.cumsum(counts)[:-1]
    parts = np.split(order, bounds)
    if len(ratios) == 2:
        parts = [parts[0], parts[0], parts[1]]
    names = ("train", "val", "test")
    for name, idx in zip(names, parts):
        if idx.size == 0:
            raise ConfigError(f"{dataset.name or 'dataset'}: {name} split is empty ({n} samples, ratios {list(ratios)})")
    return Splits(*(dataset.subset(idx) for idx in parts))


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


# ---------------------------------------------------------------------------
# JSONL


def write_jsonl(path: str | Path, dataset: ClientDataset) -> None:
    with open(path, "w") as fh:
        for s in dataset.samples():
            fh.write(json.dumps({
                "image_tokens": list(s.image_tokens),
                "question_tokens": list(s.question_tokens),
                "answer": s.answer,
            }) + "\n")


def load_jsonl(
    path: str | Path,
    image_vocab: int | None = None,
    text_vocab: int | None = None,
    question_len: int | None = None,
    n_answers: int | None = None,
) -> ClientDataset:
    path = Path(path)
    images, questions, answers = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                img = [int(t) for t in obj["image_tokens"]]
                q = [int(t) for t in obj["question_tokens"]]
                a = int(obj["answer"])
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed record ({exc})") from exc
            if images and len(img) != len(images[0]):
                raise DatasetError(f"{path}:{lineno}: image length {len(img)} != {len(images[0])}")
            if not q:
                raise DatasetError(f"{path}:{lineno}: empty question")
            if min(img) < 0 or (image_vocab is not None and max(img) >= image_vocab):
                raise InputError(f"{path}:{lineno}: image token out of range [0, {image_vocab})")
            if min(q) <= PAD or (text_vocab is not None and max(q) >= text_vocab):
                raise InputError(f"{path}:{lineno}: question token out of range [1, {text_vocab})")
            if a < 0 or (n_answers is not None and a >= n_answers):
                raise InputError(f"{path}:{lineno}: answer {a} out of range [0, {n_answers})")
            images.append(img)
            questions.append(q)
            answers.append(a)
    if not answers:
        raise DatasetError(f"{path}: empty dataset")
    width = max(len(q) for q in questions)
    if question_len is not None:
        if width > question_len:
            raise InputError(f"{path}: question of length {width} exceeds question_len {question_len}")
        width = question_len
    qarr = np.full((len(questions), width), PAD, dtype=np.int64)
    for i, q in enumerate(questions):
        qarr[i, : len(q)] = q
    return ClientDataset(
        np.array(images, dtype=np.int64), qarr, np.array(answers, dtype=np.int64),
        n_answers if n_answers is not None else max(answers) + 1, name=path.stem,
    )
