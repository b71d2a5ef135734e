"""Stand-in for frozen image/question encoders: a planted-pair synthetic task.

Each example pairs one image concept with one question concept; the label is
a joint function of the pair, so additive (non-fusing) models cannot express
it.  Image features are a concept centroid plus Gaussian noise; questions are
token sequences in which exactly one token carries the concept embedding and
the rest are drawn from a disjoint distractor pool, padded to a fixed length
with zero rows and a validity mask.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .config import ConfigError, SyntheticTaskSpec
from .rng import generator


@dataclass
class ModalityFeatures:
    """One modality's feature matrix plus its token-validity mask."""

    matrix: np.ndarray        # (N, d) float64
    mask: np.ndarray          # (N,) bool, True = valid
    modality: str             # "image" | "question"

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.matrix.ndim != 2 or self.mask.shape != (self.matrix.shape[0],):
            raise ConfigError(
                f"features {self.matrix.shape} and mask {self.mask.shape} disagree")
        if not self.mask.any():
            raise ConfigError(f"{self.modality} features have no valid positions")


@dataclass
class Example:
    image: ModalityFeatures
    question: ModalityFeatures
    answer: int
    image_concept: int = -1      # -1 when loaded from disk (labels only)
    question_concept: int = -1


def make_rule_table(spec: SyntheticTaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Answer table over concept pairs.

    Invariants enforced: every answer index appears somewhere, and every row
    and column contains at least two distinct answers (so the answer is never
    a function of one concept alone).  Rejection-samples until satisfied.
    """
    c_v, c_q, n_a = spec.image_concepts, spec.question_concepts, spec.answers
    if spec.rule is not None:
        table = np.asarray(spec.rule, dtype=np.int64)
        if table.shape != (c_v, c_q):
            raise ConfigError(f"rule table shape {table.shape} != ({c_v}, {c_q})")
        _check_rule(table, n_a)
        return table
    for _ in range(1000):
        table = rng.integers(0, n_a, size=(c_v, c_q))
        if _rule_ok(table, n_a):
            return table
    raise ConfigError("could not generate a valid rule table; loosen the spec")


def _rule_ok(table: np.ndarray, n_answers: int) -> bool:
    # coverage and per-axis variation are required only where feasible
    # (degenerate single-concept tasks cannot satisfy either)
    if n_answers <= table.size and len(np.unique(table)) != n_answers:
        return False
    if n_answers >= 2 and table.shape[1] >= 2:
        if any(len(np.unique(row)) < 2 for row in table):
            return False
    if n_answers >= 2 and table.shape[0] >= 2:
        if any(len(np.unique(col)) < 2 for col in table.T):
            return False
    return True


def _check_rule(table: np.ndarray, n_answers: int) -> None:
    if table.min() < 0 or table.max() >= n_answers:
        raise ConfigError("rule table entries out of answer range")
    if not _rule_ok(table, n_answers):
        raise ConfigError(
            "rule table must cover all answers and vary along both axes")


class TaskSampler:
    """Deterministic example generator for one task spec.

    Concept centroids, the distractor pool and the rule table all derive from
    ``spec.seed``; the train and test streams use independent substreams so
    the two sets never share examples.
    """

    def __init__(self, spec: SyntheticTaskSpec):
        self.spec = spec.validate()
        bank_rng = generator(spec.seed, "bank")
        self.image_centroids = bank_rng.normal(
            size=(spec.image_concepts, spec.image_dim))
        self.question_centroids = bank_rng.normal(
            size=(spec.question_concepts, spec.question_dim))
        self.distractors = bank_rng.normal(
            size=(spec.distractor_pool, spec.question_dim))
        self.rule = make_rule_table(spec, generator(spec.seed, "rule"))

    def example(self, rng: np.random.Generator) -> Example:
        spec = self.spec
        vc = int(rng.integers(spec.image_concepts))
        qc = int(rng.integers(spec.question_concepts))
        image = self.image_centroids[vc][None, :].copy()
        if spec.noise_sigma > 0:
            image = image + rng.normal(scale=spec.noise_sigma, size=image.shape)
        length = int(rng.integers(spec.min_question_tokens,
                                  spec.max_question_tokens + 1))
        tokens = np.zeros((spec.max_question_tokens, spec.question_dim))
        picks = rng.integers(spec.distractor_pool, size=length)
        tokens[:length] = self.distractors[picks]
        slot = int(rng.integers(length))
        tokens[slot] = self.question_centroids[qc]
        mask = np.zeros(spec.max_question_tokens, dtype=bool)
        mask[:length] = True
        return Example(
            image=ModalityFeatures(image, np.ones(1, dtype=bool), "image"),
            question=ModalityFeatures(tokens, mask, "question"),
            answer=int(self.rule[vc, qc]),
            image_concept=vc,
            question_concept=qc,
        )

    def stream(self, label: str, count: int) -> list:
        rng = generator(self.spec.seed, "stream", label)
        return [self.example(rng) for _ in range(count)]


def make_dataset(spec: SyntheticTaskSpec) -> tuple:
    """(train, test) example lists from independent substreams of spec.seed."""
    sampler = TaskSampler(spec)
    return sampler.stream("train", spec.n_train), sampler.stream("test", spec.n_test)


def stack_examples(examples: Iterable[Example]) -> tuple:
    """Batch arrays: image (B, N_v, d_hid), question (B, L, d_q), mask (B, L),
    answers (B,)."""
    examples = list(examples)
    image = np.stack([ex.image.matrix for ex in examples])
    question = np.stack([ex.question.matrix for ex in examples])
    mask = np.stack([ex.question.mask for ex in examples])
    answers = np.array([ex.answer for ex in examples], dtype=np.int64)
    return image, question, mask, answers


def one_hot(answers: np.ndarray, n_answers: int) -> np.ndarray:
    out = np.zeros((len(answers), n_answers))
    out[np.arange(len(answers)), answers] = 1.0
    return out


# ---------------------------------------------------------------------------
# line-delimited export / import (bit-exact round trip)
# ---------------------------------------------------------------------------

def write_examples(path: str, examples: Iterable[Example]) -> int:
    """One JSON record per line; float values round-trip exactly via repr."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            if ex.image.matrix.shape[0] != 1:
                raise ConfigError("export expects single-region image features")
            record = {
                "image_vector": ex.image.matrix[0].tolist(),
                "question_vectors": ex.question.matrix.tolist(),
                "mask": ex.question.mask.tolist(),
                "answer": int(ex.answer),
            }
            fh.write(json.dumps(record) + "\n")
            n += 1
    return n


def read_examples(path: str) -> list:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            image = np.asarray(rec["image_vector"], dtype=np.float64)[None, :]
            question = np.asarray(rec["question_vectors"], dtype=np.float64)
            mask = np.asarray(rec["mask"], dtype=bool)
            out.append(Example(
                image=ModalityFeatures(image, np.ones(1, dtype=bool), "image"),
                question=ModalityFeatures(question, mask, "question"),
                answer=int(rec["answer"]),
            ))
    return out
