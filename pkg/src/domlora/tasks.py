"""Synthetic token tasks used for probe sets, pretraining, and fine-tuning.

Two task families:

* copy: ``c_1 .. c_p  MARK  c_1 .. c_p`` with the repeated span supervised.
  Content tokens come from the upper half of the vocabulary so the marker
  (id 1) never collides with content.
* modsum: ``a_1 .. a_k  EQ  (a_1 + ... + a_k) mod m`` with only the answer
  supervised.  Operands and answer live in [0, m); EQ is id m.

Both have enough learnable structure at toy scale that training signal and
placement differences show up in the loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import RngState
from .probe import ProbeSample

COPY_MARKER = 1


@dataclass(frozen=True)
class TaskSpec:
    """Parameters of a synthetic task; vocabulary comes from the model config."""

    name: str = "modsum"           # "copy" or "modsum"
    copy_prompt_len: int = 8
    modsum_terms: int = 2
    modsum_modulus: int = 29

    def __post_init__(self):
        if self.name not in ("copy", "modsum"):
            raise ValueError(f"unknown task {self.name!r}")
        if self.copy_prompt_len < 1 or self.modsum_terms < 1 or self.modsum_modulus < 2:
            raise ValueError("task sizes out of range")

    def seq_len(self) -> int:
        if self.name == "copy":
            return 2 * self.copy_prompt_len + 1
        return self.modsum_terms + 2


def _copy_sample(gen: np.random.Generator, prompt_len: int, vocab_size: int) -> ProbeSample:
    lo = max(2, vocab_size // 2)
    content = gen.integers(lo, vocab_size, size=prompt_len)
    tokens = np.concatenate([content, [COPY_MARKER], content])
    mask = np.zeros(tokens.size, dtype=bool)
    mask[prompt_len + 1:] = True
    return ProbeSample(tokens, mask)


def _modsum_sample(gen: np.random.Generator, terms: int, modulus: int,
                   vocab_size: int) -> ProbeSample:
    if modulus + 1 > vocab_size:
        raise ValueError(f"modulus {modulus} needs vocab_size > {modulus}")
    operands = gen.integers(0, modulus, size=terms)
    answer = int(operands.sum()) % modulus
    tokens = np.concatenate([operands, [modulus], [answer]])
    mask = np.zeros(tokens.size, dtype=bool)
    mask[-1] = True
    return ProbeSample(tokens, mask)


def generate_samples(spec: TaskSpec, n: int, rng: RngState,
                     vocab_size: int) -> list[ProbeSample]:
    """n i.i.d. samples of the task, deterministic in the rng state."""
    if n < 1:
        raise ValueError("sample count must be >= 1")
    gen = rng.generator()
    if spec.name == "copy":
        return [_copy_sample(gen, spec.copy_prompt_len, vocab_size) for _ in range(n)]
    return [_modsum_sample(gen, spec.modsum_terms, spec.modsum_modulus, vocab_size)
            for _ in range(n)]


@dataclass
class TaskData:
    """Train/eval sample pools drawn from one task."""

    spec: TaskSpec
    train: list[ProbeSample]
    eval: list[ProbeSample]


def make_task_data(spec: TaskSpec, rng: RngState, vocab_size: int,
                   train_size: int = 256, eval_size: int = 64) -> TaskData:
    train_rng, eval_rng = rng.split(2)
    return TaskData(spec=spec,
                    train=generate_samples(spec, train_size, train_rng, vocab_size),
                    eval=generate_samples(spec, eval_size, eval_rng, vocab_size))
