"""Parameter containers and initializers shared by both encoder towers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor


def uniform_fan_in(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    """Variance-preserving init for layers followed by ReLU."""
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def normal_param(rng: np.random.Generator, shape: tuple, d: int) -> Tensor:
    """N(0, 1/d) entries, used for embeddings, encodings and special tokens."""
    return Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), size=shape), requires_grad=True)


def zeros_param(shape: tuple) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape: tuple) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


@dataclass
class Linear:
    weight: Tensor  # [in, out]
    bias: Tensor  # [out]

    @classmethod
    def init(cls, rng: np.random.Generator, fan_in: int, fan_out: int, zero: bool = False) -> "Linear":
        if zero:
            return cls(zeros_param((fan_in, fan_out)), zeros_param((fan_out,)))
        return cls(uniform_fan_in(rng, (fan_in, fan_out), fan_in), uniform_fan_in(rng, (fan_out,), fan_in))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


@dataclass
class Norm:
    gain: Tensor
    bias: Tensor

    @classmethod
    def init(cls, d: int) -> "Norm":
        return cls(ones_param((d,)), zeros_param((d,)))
