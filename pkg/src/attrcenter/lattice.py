"""Attribute categories, combination enumeration, and the learnable center lattice.

A schema is an ordered list of categories, each with a small set of named
states. One state per category is an attribute combination; combinations are
indexed in mixed radix (first category most significant) and each one owns a
learnable center in the shared embedding space. The margin demanded between
two centers grows with the number of categories in which they disagree.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Optional, Sequence

import numpy as np

from attrcenter.autodiff import DiffTensor

# state names that do not get a binary input plane of their own
_NON_INDICATOR = {"unknown", "none", "absent", "other"}


class SchemaError(ValueError):
    """Invalid schema definition or mismatched schema use."""


@dataclass(frozen=True)
class AttributeCategory:
    """One attribute category: a name plus its named states, in order.

    ``indicator_states`` are the states that map to binary input planes for
    the sketch encoder; states left out (e.g. "unknown", or "female" when
    only a "male" flag exists) read as all-zero planes within the category.
    """

    name: str
    states: tuple
    indicator_states: tuple = None  # type: ignore[assignment]

    def __post_init__(self):
        if len(self.states) < 2:
            raise SchemaError(f"category {self.name!r}: needs at least 2 states, got {len(self.states)}")
        if len(set(self.states)) != len(self.states):
            raise SchemaError(f"category {self.name!r}: duplicate state names")
        if self.indicator_states is None:
            object.__setattr__(
                self, "indicator_states",
                tuple(s for s in self.states if s.lower() not in _NON_INDICATOR))
        for s in self.indicator_states:
            if s not in self.states:
                raise SchemaError(f"category {self.name!r}: indicator state {s!r} is not a state")

    @property
    def state_count(self) -> int:
        return len(self.states)


@dataclass(frozen=True)
class AttributeSchema:
    """Ordered categories plus derived combination/indicator bookkeeping."""

    categories: tuple

    def __post_init__(self):
        names = [c.name for c in self.categories]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate category names")
        if not self.categories:
            raise SchemaError("schema needs at least one category")

    @property
    def n_combinations(self) -> int:
        n = 1
        for c in self.categories:
            n *= c.state_count
        return n

    @property
    def binary_attribute_count(self) -> int:
        return sum(len(c.indicator_states) for c in self.categories)

    @property
    def radices(self) -> tuple:
        return tuple(c.state_count for c in self.categories)

    def encode(self, state_indices: Sequence[int]) -> int:
        """Mixed-radix linear index; first category is most significant."""
        if len(state_indices) != len(self.categories):
            raise SchemaError(f"expected {len(self.categories)} state indices, got {len(state_indices)}")
        y = 0
        for s, cat in zip(state_indices, self.categories):
            if not 0 <= s < cat.state_count:
                raise SchemaError(f"category {cat.name!r}: state index {s} out of range")
            y = y * cat.state_count + s
        return y

    def decode(self, y: int) -> "AttributeCombination":
        if not 0 <= y < self.n_combinations:
            raise SchemaError(f"combination index {y} out of range [0, {self.n_combinations})")
        digits = []
        rem = y
        for cat in reversed(self.categories):
            digits.append(rem % cat.state_count)
            rem //= cat.state_count
        return AttributeCombination(self, tuple(reversed(digits)), y)

    def combination(self, state_indices: Sequence[int]) -> "AttributeCombination":
        return AttributeCombination(self, tuple(state_indices), self.encode(state_indices))

    def digits_table(self) -> np.ndarray:
        """(n_c, n_categories) table of state indices for every combination."""
        table = np.zeros((self.n_combinations, len(self.categories)), dtype=np.int64)
        rem = np.arange(self.n_combinations)
        for col in range(len(self.categories) - 1, -1, -1):
            r = self.categories[col].state_count
            table[:, col] = rem % r
            rem = rem // r
        return table

    def to_dict(self) -> dict:
        return {
            "categories": [
                {"name": c.name, "states": list(c.states), "indicators": list(c.indicator_states)}
                for c in self.categories
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttributeSchema":
        cats = []
        for cd in d["categories"]:
            cats.append(AttributeCategory(
                name=cd["name"],
                states=tuple(cd["states"]),
                indicator_states=tuple(cd["indicators"]) if "indicators" in cd else None))
        return cls(tuple(cats))

    def content_hash(self) -> bytes:
        """8-byte digest of the canonical schema layout (checkpoint guard)."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()[:8]


@dataclass(frozen=True)
class AttributeCombination:
    """One concrete state per category plus its mixed-radix linear index."""

    schema: AttributeSchema
    state_indices: tuple
    index: int

    def __post_init__(self):
        expect = self.schema.encode(self.state_indices)
        if expect != self.index:
            raise SchemaError(f"combination index {self.index} does not match states {self.state_indices}")

    def state_names(self) -> tuple:
        return tuple(c.states[s] for c, s in zip(self.schema.categories, self.state_indices))

    def state_of(self, category_name: str) -> str:
        for c, s in zip(self.schema.categories, self.state_indices):
            if c.name == category_name:
                return c.states[s]
        raise SchemaError(f"no category named {category_name!r}")

    def indicator_vector(self) -> np.ndarray:
        """One binary value per indicator state across all categories, schema order."""
        bits = []
        for c, s in zip(self.schema.categories, self.state_indices):
            chosen = c.states[s]
            bits.extend(1.0 if chosen == ind else 0.0 for ind in c.indicator_states)
        return np.asarray(bits, dtype=np.float64)


def enumerate_combinations(schema: AttributeSchema) -> list:
    """All combinations in mixed-radix order (index 0 .. n_c - 1)."""
    return [schema.decode(y) for y in range(schema.n_combinations)]


def contradiction_count(a: AttributeCombination, b: AttributeCombination) -> int:
    """Number of categories in which the two combinations disagree."""
    if a.schema != b.schema:
        raise SchemaError("contradiction_count: combinations come from different schemas")
    return sum(1 for sa, sb in zip(a.state_indices, b.state_indices) if sa != sb)


def paper_schema() -> AttributeSchema:
    """Hair/race/glasses/gender categories: 180 combinations, 12 indicator planes."""
    return AttributeSchema((
        AttributeCategory("hair", ("black", "brown", "blond", "gray", "bald", "unknown")),
        AttributeCategory("race", ("asian", "indian", "white", "black", "unknown")),
        AttributeCategory("glasses", ("eyeglasses", "sunglasses", "none")),
        AttributeCategory("gender", ("male", "female"), indicator_states=("male",)),
    ))


def desk_schema() -> AttributeSchema:
    """Small schema for desk-scale runs: 12 combinations, 6 indicator planes.

    Hair and skin states are color-borne (invisible in a sketch); glasses are
    geometric (visible in both modalities).
    """
    return AttributeSchema((
        AttributeCategory("hair", ("dark", "light", "red")),
        AttributeCategory("skin", ("pale", "tan")),
        AttributeCategory("glasses", ("present", "none"), indicator_states=("present",)),
    ))


class CenterRegistry:
    """Learnable center matrix (one row per attribute combination) plus margins.

    Margins compare against squared Euclidean distances. The center-pair
    margin is linear in the contradiction count: eps_jk = count * margin_unit.
    """

    def __init__(self, schema: AttributeSchema, embedding_dim: int,
                 margin_unit: float = 4.0, attribute_margin: float = 1.0,
                 identity_margin: float = 1.5, dtype=np.float32):
        if embedding_dim < 1:
            raise ValueError(f"embedding_dim must be positive, got {embedding_dim}")
        if margin_unit <= 0 or attribute_margin <= 0 or identity_margin <= 0:
            raise ValueError("margins must be positive")
        if not identity_margin < 2.0 * attribute_margin:
            raise ValueError(
                f"identity margin {identity_margin} must be < 2 * attribute margin "
                f"(= {2.0 * attribute_margin})")
        self.schema = schema
        self.embedding_dim = int(embedding_dim)
        self.margin_unit = float(margin_unit)
        self.attribute_margin = float(attribute_margin)
        self.identity_margin = float(identity_margin)
        self.centers = DiffTensor(
            np.zeros((schema.n_combinations, embedding_dim), dtype=dtype), requires_grad=True)

    @property
    def n_centers(self) -> int:
        return self.schema.n_combinations

    @cached_property
    def contradiction_matrix(self) -> np.ndarray:
        digits = self.schema.digits_table()
        return (digits[:, None, :] != digits[None, :, :]).sum(axis=2).astype(np.int64)

    @cached_property
    def margin_matrix(self) -> np.ndarray:
        return self.contradiction_matrix.astype(np.float64) * self.margin_unit

    def pairwise_margin(self, j: int, k: int) -> float:
        n = self.n_centers
        if not (0 <= j < n and 0 <= k < n):
            raise IndexError(f"center index out of range: ({j}, {k}) with {n} centers")
        return float(self.margin_matrix[j, k])

    def init_centers(self, seed: int, scale: float = 0.5) -> None:
        init_centers(self, seed, scale)

    def min_pairwise_sq_distance(self) -> float:
        c = self.centers.data.astype(np.float64)
        sq = np.sum(c * c, axis=1)
        d2 = sq[:, None] + sq[None, :] - 2.0 * (c @ c.T)
        np.fill_diagonal(d2, np.inf)
        return float(max(d2.min(), 0.0))


def pairwise_margin(registry: CenterRegistry, j: int, k: int) -> float:
    return registry.pairwise_margin(j, k)


def init_centers(registry: CenterRegistry, seed: int, scale: float = 0.5) -> None:
    """Draw centers i.i.d. Gaussian(0, scale^2); scale 0 collapses them to zero."""
    if scale < 0:
        raise ValueError(f"scale must be >= 0, got {scale}")
    rng = np.random.default_rng(seed)
    draw = rng.normal(0.0, 1.0, size=registry.centers.shape) * scale
    registry.centers.data[...] = draw.astype(registry.centers.dtype)
