"""Block-wise 1D-CNN genomes: encoding, random sampling, mutation, shape checks."""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .cost import KernelTooLarge, out_len

PADDINGS = ("same", "valid")
POOLS = ("none", "max", "avg")
HEAD_POOLS = ("flatten", "global_avg")
MUTATION_RETRY_CAP = 25
RANDOM_RETRY_CAP = 1000


class ShapeError(ValueError):
    def __init__(self, block: int, message: str):
        super().__init__(f"block {block}: {message}")
        self.block = block


class ExhaustedRetries(RuntimeError):
    pass


class GenomeParseError(ValueError):
    pass


@dataclass(frozen=True)
class Block:
    filters: int
    kernel: int
    stride: int = 1
    padding: str = "same"
    pool: str = "none"
    pool_size: int = 0  # 0 iff pool == "none"
    dropout: float = 0.0
    activation: str = "relu"

    def __post_init__(self):
        if self.filters < 1 or self.kernel < 1 or self.kernel % 2 == 0 or self.stride < 1:
            raise ValueError(f"bad conv fields in {self}")
        if self.padding not in PADDINGS:
            raise ValueError(f"padding must be one of {PADDINGS}")
        if self.pool not in POOLS:
            raise ValueError(f"pool must be one of {POOLS}")
        if self.pool == "none":
            if self.pool_size != 0:
                object.__setattr__(self, "pool_size", 0)
        elif self.pool_size < 2:
            raise ValueError("pool_size must be >= 2 when pooling")
        if not 0.0 <= self.dropout <= 0.5:
            raise ValueError("dropout must lie in [0, 0.5]")
        if self.activation != "relu":
            raise ValueError("only relu activation is supported")


@dataclass(frozen=True)
class Head:
    pooling: str = "global_avg"
    dense_units: int = 0
    num_classes: int = 11

    def __post_init__(self):
        if self.pooling not in HEAD_POOLS:
            raise ValueError(f"head pooling must be one of {HEAD_POOLS}")
        if self.dense_units < 0 or self.num_classes < 1:
            raise ValueError("bad head sizes")


@dataclass(frozen=True)
class Genome:
    blocks: tuple[Block, ...]
    head: Head = field(default_factory=Head)

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if not self.blocks:
            raise ValueError("a genome needs at least one block")

    def to_text(self) -> str:
        lines = []
        for b in self.blocks:
            pool = "none" if b.pool == "none" else f"{b.pool}:{b.pool_size}"
            lines.append(f"conv f={b.filters} k={b.kernel} s={b.stride} p={b.padding} "
                         f"pool={pool} drop={b.dropout!r}")
        hp = "gap" if self.head.pooling == "global_avg" else "flatten"
        lines.append(f"head pool={hp} dense={self.head.dense_units} classes={self.head.num_classes}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Genome":
        blocks, head = [], None
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if head is not None:
                raise GenomeParseError(f"line {lineno}: content after the head line")
            kind, _, rest = line.partition(" ")
            try:
                kv = dict(item.split("=", 1) for item in rest.split())
            except ValueError:
                raise GenomeParseError(f"line {lineno}: expected key=value pairs") from None
            try:
                if kind == "conv":
                    _expect_keys(kv, {"f", "k", "s", "p", "pool", "drop"}, lineno)
                    pool, pool_size = kv["pool"], 0
                    if pool != "none":
                        m = re.fullmatch(r"(max|avg):(\d+)", pool)
                        if not m:
                            raise GenomeParseError(f"line {lineno}: bad pool {pool!r}")
                        pool, pool_size = m.group(1), int(m.group(2))
                    blocks.append(Block(int(kv["f"]), int(kv["k"]), int(kv["s"]), kv["p"],
                                        pool, pool_size, float(kv["drop"])))
                elif kind == "head":
                    _expect_keys(kv, {"pool", "dense", "classes"}, lineno)
                    pooling = {"gap": "global_avg", "flatten": "flatten"}.get(kv["pool"])
                    if pooling is None:
                        raise GenomeParseError(f"line {lineno}: bad head pool {kv['pool']!r}")
                    head = Head(pooling, int(kv["dense"]), int(kv["classes"]))
                else:
                    raise GenomeParseError(f"line {lineno}: unknown line kind {kind!r}")
            except GenomeParseError:
                raise
            except ValueError as exc:
                raise GenomeParseError(f"line {lineno}: {exc}") from None
        if head is None:
            raise GenomeParseError("missing head line")
        if not blocks:
            raise GenomeParseError("no conv blocks")
        return cls(tuple(blocks), head)


def _expect_keys(kv: dict, keys: set, lineno: int) -> None:
    if set(kv) != keys:
        raise GenomeParseError(f"line {lineno}: expected keys {sorted(keys)}, got {sorted(kv)}")


@dataclass(frozen=True)
class SpaceBounds:
    filters_choices: tuple[int, ...] = (8, 16, 24, 32, 48, 64)
    kernel_choices: tuple[int, ...] = (3, 5, 7, 9, 15, 25)
    stride_choices: tuple[int, ...] = (1, 2)
    padding_choices: tuple[str, ...] = PADDINGS
    pool_choices: tuple[str, ...] = POOLS
    pool_size_choices: tuple[int, ...] = (2, 3)
    dropout_choices: tuple[float, ...] = (0.0, 0.1, 0.25, 0.5)
    max_blocks: int = 6
    dense_units_choices: tuple[int, ...] = (0, 32, 64, 128)
    head_pool_choices: tuple[str, ...] = ("global_avg",)
    num_classes: int = 11
    input_len: int = 784

    def __post_init__(self):
        for name in ("filters_choices", "kernel_choices", "stride_choices", "padding_choices",
                     "pool_choices", "pool_size_choices", "dropout_choices",
                     "dense_units_choices", "head_pool_choices"):
            value = tuple(getattr(self, name))
            if not value:
                raise ValueError(f"{name} must be non-empty")
            object.__setattr__(self, name, value)
        if self.max_blocks < 1:
            raise ValueError("max_blocks must be >= 1")


def block_lengths(g: Genome, input_len: int) -> list[tuple[int, int]]:
    """``(conv_out_len, block_out_len)`` per block; raises :class:`ShapeError`."""
    lengths = []
    length = input_len
    for i, b in enumerate(g.blocks):
        try:
            conv_len = out_len(length, b.kernel, b.stride, b.padding)
        except KernelTooLarge as exc:
            raise ShapeError(i, str(exc)) from None
        length = conv_len
        if b.pool != "none":
            if length < b.pool_size:
                raise ShapeError(i, f"pool size {b.pool_size} on length {length}")
            length //= b.pool_size
        lengths.append((conv_len, length))
    return lengths


def validate(g: Genome, input_len: int = 784) -> None:
    """Raise :class:`ShapeError` naming the first block whose output would be empty."""
    block_lengths(g, input_len)


def is_valid(g: Genome, input_len: int = 784) -> bool:
    try:
        validate(g, input_len)
    except ShapeError:
        return False
    return True


def _pick(rng: np.random.Generator, seq: Sequence):
    return seq[int(rng.integers(len(seq)))]


def random_block(bounds: SpaceBounds, rng: np.random.Generator) -> Block:
    pool = _pick(rng, bounds.pool_choices)
    pool_size = _pick(rng, bounds.pool_size_choices) if pool != "none" else 0
    return Block(
        filters=_pick(rng, bounds.filters_choices),
        kernel=_pick(rng, bounds.kernel_choices),
        stride=_pick(rng, bounds.stride_choices),
        padding=_pick(rng, bounds.padding_choices),
        pool=pool,
        pool_size=pool_size,
        dropout=float(_pick(rng, bounds.dropout_choices)),
    )


def random_head(bounds: SpaceBounds, rng: np.random.Generator) -> Head:
    return Head(_pick(rng, bounds.head_pool_choices), _pick(rng, bounds.dense_units_choices),
                bounds.num_classes)


def random_genome(bounds: SpaceBounds, rng: np.random.Generator,
                  retries: int = RANDOM_RETRY_CAP) -> Genome:
    for _ in range(retries):
        n = int(rng.integers(1, bounds.max_blocks + 1))
        g = Genome(tuple(random_block(bounds, rng) for _ in range(n)), random_head(bounds, rng))
        if is_valid(g, bounds.input_len):
            return g
    raise ExhaustedRetries(f"no shape-valid genome in {retries} draws; "
                           f"bounds do not fit input length {bounds.input_len}")


_BLOCK_FIELDS = {
    "filters": "filters_choices",
    "kernel": "kernel_choices",
    "stride": "stride_choices",
    "padding": "padding_choices",
    "pool": "pool_choices",
    "pool_size": "pool_size_choices",
    "dropout": "dropout_choices",
}
_HEAD_FIELDS = {
    "pooling": "head_pool_choices",
    "dense_units": "dense_units_choices",
}


def _modify(g: Genome, bounds: SpaceBounds, rng: np.random.Generator) -> Optional[Genome]:
    target = int(rng.integers(len(g.blocks) + 1))
    if target == len(g.blocks):
        name = _pick(rng, tuple(_HEAD_FIELDS))
        current = getattr(g.head, name)
        options = [v for v in getattr(bounds, _HEAD_FIELDS[name]) if v != current]
        if not options:
            return None
        return Genome(g.blocks, replace(g.head, **{name: _pick(rng, options)}))

    block = g.blocks[target]
    names = [n for n in _BLOCK_FIELDS if n != "pool_size" or block.pool != "none"]
    name = _pick(rng, names)
    current = getattr(block, name)
    options = [v for v in getattr(bounds, _BLOCK_FIELDS[name]) if v != current]
    if not options:
        return None
    value = _pick(rng, options)
    changes = {name: value}
    if name == "pool":
        if value == "none":
            changes["pool_size"] = 0
        elif block.pool == "none":
            changes["pool_size"] = _pick(rng, bounds.pool_size_choices)
    new_block = replace(block, **changes)
    blocks = list(g.blocks)
    blocks[target] = new_block
    return Genome(tuple(blocks), g.head)


def mutate(g: Genome, bounds: SpaceBounds, rng: np.random.Generator,
           retries: int = MUTATION_RETRY_CAP) -> Genome:
    """Apply one insert/delete/modify mutation, resampling until the result is shape-valid."""
    for _ in range(retries):
        ops = ["modify"]
        if len(g.blocks) < bounds.max_blocks:
            ops.append("insert")
        if len(g.blocks) > 1:
            ops.append("delete")
        op = _pick(rng, sorted(ops))
        if op == "insert":
            pos = int(rng.integers(len(g.blocks) + 1))
            blocks = list(g.blocks)
            blocks.insert(pos, random_block(bounds, rng))
            child = Genome(tuple(blocks), g.head)
        elif op == "delete":
            pos = int(rng.integers(len(g.blocks)))
            child = Genome(g.blocks[:pos] + g.blocks[pos + 1:], g.head)
        else:
            child = _modify(g, bounds, rng)
        if child is not None and child != g and is_valid(child, bounds.input_len):
            return child
    raise ExhaustedRetries(f"no valid mutation in {retries} attempts")
