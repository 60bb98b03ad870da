import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trafficnas.space import (
    Block,
    ExhaustedRetries,
    Genome,
    GenomeParseError,
    Head,
    ShapeError,
    SpaceBounds,
    block_lengths,
    is_valid,
    mutate,
    random_genome,
    validate,
)

BOUNDS = SpaceBounds()


def test_same_padding_identity():
    g = Genome((Block(8, 3, 1, "same"),))
    validate(g, 784)
    assert block_lengths(g, 784) == [(784, 784)]


def test_ten_halvings_fail_at_tenth_block():
    g = Genome(tuple(Block(8, 3, 1, "same", "max", 2) for _ in range(10)))
    # 784 halves to 392,196,98,49,24,12,6,3,1 over nine blocks
    nine = Genome(g.blocks[:9])
    assert [l for _, l in block_lengths(nine, 784)] == [392, 196, 98, 49, 24, 12, 6, 3, 1]
    with pytest.raises(ShapeError) as err:
        validate(g, 784)
    assert err.value.block == 9  # zero-based: the tenth block


def test_boundary_valid_stride():
    g = Genome((Block(4, 3, 2, "valid"),))
    assert block_lengths(g, 3) == [(1, 1)]
    assert not is_valid(Genome((Block(4, 5, 1, "valid"),)), 3)


def test_block_field_checks():
    with pytest.raises(ValueError):
        Block(8, 4)  # even kernel
    with pytest.raises(ValueError):
        Block(8, 3, pool="max", pool_size=1)
    with pytest.raises(ValueError):
        Block(8, 3, dropout=0.6)
    assert Block(8, 3, pool="none", pool_size=3).pool_size == 0


def test_text_encoding_example():
    g = Genome((Block(16, 5, 2, "valid", "avg", 3, 0.25), Block(8, 3)), Head("global_avg", 64, 11))
    text = g.to_text()
    assert text.splitlines() == [
        "conv f=16 k=5 s=2 p=valid pool=avg:3 drop=0.25",
        "conv f=8 k=3 s=1 p=same pool=none drop=0.0",
        "head pool=gap dense=64 classes=11",
    ]
    assert Genome.from_text(text) == g


@pytest.mark.parametrize("text", [
    "head pool=gap dense=0 classes=4\n",
    "conv f=8 k=3 s=1 p=same pool=none drop=0\n",
    "conv f=8 k=3 s=1 p=same pool=max drop=0\nhead pool=gap dense=0 classes=4\n",
    "conv f=8 k=3 s=1 p=diag pool=none drop=0\nhead pool=gap dense=0 classes=4\n",
    "conv f=8 k=3 s=1 p=same pool=none\nhead pool=gap dense=0 classes=4\n",
    "conv f=8 k=3 s=1 p=same pool=none drop=0\nhead pool=gap dense=0 classes=4\nconv f=8 k=3 s=1 p=same pool=none drop=0\n",
    "dense 5\n",
])
def test_bad_encodings(text):
    with pytest.raises(GenomeParseError):
        Genome.from_text(text)


def test_singleton_space():
    b = SpaceBounds(filters_choices=(8,), kernel_choices=(3,), stride_choices=(1,), padding_choices=("same",),
                    pool_choices=("none",), pool_size_choices=(2,), dropout_choices=(0.0,), max_blocks=1,
                    dense_units_choices=(0,), num_classes=4)
    g = random_genome(b, np.random.default_rng(0))
    assert g == Genome((Block(8, 3),), Head("global_avg", 0, 4))
    with pytest.raises(ExhaustedRetries):
        mutate(g, b, np.random.default_rng(0))


def test_random_genome_deterministic():
    a = random_genome(BOUNDS, np.random.default_rng(42))
    b = random_genome(BOUNDS, np.random.default_rng(42))
    assert a == b


def test_impossible_space():
    b = SpaceBounds(pool_choices=("max",), pool_size_choices=(1000,), max_blocks=1)
    with pytest.raises(ExhaustedRetries):
        random_genome(b, np.random.default_rng(0), retries=50)


def test_delete_excluded_for_single_block():
    g = Genome((Block(8, 3),), Head("global_avg", 0, 11))
    rng = np.random.default_rng(0)
    for _ in range(200):
        child = mutate(g, BOUNDS, rng)
        assert len(child.blocks) >= 1


def test_insert_excluded_at_max_blocks():
    b = SpaceBounds(max_blocks=2)
    g = Genome((Block(8, 3), Block(8, 3)), Head("global_avg", 0, 11))
    rng = np.random.default_rng(1)
    assert all(len(mutate(g, b, rng).blocks) <= 2 for _ in range(200))


def test_modify_is_local():
    g = Genome((Block(8, 3), Block(16, 5)), Head("global_avg", 0, 11))
    b = SpaceBounds(max_blocks=2)
    rng = np.random.default_rng(3)
    seen_local = 0
    for _ in range(300):
        child = mutate(g, b, rng)
        if len(child.blocks) != 2:
            continue
        diffs = [(i, f) for i in range(2) for f in ("filters", "kernel", "stride", "padding", "pool", "dropout")
                 if getattr(child.blocks[i], f) != getattr(g.blocks[i], f)]
        diffs += [("head", f) for f in ("pooling", "dense_units") if getattr(child.head, f) != getattr(g.head, f)]
        assert len(diffs) == 1
        seen_local += 1
    assert seen_local > 50


def test_thousand_mutations_are_valid():
    rng = np.random.default_rng(7)
    parent = random_genome(BOUNDS, rng)
    for _ in range(1000):
        child = mutate(parent, BOUNDS, rng)
        assert is_valid(child, 784)
        assert child != parent
        assert len(child.blocks) <= BOUNDS.max_blocks


def test_inserts_reach_max_blocks():
    g = Genome((Block(8, 3),), Head("global_avg", 0, 11))
    while len(g.blocks) < BOUNDS.max_blocks:
        g = Genome(g.blocks + (Block(8, 3),), g.head)
        validate(g, 784)
    assert len(g.blocks) == BOUNDS.max_blocks


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mutation_closure_and_roundtrip(seed):
    rng = np.random.default_rng(seed)
    g = random_genome(BOUNDS, rng)
    for _ in range(5):
        g = mutate(g, BOUNDS, rng)
        assert is_valid(g, 784)
        assert Genome.from_text(g.to_text()) == g
