"""Hardware cost model: parameter count, largest tensor, FLOPs, Flash and RAM bytes.

Conventions (all counts per single inference):

* 4 bytes per stored value and per tensor element.
* batchnorm stores 4 values per channel (scale, shift, running mean, running var).
* a multiply-add counts as 2 FLOPs; batchnorm is folded to one multiply and one
  add per element; ReLU costs 1 per element; pooling costs ``pool_size`` per
  output element (global average pooling: ``length`` per output).
* the largest tensor is taken over the input, every conv output, every pooled
  output and the head tensors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional

BYTES_PER_VALUE = 4


class KernelTooLarge(ValueError):
    pass


class DivByZero(ZeroDivisionError):
    pass


def out_len(l_in: int, kernel: int, stride: int, padding: str) -> int:
    if l_in < 1:
        raise ValueError(f"input length must be >= 1, got {l_in}")
    if padding == "same":
        return -(-l_in // stride)
    if padding == "valid":
        if kernel > l_in:
            raise KernelTooLarge(f"kernel {kernel} longer than input {l_in}")
        return (l_in - kernel) // stride + 1
    raise ValueError(f"unknown padding {padding!r}")


@dataclass(frozen=True)
class CostReport:
    params: int
    max_tensor: int
    flops: int
    flash_bytes: int
    ram_bytes: int

    @classmethod
    def from_counts(cls, params: int, max_tensor: int, flops: int) -> "CostReport":
        return cls(params, max_tensor, flops, BYTES_PER_VALUE * params, BYTES_PER_VALUE * max_tensor)

    def as_dict(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def render(self) -> str:
        rows = [
            ("Params", f"{self.params:,}", f"{self.params / 1e6:.3f} M"),
            ("Max tensor", f"{self.max_tensor:,}", "elements"),
            ("FLOPs", f"{self.flops:,}", f"{self.flops / 1e6:.3f} M"),
            ("Flash", f"{self.flash_bytes:,}", f"{self.flash_bytes / 1e6:.3f} MB"),
            ("RAM", f"{self.ram_bytes:,}", f"{self.ram_bytes / 1e3:.1f} KB"),
        ]
        return "\n".join(f"{a:<11} {b:>14}  {c}" for a, b, c in rows)

    def key_values(self) -> str:
        return "\n".join(f"{k}={v}" for k, v in self.as_dict().items())


@dataclass(frozen=True)
class LayerCost:
    name: str
    params: int
    flops: int
    tensor: int  # elements of the layer's output, per sample


def layer_costs(g, input_len: int = 784) -> list[LayerCost]:
    """Per-layer cost breakdown for a genome (input tensor first)."""
    layers = [LayerCost("input", 0, 0, input_len)]
    length, channels = input_len, 1
    for i, b in enumerate(g.blocks):
        conv_len = out_len(length, b.kernel, b.stride, b.padding)
        n = conv_len * b.filters
        layers.append(LayerCost(f"block{i}.conv", b.filters * (channels * b.kernel + 1),
                                2 * channels * b.kernel * b.filters * conv_len, n))
        layers.append(LayerCost(f"block{i}.bn", 4 * b.filters, 2 * n, n))
        layers.append(LayerCost(f"block{i}.relu", 0, n, n))
        length, channels = conv_len, b.filters
        if b.pool != "none":
            length //= b.pool_size
            layers.append(LayerCost(f"block{i}.{b.pool}pool", 0,
                                    b.pool_size * length * channels, length * channels))

    if g.head.pooling == "global_avg":
        layers.append(LayerCost("head.gap", 0, length * channels, channels))
        features = channels
    else:
        features = length * channels
        layers.append(LayerCost("head.flatten", 0, 0, features))
    if g.head.dense_units:
        u = g.head.dense_units
        layers.append(LayerCost("head.dense", (features + 1) * u, 2 * features * u, u))
        layers.append(LayerCost("head.relu", 0, u, u))
        features = u
    k = g.head.num_classes
    layers.append(LayerCost("head.classifier", (features + 1) * k, 2 * features * k, k))
    return layers


def count_params(g, input_len: int = 784) -> int:
    return sum(l.params for l in layer_costs(g, input_len))


def count_flops(g, input_len: int = 784) -> int:
    return sum(l.flops for l in layer_costs(g, input_len))


def max_tensor(g, input_len: int = 784) -> int:
    return max(l.tensor for l in layer_costs(g, input_len))


def estimate_cost(g, input_len: int = 784) -> CostReport:
    layers = layer_costs(g, input_len)
    return CostReport.from_counts(
        sum(l.params for l in layers),
        max(l.tensor for l in layers),
        sum(l.flops for l in layers),
    )


@dataclass(frozen=True)
class Thresholds:
    d_th: Optional[int] = None
    r_th: Optional[int] = None
    flops_th: Optional[int] = None

    def __post_init__(self):
        for name in ("d_th", "r_th", "flops_th"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ValueError(f"{name} must be positive")


# Column minima over the published baselines (params, max tensor, FLOPs).
BASELINE_MINIMA = Thresholds(d_th=223_000, r_th=25_088, flops_th=39_727_000)


@dataclass(frozen=True)
class Violation:
    quantity: str
    value: int
    threshold: int

    def __str__(self):
        return f"{self.quantity}={self.value} not < {self.threshold}"


def check_constraints(c: CostReport, t: Thresholds) -> list[Violation]:
    """Strict-inequality feasibility check; an empty list means the report passes."""
    out = []
    for quantity, value, limit in (("params", c.params, t.d_th),
                                   ("max_tensor", c.max_tensor, t.r_th),
                                   ("flops", c.flops, t.flops_th)):
        if limit is not None and not value < limit:
            out.append(Violation(quantity, value, limit))
    return out


def efficiency_ratios(baseline: CostReport, ours: CostReport) -> dict[str, float]:
    """``baseline / ours`` for each of the five quantities (unrounded)."""
    out = {}
    for name, value in ours.as_dict().items():
        if value <= 0:
            raise DivByZero(f"reference {name} is {value}")
        out[name] = getattr(baseline, name) / value
    return out


def format_ratio(r: float) -> str:
    return f"{math.floor(r * 100 + 0.5) / 100:.2f}"
