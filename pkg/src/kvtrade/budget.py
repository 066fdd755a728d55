"""Memory-budget planning: per-layer (token count, bit width) allocations.

A plan fixes, for every layer, how many prompt tokens survive eviction and
at what precision they are stored. The central move is trading precision
for tokens at a fixed byte budget: relative to a ``base_tokens`` @ 16-bit
reference, an 8-bit plan keeps 2x tokens and a 4-bit plan keeps 4x tokens.

Byte accounting is explicit rather than waved away: quantized layers are
charged via :func:`kvtrade.quant.quantized_bytes_for_shape` (codes plus
2 bytes of group metadata per group), 16-bit layers at 2 bytes per element
with no metadata. At group size 64 the metadata keeps matched plans within
6.25% (4-bit) / 3.125% (8-bit) of the 16-bit reference.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractViolation
from .quant import Layout, QuantConfig, quantized_bytes_for_shape

PLAN_BITS = (2, 4, 8, 16)
FULL_PRECISION_BITS = 16
BYTES_PER_FP16 = 2


@dataclass(frozen=True)
class BudgetPlan:
    """Per-layer (tokens, bits) allocation under one quantization setup.

    ``total_budget_bytes`` is the byte cost of the 16-bit reference this
    plan trades against (the budget denominator used for parity checks).
    """

    per_layer: tuple[tuple[int, int], ...]
    group_size: int
    layout: Layout
    total_budget_bytes: int

    def __post_init__(self) -> None:
        for tokens, bits in self.per_layer:
            if bits not in PLAN_BITS:
                raise ContractViolation(f"bits must be one of {PLAN_BITS}, got {bits}")
            if tokens < 1:
                raise ContractViolation("every layer needs at least one token")

    @property
    def layers(self) -> int:
        return len(self.per_layer)

    def quant_config(self, layer: int, outlier_threshold: float | None = None):
        """(K config, V config) for a layer, or None at 16-bit.

        ``per_channel`` plans quantize keys along the token axis and values
        per token (the KIVI split); ``per_token`` plans use per-token groups
        for both.
        """
        tokens, bits = self.per_layer[layer]
        if bits == FULL_PRECISION_BITS:
            return None
        k_cfg = QuantConfig(bits, self.group_size, self.layout, outlier_threshold)
        v_cfg = QuantConfig(bits, self.group_size, Layout.PER_TOKEN, outlier_threshold)
        return k_cfg, v_cfg


@dataclass(frozen=True)
class LayerOverride:
    """Reconfigure layers [start, end) to ``tokens_multiplier`` x base tokens at ``bits``.

    Only budget-preserving combinations are accepted: the multiplier must
    equal 16 / bits, mirroring the 1x@16 / 2x@8 / 4x@4 configurations.
    """

    start: int
    end: int
    tokens_multiplier: int
    bits: int

    def __post_init__(self) -> None:
        if self.start < 0 or self.end <= self.start:
            raise ContractViolation(f"bad layer range [{self.start}, {self.end})")
        if self.bits not in (4, 8, 16):
            raise ContractViolation(f"override bits must be 4, 8 or 16, got {self.bits}")
        if self.tokens_multiplier != 16 // self.bits:
            raise ContractViolation(
                "override must preserve budget: tokens_multiplier must equal 16/bits"
            )


def uniform_plan(
    layers: int,
    base_tokens: int,
    bits: int,
    heads: int,
    head_dim: int,
    group_size: int = 64,
    layout: Layout = Layout.PER_TOKEN,
) -> BudgetPlan:
    """Every layer keeps ``base_tokens * (16 / bits)`` tokens at ``bits``.

    ``base_tokens`` @ 16-bit is the reference configuration whose byte cost
    becomes ``total_budget_bytes``.
    """
    if bits not in PLAN_BITS:
        raise ContractViolation(f"bits must be one of {PLAN_BITS}, got {bits}")
    if base_tokens < 1:
        raise ContractViolation("base_tokens must be >= 1")
    tokens = base_tokens * (FULL_PRECISION_BITS // bits)
    reference = layers * 2 * heads * base_tokens * head_dim * BYTES_PER_FP16
    return BudgetPlan(
        per_layer=tuple((tokens, bits) for _ in range(layers)),
        group_size=group_size,
        layout=layout,
        total_budget_bytes=reference,
    )


def plan_for_tokens(
    tokens_per_layer,
    bits: int,
    heads: int,
    head_dim: int,
    group_size: int = 64,
    layout: Layout = Layout.PER_TOKEN,
) -> BudgetPlan:
    """Plan with explicit per-layer token counts (pyramid allocations etc.)."""
    counts = [int(t) for t in tokens_per_layer]
    base_total = sum(counts) * bits // FULL_PRECISION_BITS
    reference = 2 * heads * base_total * head_dim * BYTES_PER_FP16
    return BudgetPlan(
        per_layer=tuple((t, bits) for t in counts),
        group_size=group_size,
        layout=layout,
        total_budget_bytes=reference,
    )


def pyramid_allocation(
    layers: int,
    total_tokens: int,
    min_fraction: float,
    min_tokens: int = 1,
) -> list[int]:
    """Linearly decreasing per-layer token counts summing to ``total_tokens``.

    Layer 0 gets ``2*avg - min_fraction*avg`` and the last layer
    ``min_fraction*avg``; intermediate layers interpolate. Counts are
    rounded to nearest and the residue is settled on the earliest layers
    (added there, or removed from the latest layers when negative, which
    keeps the sequence non-increasing).
    """
    if layers < 1:
        raise ContractViolation("layers must be >= 1")
    if not 0 < min_fraction <= 1:
        raise ContractViolation("min_fraction must be in (0, 1]")
    if layers == 1:
        counts = [total_tokens]
    else:
        avg = total_tokens / layers
        beta_min = min_fraction * avg
        beta_max = 2 * avg - beta_min
        raw = np.linspace(beta_max, beta_min, layers)
        counts = [int(c) for c in np.rint(raw)]
        residue = total_tokens - sum(counts)
        if residue > 0:
            for i in range(residue):
                counts[i] += 1
        elif residue < 0:
            for i in range(-residue):
                counts[layers - 1 - i] -= 1
    if min(counts) < min_tokens:
        raise ContractViolation(
            f"pyramid gives a layer {min(counts)} tokens, below the minimum {min_tokens}"
        )
    return counts


def plan_bytes(plan: BudgetPlan, heads: int, head_dim: int) -> int:
    """Accounted bytes of a fully populated plan (K and V, all heads).

    Quantized layers follow the group accounting of the quant module, with
    keys grouped by the plan layout and values per token; 16-bit layers are
    charged 2 bytes per element with no metadata.
    """
    total = 0
    for tokens, bits in plan.per_layer:
        if bits == FULL_PRECISION_BITS:
            total += 2 * heads * tokens * head_dim * BYTES_PER_FP16
        else:
            k_cfg = QuantConfig(bits, plan.group_size, plan.layout)
            v_cfg = QuantConfig(bits, plan.group_size, Layout.PER_TOKEN)
            per_head = quantized_bytes_for_shape(
                tokens, head_dim, k_cfg
            ) + quantized_bytes_for_shape(tokens, head_dim, v_cfg)
            total += heads * per_head
    return total


def apply_overrides(plan: BudgetPlan, overrides) -> BudgetPlan:
    """Return a plan with ranges reconfigured; layers outside are untouched.

    Each layer's implied 16-bit-equivalent base count is preserved, so the
    override swaps precision for tokens at (metadata aside) constant bytes.
    """
    overrides = list(overrides)
    spans = sorted((o.start, o.end) for o in overrides)
    for (s0, e0), (s1, _) in zip(spans, spans[1:]):
        if s1 < e0:
            raise ContractViolation("override ranges overlap")
    if spans and spans[-1][1] > plan.layers:
        raise ContractViolation("override range exceeds layer count")

    per_layer = list(plan.per_layer)
    for o in overrides:
        for layer in range(o.start, o.end):
            tokens, bits = per_layer[layer]
            base, rem = divmod(tokens * bits, FULL_PRECISION_BITS)
            if rem:
                raise ContractViolation(
                    f"layer {layer} tokens {tokens}@{bits}-bit has no whole 16-bit base"
                )
            per_layer[layer] = (base * o.tokens_multiplier, o.bits)
    return replace(plan, per_layer=tuple(per_layer))
