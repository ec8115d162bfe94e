"""Closed-form KV-cache sizes, decode roofline speedups and prefill intensity.

Per token and per layer a method stores ``k_dims + v_dims`` cache elements:

=================  ==========================================
MHA                k = v = d_model
ThinKeys(ds)       k = ds, v = d_model
GQA(g)             k = v = g * d_head   (g = number of KV heads)
GQAPlusThin(g,ds)  k = g * d_head * ds / d_model, v = g * d_head
MLA(d_c, d_rope)   one joint latent of d_c + d_rope
=================  ==========================================

A cache then holds ``dims * n_tokens * n_layers * bytes_per_elem`` bytes.
Byte counts are exact (``Fraction``); the unit convention only changes how
they are rendered.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Union

UNITS = {"decimal_GB": 10**9, "binary_GiB": 2**30}
CONTEXT_MULT = {"literal": 1, "K_as_1000": 1000, "K_as_1024": 1024}


@dataclass(frozen=True)
class CacheSpec:
    d_model: int
    n_layers: int
    n_heads: int
    n_kv_heads: int
    d_head: int
    context_tokens: Union[int, float, str]
    bytes_per_elem: float = 2
    d_select: int | None = None
    unit_convention: str = "decimal_GB"
    context_interpretation: str = "K_as_1000"

    def __post_init__(self):
        for name in ("d_model", "n_layers", "n_heads", "n_kv_heads", "d_head"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.unit_convention not in UNITS:
            raise ValueError(f"unit_convention must be one of {sorted(UNITS)}")
        if self.context_interpretation not in CONTEXT_MULT:
            raise ValueError(f"context_interpretation must be one of {sorted(CONTEXT_MULT)}")
        if Fraction(self.bytes_per_elem) <= 0:
            raise ValueError("bytes_per_elem must be positive")
        if self.n_tokens < 1:
            raise ValueError("context must be at least one token")

    @property
    def n_tokens(self) -> int:
        """Context length in tokens.

        Under ``literal`` a plain number is a token count. Otherwise plain
        numbers and ``K``-suffixed strings are thousands of tokens and ``M``
        means K*K (so ``"1M"`` is 1,000,000 or 1,048,576 tokens).
        """
        mult = CONTEXT_MULT[self.context_interpretation]
        c = self.context_tokens
        if isinstance(c, str):
            m = re.fullmatch(r"\s*([0-9.]+)\s*([kKmM]?)\s*", c)
            if not m:
                raise ValueError(f"cannot parse context {c!r}")
            val, suffix = Fraction(m.group(1)), m.group(2).upper()
            k = mult if mult > 1 else 1000
            n = val * {"": 1 if mult == 1 else k, "K": k, "M": k * k}[suffix]
        else:
            n = Fraction(c) * mult
        if n.denominator != 1:
            raise ValueError(f"context {c!r} is not a whole number of tokens")
        return int(n)

    @property
    def unit_bytes(self) -> int:
        return UNITS[self.unit_convention]

    @property
    def unit_label(self) -> str:
        return "GB" if self.unit_convention == "decimal_GB" else "GiB"


# ------------------------------------------------------------ methods


@dataclass(frozen=True)
class MHA:
    label = "MHA"


@dataclass(frozen=True)
class ThinKeys:
    d_select: int

    @property
    def label(self):
        return f"ThinKeys(d_select={self.d_select})"


@dataclass(frozen=True)
class GQA:
    groups: int

    @property
    def label(self):
        return f"GQA-{self.groups}"


@dataclass(frozen=True)
class MLA:
    d_c: int
    d_h_rope: int = 0

    @property
    def label(self):
        return f"MLA(d_c={self.d_c}, d_h_rope={self.d_h_rope})"


@dataclass(frozen=True)
class GQAPlusThin:
    groups: int
    d_select: int

    @property
    def label(self):
        return f"GQA-{self.groups}+ThinKeys(d_select={self.d_select})"


@dataclass(frozen=True)
class Quantized:
    inner: "MethodSpec"
    key_bits: int = 16
    value_bits: int = 16

    def __post_init__(self):
        if isinstance(self.inner, Quantized):
            raise ValueError("Quantized methods nest only one level deep")
        if self.key_bits < 1 or self.value_bits < 1:
            raise ValueError("bit widths must be positive")

    @property
    def label(self):
        return f"{self.inner.label}@K{self.key_bits}/V{self.value_bits}"


MethodSpec = Union[MHA, ThinKeys, GQA, MLA, GQAPlusThin, Quantized]


@dataclass(frozen=True)
class Budget:
    k_dims: int
    v_dims: int
    joint: bool = False

    @property
    def total_dims(self) -> int:
        return self.k_dims + self.v_dims


def kv_budget_per_token_layer(method: MethodSpec, d_model: int, d_head: int | None = None) -> Budget:
    """Cache elements stored per token per layer."""
    if isinstance(method, Quantized):
        return kv_budget_per_token_layer(method.inner, d_model, d_head)
    if isinstance(method, MHA):
        return Budget(d_model, d_model)
    if isinstance(method, ThinKeys):
        if not 1 <= method.d_select <= d_model:
            raise ValueError(f"d_select={method.d_select} must be in [1, d_model={d_model}]")
        return Budget(method.d_select, d_model)
    if isinstance(method, MLA):
        if method.d_c < 1 or method.d_h_rope < 0:
            raise ValueError("MLA needs d_c >= 1 and d_h_rope >= 0")
        return Budget(method.d_c + method.d_h_rope, 0, joint=True)
    if d_head is None:
        raise ValueError(f"{method.label} needs d_head")
    if isinstance(method, GQA):
        if method.groups < 1 or method.groups * d_head > d_model:
            raise ValueError(f"GQA groups={method.groups} inconsistent with d_model={d_model}, d_head={d_head}")
        return Budget(method.groups * d_head, method.groups * d_head)
    if isinstance(method, GQAPlusThin):
        if method.groups < 1 or method.groups * d_head > d_model:
            raise ValueError(f"GQA groups={method.groups} inconsistent with d_model={d_model}, d_head={d_head}")
        if not 1 <= method.d_select <= d_model:
            raise ValueError(f"d_select={method.d_select} must be in [1, d_model={d_model}]")
        k_head = Fraction(d_head * method.d_select, d_model)
        if k_head.denominator != 1:
            raise ValueError(f"d_select={method.d_select} gives a fractional per-head key width {k_head}")
        return Budget(method.groups * int(k_head), method.groups * d_head)
    raise TypeError(f"unknown method {method!r}")


@dataclass(frozen=True)
class CacheBytes:
    method: str
    budget: Budget
    k_bytes: Fraction
    v_bytes: Fraction
    mha_total_bytes: Fraction
    mha_k_bytes: Fraction
    unit_bytes: int = field(default=10**9)

    @property
    def total_bytes(self) -> Fraction:
        return self.k_bytes + self.v_bytes

    @property
    def saved_bytes(self) -> Fraction:
        return self.mha_total_bytes - self.total_bytes

    @property
    def saved_fraction(self) -> Fraction:
        return self.saved_bytes / self.mha_total_bytes

    @property
    def key_compression(self) -> Fraction:
        """MHA key-cache bytes over this method's key-cache bytes."""
        return self.mha_k_bytes / self.k_bytes

    def in_units(self, value: Fraction) -> float:
        return float(value / self.unit_bytes)


def _bytes_per_elem(spec: CacheSpec, bits: int | None) -> Fraction:
    return Fraction(bits, 8) if bits is not None else Fraction(spec.bytes_per_elem)


def kv_cache_bytes(spec: CacheSpec, method: MethodSpec) -> CacheBytes:
    d_select = spec.d_select
    if isinstance(method, ThinKeys) and method.d_select is None:
        method = ThinKeys(d_select)
    budget = kv_budget_per_token_layer(method, spec.d_model, spec.d_head)
    kbits = method.key_bits if isinstance(method, Quantized) else None
    vbits = method.value_bits if isinstance(method, Quantized) else None
    tokens_layers = spec.n_tokens * spec.n_layers
    k = budget.k_dims * tokens_layers * _bytes_per_elem(spec, kbits)
    v = budget.v_dims * tokens_layers * _bytes_per_elem(spec, vbits)
    mha_k = spec.d_model * tokens_layers * Fraction(spec.bytes_per_elem)
    return CacheBytes(
        method=method.label,
        budget=budget,
        k_bytes=k,
        v_bytes=v,
        mha_total_bytes=2 * mha_k,
        mha_k_bytes=mha_k,
        unit_bytes=spec.unit_bytes,
    )


def composition_report(spec: CacheSpec, methods) -> list[dict]:
    """One row per method on a shared MHA baseline."""
    rows = []
    for method in methods:
        cb = kv_cache_bytes(spec, method)
        rows.append(
            {
                "method": cb.method,
                "k_dims": cb.budget.k_dims,
                "v_dims": cb.budget.v_dims,
                "budget_dims": cb.budget.total_dims,
                "joint": cb.budget.joint,
                "k_bytes": int(cb.k_bytes) if cb.k_bytes.denominator == 1 else float(cb.k_bytes),
                "v_bytes": int(cb.v_bytes) if cb.v_bytes.denominator == 1 else float(cb.v_bytes),
                "total_bytes": int(cb.total_bytes) if cb.total_bytes.denominator == 1 else float(cb.total_bytes),
                f"k_{spec.unit_label}": cb.in_units(cb.k_bytes),
                f"v_{spec.unit_label}": cb.in_units(cb.v_bytes),
                f"total_{spec.unit_label}": cb.in_units(cb.total_bytes),
                f"saved_{spec.unit_label}": cb.in_units(cb.saved_bytes),
                "saved_fraction": float(cb.saved_fraction),
                "key_compression": float(cb.key_compression),
            }
        )
    return rows


# ------------------------------------------------------------ roofline


@dataclass(frozen=True)
class RooflineSpec:
    weight_bytes: float
    kv_bytes_per_seq: float
    batch_size: float = 1

    def __post_init__(self):
        if self.weight_bytes <= 0 or self.kv_bytes_per_seq <= 0 or self.batch_size < 0:
            raise ValueError(f"roofline inputs must be positive: {self}")

    @property
    def bytes_per_step(self) -> float:
        return self.weight_bytes + self.batch_size * self.kv_bytes_per_seq

    def at_batch(self, b: float) -> "RooflineSpec":
        return replace(self, batch_size=b)


def roofline_speedup(base: RooflineSpec, compressed: RooflineSpec) -> float:
    """Bandwidth-bound decode speedup ``(W + b C) / (W' + b C')``."""
    if base.batch_size != compressed.batch_size:
        raise ValueError("base and compressed specs must use the same batch size")
    return base.bytes_per_step / compressed.bytes_per_step


@dataclass(frozen=True)
class DecodePreset:
    """Dimensions of a grouped-query decoder for roofline and cache reports."""

    name: str
    d_model: int
    n_layers: int
    n_heads: int
    n_kv_heads: int
    d_head: int
    context: int
    bytes_per_elem: int
    weight_bytes: float
    citation: str

    @property
    def key_width(self) -> int:
        return self.n_kv_heads * self.d_head

    def kv_bytes(self, key_width: int | None = None) -> int:
        """Per-sequence K+V cache bytes with the given total key width per layer."""
        kw = self.key_width if key_width is None else key_width
        return self.n_layers * self.context * self.bytes_per_elem * (kw + self.n_kv_heads * self.d_head)

    def weight_savings_params(self, rank: int) -> int:
        """Parameters removed from W_Q and W_K when keys are factored to total width ``rank``."""
        self.check_rank(rank)
        dk = rank // self.n_kv_heads
        q_saved = self.d_model * self.n_heads * (self.d_head - dk)
        k_saved = self.d_model * (self.key_width - rank)
        return self.n_layers * (q_saved + k_saved)

    def check_rank(self, rank: int) -> None:
        if not (1 <= rank <= self.key_width and rank % self.n_kv_heads == 0):
            raise ValueError(
                f"rank {rank} must be a multiple of n_kv_heads={self.n_kv_heads} in [1, {self.key_width}]"
            )


PRESETS = {
    "mistral7b": DecodePreset(
        name="mistral7b",
        d_model=4096,
        n_layers=32,
        n_heads=32,
        n_kv_heads=8,
        d_head=128,
        context=4096,
        bytes_per_elem=2,
        weight_bytes=14.2e9,
        citation="Mistral-7B decode setting: W=14.2 GB weights read per step, "
        "L=32, 8 KV heads x 128, 32 query heads, context 4096, bf16",
    ),
    "llama7b": DecodePreset(
        name="llama7b",
        d_model=4096,
        n_layers=32,
        n_heads=32,
        n_kv_heads=32,
        d_head=128,
        context=131072,
        bytes_per_elem=2,
        weight_bytes=2 * 6_738_415_616,
        citation="LLaMA-7B analytical comparison: d_model=4096, 32 layers, 32 heads, 128K context, bf16",
    ),
    "gpt2": DecodePreset(
        name="gpt2",
        d_model=768,
        n_layers=12,
        n_heads=12,
        n_kv_heads=12,
        d_head=64,
        context=1024,
        bytes_per_elem=2,
        weight_bytes=2 * 124_439_808,
        citation="GPT-2 small: d_model=768, 12 layers, 12 heads of 64",
    ),
}


def preset_roofline_inputs(preset: DecodePreset, rank: int, batch_size: float = 1):
    """(baseline, factored) roofline specs for keys factored to total width ``rank``."""
    preset.check_rank(rank)
    saved = preset.weight_savings_params(rank) * preset.bytes_per_elem
    base = RooflineSpec(preset.weight_bytes, preset.kv_bytes(), batch_size)
    comp = RooflineSpec(preset.weight_bytes - saved, preset.kv_bytes(rank), batch_size)
    return base, comp


def mistral_roofline_inputs(rank: int, batch_size: float = 1):
    return preset_roofline_inputs(PRESETS["mistral7b"], rank, batch_size)


def speedup_table(preset: DecodePreset, rank: int, batches) -> list[dict]:
    base, comp = preset_roofline_inputs(preset, rank)
    rows = []
    for b in batches:
        rows.append(
            {
                "batch": b,
                "speedup": roofline_speedup(base.at_batch(b), comp.at_batch(b)),
                "kv_fraction_of_traffic": b * base.kv_bytes_per_seq / base.at_batch(b).bytes_per_step,
            }
        )
    return rows


# ------------------------------------------------------------ prefill


@dataclass(frozen=True)
class PrefillIntensity:
    qk_flops: int
    kv_bytes: int

    @property
    def intensity(self) -> float:
        return self.qk_flops / self.kv_bytes


def prefill_arithmetic_intensity(n_heads: int, d_head_qk: int, d_head_v: int, s: int,
                                 bytes_per_elem: int = 2) -> PrefillIntensity:
    """FLOP/byte of one layer's prefill score computation.

    FLOPs: ``Q K^T`` over all query heads at 2 FLOPs per multiply-add,
    ``2 * s^2 * d_head_qk * n_heads``. Bytes: one head's K and V tiles,
    ``s * (d_head_qk + d_head_v) * bytes_per_elem``, streamed once.
    """
    if s < 1:
        raise ValueError("context s must be >= 1")
    flops = 2 * s * s * d_head_qk * n_heads
    kv = s * (d_head_qk + d_head_v) * bytes_per_elem
    return PrefillIntensity(flops, kv)


def qk_flops_per_head(s: int, d_head_qk: int) -> int:
    return 2 * s * s * d_head_qk
