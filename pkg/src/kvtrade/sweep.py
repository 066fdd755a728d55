"""Declarative sweep runner over compression configurations.

A sweep config is a flat ``key = value`` text file (lists comma-separated,
one level only, ``#`` comments). The grid crosses eviction policy, bit
width, token multiplier, group size, quantization strategy, layer override
set, sequence length and seed; every grid point prefills a model, compresses
the cache under the point's plan, decodes task queries through it and
records retrieval accuracy, logit perturbation against the uncompressed
decode path, and exact byte accounting.

Infeasible grid points (e.g. a budget below the policy's window) are
recorded as skips with a reason and never crash the sweep. Results are
emitted as CSV with a fixed 14-column schema in deterministic order (grid
order, then seed), so identical configs produce byte-identical files; wall
times are kept on the row objects but excluded from the CSV for that reason.
"""

from __future__ import annotations

import functools
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .budget import (
    BudgetPlan,
    LayerOverride,
    apply_overrides,
    plan_for_tokens,
    pyramid_allocation,
)
from .cache import prefill_compress
from .errors import ContractViolation
from .model import (
    DenseKV,
    Model,
    ModelConfig,
    build_recall_model,
    decode_step,
    decode_step_dense,
    embed_token,
    load_weights,
    prefill,
    random_model,
)
from .prune import PolicyConfig, PolicyKind, ScoreContext
from .quant import Layout
from .tasks import gen_probe_prompt, gen_recall_task


class ConfigError(ValueError):
    """A sweep config failed to parse or validate."""


# Quantization strategy axis: grouping layout for keys, with or without the
# fixed |v| > 6 outlier filter. Values are per-token (both caches grouped
# along channels inside a token) or per-channel (keys grouped along tokens
# inside a channel, values still per-token).
STRATEGIES: dict[str, tuple[Layout, float | None]] = {
    "per_token": (Layout.PER_TOKEN, None),
    "per_channel": (Layout.PER_CHANNEL, None),
    "per_token_outlier": (Layout.PER_TOKEN, 6.0),
    "per_channel_outlier": (Layout.PER_CHANNEL, 6.0),
}

CSV_COLUMNS = (
    "policy",
    "bits",
    "token_multiplier",
    "tokens_per_layer",
    "group_size",
    "layout",
    "override_id",
    "seed",
    "seq_len",
    "accuracy",
    "logit_perturb",
    "bytes",
    "budget_ratio_raw",
    "budget_ratio_meta",
)


@dataclass(frozen=True)
class SweepConfig:
    task: str = "recall"
    model: str = "recall"  # recall | random (or set weights_file)
    weights_file: str = ""
    seq_lens: tuple[int, ...] = (256,)
    seeds: tuple[int, ...] = (0,)
    policies: tuple[str, ...] = ("snapkv",)
    bits: tuple[int, ...] = (4, 8, 16)
    token_multipliers: tuple[int, ...] = (1, 2, 4)
    paired_budget: bool = True
    group_sizes: tuple[int, ...] = (64,)
    layouts: tuple[str, ...] = ("per_token",)
    overrides: tuple[str, ...] = ("none",)
    base_tokens: int = 64
    full_cache_tokens: int = 256
    num_pairs: int = 8
    needle_depths: tuple[float, ...] = ()
    filler_vocab: int = 32
    probe_steps: int = 4
    layers: int = 1
    heads: int = 1
    d_model: int = 32
    vocab: int = 64
    context_limit: int = 2048
    pyramid_min_fraction: float = 0.2
    recent_window: int | None = None
    pool_width: int = 7
    output: str = ""

    def depths(self) -> tuple[float, ...]:
        if self.needle_depths:
            return self.needle_depths
        n = self.num_pairs
        if n == 1:
            return (0.5,)
        return tuple(i / (n - 1) for i in range(n))


@dataclass(frozen=True)
class GridPoint:
    index: int
    policy: str
    bits: int
    multiplier: int
    group_size: int
    strategy: str
    override_spec: str
    seq_len: int
    seed: int


@dataclass
class SweepRow:
    policy: str
    bits: int
    token_multiplier: int
    tokens_per_layer: int
    group_size: int
    layout: str
    override_id: str
    seed: int
    seq_len: int
    accuracy: float
    logit_perturb: float
    bytes: int
    budget_ratio_raw: float
    budget_ratio_meta: float
    wall_time: float = 0.0  # informational only, never emitted to CSV

    def csv_values(self) -> list[str]:
        return [
            self.policy,
            str(self.bits),
            str(self.token_multiplier),
            str(self.tokens_per_layer),
            str(self.group_size),
            self.layout,
            self.override_id,
            str(self.seed),
            str(self.seq_len),
            _fmt(self.accuracy),
            _fmt(self.logit_perturb),
            str(self.bytes),
            _fmt(self.budget_ratio_raw),
            _fmt(self.budget_ratio_meta),
        ]


@dataclass
class SweepSkip:
    point: GridPoint
    reason: str


def _fmt(x: float) -> str:
    return format(float(x), ".6g")


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------

_LIST_INT = {"seq_lens", "seeds", "bits", "token_multipliers", "group_sizes"}
_LIST_FLOAT = {"needle_depths"}
_LIST_STR = {"policies", "layouts", "overrides"}
_SCALAR_INT = {
    "base_tokens",
    "full_cache_tokens",
    "num_pairs",
    "filler_vocab",
    "probe_steps",
    "layers",
    "heads",
    "d_model",
    "vocab",
    "context_limit",
    "pool_width",
}
_SCALAR_FLOAT = {"pyramid_min_fraction"}
_SCALAR_STR = {"task", "model", "weights_file", "output"}
_SCALAR_BOOL = {"paired_budget"}
_OPTIONAL_INT = {"recent_window"}


def parse_config(text: str) -> SweepConfig:
    """Parse and validate the flat key-value schema (see module docstring)."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        try:
            if key in _LIST_INT:
                values[key] = tuple(int(v) for v in _split(val))
            elif key in _LIST_FLOAT:
                values[key] = tuple(float(v) for v in _split(val))
            elif key in _LIST_STR:
                values[key] = tuple(_split(val))
            elif key in _SCALAR_INT:
                values[key] = int(val)
            elif key in _SCALAR_FLOAT:
                values[key] = float(val)
            elif key in _SCALAR_BOOL:
                if val.lower() not in ("true", "false"):
                    raise ValueError(f"expected true/false, got {val!r}")
                values[key] = val.lower() == "true"
            elif key in _OPTIONAL_INT:
                values[key] = int(val) if val else None
            elif key in _SCALAR_STR:
                values[key] = val
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    cfg = SweepConfig(**values)
    problems = validate_config(cfg)
    if problems:
        raise ConfigError("; ".join(problems))
    return cfg


def _split(val: str) -> list[str]:
    return [part.strip() for part in val.split(",") if part.strip()]


def validate_config(cfg: SweepConfig) -> list[str]:
    """Return a list of problems (empty when the config is usable)."""
    problems = []
    if cfg.task not in ("recall", "random_probe"):
        problems.append(f"task must be recall or random_probe, got {cfg.task!r}")
    if cfg.model not in ("recall", "random"):
        problems.append(f"model must be recall or random, got {cfg.model!r}")
    if cfg.task == "recall" and (cfg.model != "recall" or cfg.weights_file):
        # the pair vocabulary cannot be reconstructed from a weights file
        problems.append("the recall task requires the built-in recall model")
    if not (cfg.policies and cfg.bits and cfg.token_multipliers and cfg.group_sizes and cfg.layouts):
        problems.append("grid axes must be non-empty")
    for p in cfg.policies:
        if p not in [k.value for k in PolicyKind]:
            problems.append(f"unknown policy {p!r}")
    for b in cfg.bits:
        if b not in (2, 4, 8, 16):
            problems.append(f"bits must be one of 2/4/8/16, got {b}")
    for s in cfg.layouts:
        if s not in STRATEGIES:
            problems.append(f"unknown layout/strategy {s!r}")
    for spec in cfg.overrides:
        try:
            parse_override_spec(spec)
        except ContractViolation as exc:
            problems.append(f"bad override {spec!r}: {exc}")
    for n in cfg.seq_lens:
        if n < 4:
            problems.append(f"seq_len {n} too short")
        if cfg.model == "random" and n > cfg.context_limit:
            problems.append(f"seq_len {n} exceeds context_limit {cfg.context_limit}")
    if cfg.task == "recall":
        if cfg.needle_depths and len(cfg.needle_depths) != cfg.num_pairs:
            problems.append("needle_depths length must equal num_pairs")
        for d in cfg.needle_depths:
            if not 0.0 <= d <= 1.0:
                problems.append(f"needle depth {d} outside [0, 1]")
        for n in cfg.seq_lens:
            if 2 * cfg.num_pairs > n:
                problems.append(f"{cfg.num_pairs} pairs cannot fit in seq_len {n}")
    if not cfg.seeds:
        problems.append("seeds must be non-empty")
    if cfg.pool_width < 1 or cfg.pool_width % 2 == 0:
        problems.append("pool_width must be odd and >= 1")
    if not 0 < cfg.pyramid_min_fraction <= 1:
        problems.append("pyramid_min_fraction must be in (0, 1]")
    return problems


def parse_override_spec(spec: str) -> list[LayerOverride]:
    """Parse 'none' or ';'-joined 'start-end@BITSxMULT' items."""
    spec = spec.strip()
    if spec in ("", "none"):
        return []
    out = []
    for item in spec.split(";"):
        item = item.strip()
        try:
            rng, _, conf = item.partition("@")
            start_s, _, end_s = rng.partition("-")
            bits_s, _, mult_s = conf.partition("x")
            out.append(
                LayerOverride(
                    start=int(start_s),
                    end=int(end_s),
                    bits=int(bits_s),
                    tokens_multiplier=int(mult_s),
                )
            )
        except (ValueError, TypeError) as exc:
            raise ContractViolation(f"cannot parse override item {item!r}") from exc
    return out


# ---------------------------------------------------------------------------
# Grid execution
# ---------------------------------------------------------------------------


def enumerate_grid(cfg: SweepConfig) -> list[GridPoint]:
    points = []
    index = 0
    for policy in cfg.policies:
        for bits in cfg.bits:
            for mult in cfg.token_multipliers:
                if cfg.paired_budget and bits * mult != 16:
                    continue
                for group in cfg.group_sizes:
                    for strategy in cfg.layouts:
                        for override in cfg.overrides:
                            for seq_len in cfg.seq_lens:
                                for seed in cfg.seeds:
                                    points.append(
                                        GridPoint(
                                            index,
                                            policy,
                                            bits,
                                            mult,
                                            group,
                                            strategy,
                                            override,
                                            seq_len,
                                            seed,
                                        )
                                    )
                                    index += 1
    return points


@functools.lru_cache(maxsize=8)
def _recall_model(num_pairs: int, seq_len: int, filler_vocab: int):
    model, vocab, _margin = build_recall_model(num_pairs, seq_len, filler_vocab)
    return model, vocab


def _build_model(cfg: SweepConfig, point: GridPoint):
    if cfg.weights_file:
        return load_weights(cfg.weights_file), None
    if cfg.model == "recall":
        model, vocab = _recall_model(cfg.num_pairs, point.seq_len, cfg.filler_vocab)
        return model, vocab
    mc = ModelConfig(
        layers=cfg.layers,
        heads=cfg.heads,
        d_model=cfg.d_model,
        vocab=cfg.vocab,
        context_limit=cfg.context_limit,
        seed=point.seed,
    )
    return random_model(mc), None


def _contexts(result) -> list[list[ScoreContext]]:
    n = result.hidden.shape[0]
    return [
        [
            ScoreContext(attn, n, layer_index=layer, head_index=head)
            for head, attn in enumerate(row)
        ]
        for layer, row in enumerate(result.attn)
    ]


def _build_plan(cfg: SweepConfig, point: GridPoint, model: Model, policy: PolicyConfig) -> BudgetPlan:
    layout, _thr = STRATEGIES[point.strategy]
    layers = model.config.layers
    tokens = cfg.base_tokens * point.multiplier
    if point.policy == PolicyKind.PYRAMIDKV.value:
        counts = pyramid_allocation(
            layers,
            tokens * layers,
            cfg.pyramid_min_fraction,
            min_tokens=policy.window,
        )
    else:
        counts = [tokens] * layers
    plan = plan_for_tokens(
        counts,
        point.bits,
        heads=model.config.heads,
        head_dim=model.config.head_dim,
        group_size=point.group_size,
        layout=layout,
    )
    return apply_overrides(plan, parse_override_spec(point.override_spec))


def _full_cache_bytes(cfg: SweepConfig, model: Model) -> int:
    c = model.config
    return c.layers * 2 * c.heads * cfg.full_cache_tokens * c.head_dim * 2


def _run_recall(model: Model, task, point: GridPoint, cache, result):
    hits = 0
    perturb = 0.0
    for query in task.queries:
        h = embed_token(model, query.key_token, position=point.seq_len)
        episode = cache.clone()
        logits = decode_step(model, episode, h)
        dense = DenseKV.from_prefill(result)
        ref = decode_step_dense(model, dense, h)
        hits += int(np.argmax(logits) == query.value_token)
        perturb += float(np.abs(logits - ref).max())
    n = len(task.queries)
    return hits / n, perturb / n


def _run_probe(model: Model, cfg: SweepConfig, point: GridPoint, cache, result):
    dense = DenseKV.from_prefill(result)
    token = int(np.argmax(result.logits))
    agree = 0
    perturb = 0.0
    for step in range(cfg.probe_steps):
        h = embed_token(model, token, position=point.seq_len + step)
        ref = decode_step_dense(model, dense, h)
        logits = decode_step(model, cache, h)
        agree += int(np.argmax(logits) == np.argmax(ref))
        perturb += float(np.abs(logits - ref).max())
        token = int(np.argmax(ref))
    return agree / cfg.probe_steps, perturb / cfg.probe_steps


def run_point(cfg: SweepConfig, point: GridPoint) -> SweepRow | SweepSkip:
    """Execute one grid point; contract violations become skips."""
    start = time.perf_counter()
    try:
        policy = PolicyConfig(
            PolicyKind(point.policy),
            recent_window=cfg.recent_window,
            pool_width=cfg.pool_width,
        )
        model, vocab = _build_model(cfg, point)
        _layout, threshold = STRATEGIES[point.strategy]
        plan = _build_plan(cfg, point, model, policy)

        task = None
        if cfg.task == "recall":
            task = gen_recall_task(
                point.seq_len, cfg.num_pairs, cfg.depths(), point.seed, vocab
            )
            tokens = task.tokens
        else:
            tokens = gen_probe_prompt(point.seq_len, model.config.vocab, point.seed)

        result = prefill(model, tokens)
        cache = prefill_compress(
            result.keys,
            result.values,
            _contexts(result),
            plan,
            policy,
            outlier_threshold=threshold,
        )
        measured = cache.measured_bytes()
        payload = cache.payload_bytes()
        full = _full_cache_bytes(cfg, model)

        if cfg.task == "recall":
            accuracy, perturb = _run_recall(model, task, point, cache, result)
        else:
            accuracy, perturb = _run_probe(model, cfg, point, cache, result)

        return SweepRow(
            policy=point.policy,
            bits=point.bits,
            token_multiplier=point.multiplier,
            tokens_per_layer=cfg.base_tokens * point.multiplier,
            group_size=point.group_size,
            layout=point.strategy,
            override_id=point.override_spec if point.override_spec else "none",
            seed=point.seed,
            seq_len=point.seq_len,
            accuracy=accuracy,
            logit_perturb=perturb,
            bytes=measured,
            budget_ratio_raw=payload / full,
            budget_ratio_meta=measured / full,
            wall_time=time.perf_counter() - start,
        )
    except ContractViolation as exc:
        return SweepSkip(point, str(exc))


def _run_point_args(args) -> SweepRow | SweepSkip:
    return run_point(*args)


def run_sweep(cfg: SweepConfig, parallel: int = 1) -> tuple[list[SweepRow], list[SweepSkip]]:
    """Run the whole grid; returns (completed rows, skipped points) in grid order."""
    points = enumerate_grid(cfg)
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            outcomes = list(pool.map(_run_point_args, [(cfg, p) for p in points]))
    else:
        outcomes = [run_point(cfg, p) for p in points]
    rows = [o for o in outcomes if isinstance(o, SweepRow)]
    skips = [o for o in outcomes if isinstance(o, SweepSkip)]
    return rows, skips


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------


def rows_to_csv(rows: list[SweepRow]) -> str:
    lines = [",".join(CSV_COLUMNS)]
    lines.extend(",".join(row.csv_values()) for row in rows)
    return "\n".join(lines) + "\n"


def emit_csv(rows: list[SweepRow], path) -> None:
    """Write rows with the fixed 14-column schema; header-only when empty."""
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(rows_to_csv(rows))
    except OSError as exc:
        raise OSError(f"cannot write CSV to {path}: {exc}") from exc


def parse_csv(text: str) -> list[SweepRow]:
    """Parse emit_csv output back into rows (used by tests and scripts)."""
    lines = [ln for ln in text.splitlines() if ln]
    if not lines or lines[0] != ",".join(CSV_COLUMNS):
        raise ValueError("unexpected CSV header")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != len(CSV_COLUMNS):
            raise ValueError(f"expected {len(CSV_COLUMNS)} columns, got {len(parts)}")
        rows.append(
            SweepRow(
                policy=parts[0],
                bits=int(parts[1]),
                token_multiplier=int(parts[2]),
                tokens_per_layer=int(parts[3]),
                group_size=int(parts[4]),
                layout=parts[5],
                override_id=parts[6],
                seed=int(parts[7]),
                seq_len=int(parts[8]),
                accuracy=float(parts[9]),
                logit_perturb=float(parts[10]),
                bytes=int(parts[11]),
                budget_ratio_raw=float(parts[12]),
                budget_ratio_meta=float(parts[13]),
            )
        )
    return rows


DEMO_CONFIG = """\
# Built-in demonstration sweep: paired token-precision trade-off on the
# retrieval task, two eviction policies, two seeds.
task = recall
model = recall
seq_lens = 256
seeds = 0, 1
policies = snapkv, streaming_llm
bits = 16, 8, 4
token_multipliers = 1, 2, 4
paired_budget = true
group_sizes = 64
layouts = per_token
overrides = none
base_tokens = 64
full_cache_tokens = 256
num_pairs = 8
filler_vocab = 32
"""
