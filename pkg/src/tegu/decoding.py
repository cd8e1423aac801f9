"""Greedy, two-model contrastive, and temporal-guidance decoding.

Temporal guidance contrasts the expert next-token distribution with an amateur
built from the model's own stale hidden states: for each offset ``k`` the
projector maps ``h[t-1-k]`` to a distribution over ``x[t]``, the per-offset
amateurs are mixed in log space, and the score is

    V = logp_exp + alpha * (logp_exp - logp_amt)

followed by the plausibility mask ``p_exp >= tau * max(p_exp)``.
"""

from __future__ import annotations

import json
import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .cmtpp import Projector
from .model import Backbone, ContextLengthError, KVCache


class DecodeError(ValueError):
    pass


@dataclass
class GuidanceConfig:
    offsets: tuple[int, ...] = (1,)
    weights: tuple[float, ...] | None = None
    alpha: float = 0.2
    tau: float = 0.1
    max_new_tokens: int = 64
    sampling: str = "argmax"
    seed: int = 0

    def __post_init__(self):
        self.offsets = tuple(int(k) for k in self.offsets)
        if self.weights is None:
            self.weights = tuple(1.0 / len(self.offsets) for _ in self.offsets) if self.offsets else ()
        else:
            self.weights = tuple(float(w) for w in self.weights)

    @property
    def max_offset(self) -> int:
        return max(self.offsets)

    def problems(self, prefix: str = "", projector_max_offset: int | None = None) -> list[str]:
        errs = []
        if not self.offsets:
            errs.append(f"{prefix}offsets must be non-empty")
        if any(k < 1 for k in self.offsets):
            errs.append(f"{prefix}offsets must be >= 1")
        if len(set(self.offsets)) != len(self.offsets):
            errs.append(f"{prefix}offsets must be distinct")
        if projector_max_offset is not None and self.offsets and self.max_offset > projector_max_offset:
            errs.append(f"{prefix}offset {self.max_offset} exceeds projector max_offset {projector_max_offset}")
        if len(self.weights) != len(self.offsets):
            errs.append(f"{prefix}weights must have one entry per offset")
        elif any(w < 0 for w in self.weights):
            errs.append(f"{prefix}weights must be >= 0")
        elif self.offsets and abs(sum(self.weights) - 1.0) > 1e-9:
            errs.append(f"{prefix}weights must sum to 1")
        if not self.alpha >= 0:
            errs.append(f"{prefix}alpha must be >= 0")
        if not 0.0 <= self.tau <= 1.0:
            errs.append(f"{prefix}tau must be in [0, 1]")
        if self.max_new_tokens < 0:
            errs.append(f"{prefix}max_new_tokens must be >= 0")
        if self.sampling not in ("argmax", "categorical"):
            errs.append(f"{prefix}sampling must be 'argmax' or 'categorical'")
        return errs

    def validate(self, projector_max_offset: int | None = None) -> "GuidanceConfig":
        errs = self.problems(projector_max_offset=projector_max_offset)
        if errs:
            raise DecodeError("; ".join(errs))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["offsets"] = list(self.offsets)
        d["weights"] = list(self.weights)
        return d


class HiddenRing:
    """The most recent ``capacity`` final-layer hidden states, keyed by position."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise DecodeError("ring capacity must be >= 1")
        self.capacity = capacity
        self._items: deque[tuple[int, np.ndarray]] = deque()
        self.evicted: list[int] = []

    def push(self, position: int, h: np.ndarray) -> list[int]:
        if self._items and position <= self._items[-1][0]:
            raise DecodeError(f"ring positions must increase: {position} after {self._items[-1][0]}")
        self._items.append((position, h))
        dropped = []
        while len(self._items) > self.capacity:
            dropped.append(self._items.popleft()[0])
        self.evicted.extend(dropped)
        return dropped

    def get(self, position: int) -> np.ndarray | None:
        if not self._items:
            return None
        first = self._items[0][0]
        idx = position - first
        # positions are contiguous once prefill starts at 0
        if 0 <= idx < len(self._items) and self._items[idx][0] == position:
            return self._items[idx][1]
        for pos, h in self._items:
            if pos == position:
                return h
        return None

    @property
    def positions(self) -> list[int]:
        return [p for p, _ in self._items]

    @property
    def nbytes(self) -> int:
        return sum(h.nbytes for _, h in self._items)

    def __len__(self) -> int:
        return len(self._items)


@dataclass
class StepRecord:
    step: int
    chosen_id: int
    logp_exp_chosen: float
    logp_amt_chosen_per_k: dict[int, float | None]
    masked_count: int
    guided_score_chosen: float
    entropy_exp: float
    ops_backbone: int
    ops_projector: int
    expert_top: list[tuple[int, float]] = field(default_factory=list)
    seconds: float = 0.0

    def to_json(self) -> dict:
        return {
            "step": self.step,
            "chosen_id": self.chosen_id,
            "logp_exp_chosen": self.logp_exp_chosen,
            "logp_amt_chosen_per_k": {str(k): v for k, v in self.logp_amt_chosen_per_k.items()},
            "masked_count": self.masked_count,
            "guided_score_chosen": self.guided_score_chosen,
            "entropy_exp": self.entropy_exp,
            "ops_backbone": self.ops_backbone,
            "ops_projector": self.ops_projector,
            "expert_top": [[i, lp] for i, lp in self.expert_top],
        }


@dataclass
class DecodeTrace:
    method: str
    prompt_len: int = 0
    records: list[StepRecord] = field(default_factory=list)
    prefill_backbone: int = 0
    backbone_steps: int = 0
    projector_calls: int = 0
    warmup_drops: int = 0
    state_bytes: int = 0
    ring_positions: list[list[int]] = field(default_factory=list, repr=False)

    @property
    def n_tokens(self) -> int:
        return len(self.records)

    @property
    def seconds(self) -> float:
        return sum(r.seconds for r in self.records)

    def write_jsonl(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r.to_json()) + "\n")


# ---------------------------------------------------------------------------
# Scoring primitives
# ---------------------------------------------------------------------------


def aggregate_amateur(per_offset_logps: Sequence[np.ndarray], logweights: Sequence[float]) -> np.ndarray:
    return nx.weighted_logsumexp(per_offset_logps, logweights)


def guided_scores(logp_exp: np.ndarray, logp_amt: np.ndarray, alpha: float) -> np.ndarray:
    if np.shape(logp_exp) != np.shape(logp_amt):
        raise DecodeError(f"expert {np.shape(logp_exp)} and amateur {np.shape(logp_amt)} differ")
    if alpha < 0:
        raise DecodeError("alpha must be >= 0")
    return logp_exp + alpha * (logp_exp - logp_amt)


def guided_scores_scaled(logp_exp: np.ndarray, logp_amt: np.ndarray, alpha: float) -> np.ndarray:
    """The same score written as ``(1 + alpha) * logp_exp - alpha * logp_amt``."""
    return (1.0 + alpha) * logp_exp - alpha * logp_amt


def apc_keep(p_exp: np.ndarray, tau: float) -> np.ndarray:
    """Tokens that pass ``p_exp >= tau * max(p_exp)``."""
    if tau <= 0:
        return np.ones(np.shape(p_exp), dtype=bool)
    return p_exp >= tau * p_exp.max()


def apc_mask(scores: np.ndarray, p_exp: np.ndarray, tau: float) -> np.ndarray:
    keep = apc_keep(np.asarray(p_exp), tau)
    return np.where(keep, scores, -np.inf)


def select_token(scores: np.ndarray, sampling: str = "argmax", rng: np.random.Generator | None = None) -> int:
    if sampling == "argmax":
        return int(np.argmax(scores))  # first maximum: lowest id wins ties
    p = nx.softmax(scores)
    return int(rng.choice(len(p), p=p))


# ---------------------------------------------------------------------------
# Decode loops
# ---------------------------------------------------------------------------


def _check_budget(prompt: Sequence[int], max_new: int, max_seq_len: int) -> None:
    if len(prompt) < 1:
        raise DecodeError("prompt must contain at least one token")
    if len(prompt) + max_new > max_seq_len:
        raise ContextLengthError(
            f"prompt ({len(prompt)}) + max_new ({max_new}) exceeds max_seq_len {max_seq_len}"
        )


def _prefill(backbone: Backbone, prompt: Sequence[int], cache: KVCache, trace: DecodeTrace, ring=None) -> None:
    """Consume all but the last prompt token; the last is fed by the first decode step."""
    for pos, tok in enumerate(prompt[:-1]):
        h, _ = backbone.step(tok, cache)
        trace.prefill_backbone += 1
        if ring is not None:
            ring.push(pos, h)


def _top(logp: np.ndarray, n: int = 5) -> list[tuple[int, float]]:
    idx = np.argsort(-logp, kind="stable")[:n]
    return [(int(i), float(logp[i])) for i in idx]


def greedy_decode(prompt: Sequence[int], backbone: Backbone, max_new: int, trace: DecodeTrace | None = None) -> list[int]:
    """Argmax of the expert at every step. Returns prompt + continuation."""
    prompt = [int(t) for t in prompt]
    _check_budget(prompt, max_new, backbone.config.max_seq_len)
    trace = trace if trace is not None else DecodeTrace("greedy")
    trace.method, trace.prompt_len = "greedy", len(prompt)
    cache = backbone.new_cache()
    out = list(prompt)
    if max_new == 0:
        return out
    _prefill(backbone, prompt, cache, trace)
    pending = prompt[-1]
    for n in range(max_new):
        t0 = time.perf_counter()
        _, logits = backbone.step(pending, cache)
        trace.backbone_steps += 1
        logp = nx.log_softmax(logits)
        x = int(np.argmax(logp))
        dt = time.perf_counter() - t0
        trace.records.append(StepRecord(
            step=n, chosen_id=x, logp_exp_chosen=float(logp[x]), logp_amt_chosen_per_k={},
            masked_count=0, guided_score_chosen=float(logp[x]),
            entropy_exp=float(nx.entropy_from_logprobs(logp)),
            ops_backbone=trace.backbone_steps, ops_projector=0, expert_top=_top(logp), seconds=dt,
        ))
        out.append(x)
        pending = x
    trace.state_bytes = backbone.nbytes + cache.nbytes
    return out


def tegu_decode(
    prompt: Sequence[int], backbone: Backbone, projector: Projector, cfg: GuidanceConfig
) -> tuple[list[int], DecodeTrace]:
    """Temporal-guidance decoding. Returns ``(prompt + continuation, trace)``.

    Offsets whose stale state precedes the prompt are dropped for that step and
    the remaining weights renormalized; with none available the step is plain
    expert decoding.
    """
    cfg.validate(projector.config.max_offset)
    if projector.config.d_model != backbone.config.d_model:
        raise DecodeError("projector and backbone hidden sizes differ")
    prompt = [int(t) for t in prompt]
    _check_budget(prompt, cfg.max_new_tokens, backbone.config.max_seq_len)
    trace = DecodeTrace("tegu", prompt_len=len(prompt))
    rng = np.random.default_rng(cfg.seed)
    cache = backbone.new_cache()
    ring = HiddenRing(cfg.max_offset)
    plan = projector.plan()
    W = backbone.params["lm_head"]
    weights = dict(zip(cfg.offsets, cfg.weights))
    out = list(prompt)
    if cfg.max_new_tokens == 0:
        return out, trace
    _prefill(backbone, prompt, cache, trace, ring)
    pending = prompt[-1]
    for n in range(cfg.max_new_tokens):
        t0 = time.perf_counter()
        h, logits = backbone.step(pending, cache)
        trace.backbone_steps += 1
        pos = cache.length - 1
        logp_exp = nx.log_softmax(logits)

        amateurs, avail_w = {}, {}
        for k in cfg.offsets:
            stale = ring.get(pos - k)
            if stale is None:
                trace.warmup_drops += 1
                continue
            amateurs[k] = nx.log_softmax(plan(stale, k) @ W)
            trace.projector_calls += 1
            avail_w[k] = weights[k]
        live = [k for k in amateurs if avail_w[k] > 0]
        if len(live) == 1:
            # a one-component mixture is that component (the Bi-step case)
            scores = guided_scores(logp_exp, amateurs[live[0]], cfg.alpha)
        elif live:
            z = sum(avail_w[k] for k in live)
            logp_amt = aggregate_amateur([amateurs[k] for k in live], [math.log(avail_w[k] / z) for k in live])
            scores = guided_scores(logp_exp, logp_amt, cfg.alpha)
        else:
            scores = logp_exp.copy()
        keep = apc_keep(np.exp(logp_exp), cfg.tau)
        masked = np.where(keep, scores, -np.inf)
        x = select_token(masked, cfg.sampling, rng)
        ring.push(pos, h)
        trace.ring_positions.append(ring.positions)
        dt = time.perf_counter() - t0
        trace.records.append(StepRecord(
            step=n, chosen_id=x, logp_exp_chosen=float(logp_exp[x]),
            logp_amt_chosen_per_k={k: (float(amateurs[k][x]) if k in amateurs else None) for k in cfg.offsets},
            masked_count=int((~keep).sum()), guided_score_chosen=float(masked[x]),
            entropy_exp=float(nx.entropy_from_logprobs(logp_exp)),
            ops_backbone=trace.backbone_steps, ops_projector=trace.projector_calls,
            expert_top=_top(logp_exp), seconds=dt,
        ))
        out.append(x)
        pending = x
    trace.state_bytes = backbone.nbytes + cache.nbytes + projector.nbytes + ring.nbytes
    return out, trace


def cd_decode(
    prompt: Sequence[int],
    expert: Backbone,
    amateur: Backbone,
    alpha: float,
    tau: float,
    max_new: int,
    trace: DecodeTrace | None = None,
) -> list[int]:
    """Two-model contrastive decoding with the same contrast and mask as TeGu."""
    if expert.config.vocab_size != amateur.config.vocab_size:
        raise DecodeError(
            f"vocab mismatch: expert {expert.config.vocab_size} vs amateur {amateur.config.vocab_size}"
        )
    prompt = [int(t) for t in prompt]
    _check_budget(prompt, max_new, min(expert.config.max_seq_len, amateur.config.max_seq_len))
    trace = trace if trace is not None else DecodeTrace("cd")
    trace.method, trace.prompt_len = "cd", len(prompt)
    c_exp, c_amt = expert.new_cache(), amateur.new_cache()
    out = list(prompt)
    if max_new == 0:
        return out
    _prefill(expert, prompt, c_exp, trace)
    _prefill(amateur, prompt, c_amt, trace)
    pending = prompt[-1]
    for n in range(max_new):
        t0 = time.perf_counter()
        _, le = expert.step(pending, c_exp)
        _, la = amateur.step(pending, c_amt)
        trace.backbone_steps += 2
        logp_exp, logp_amt = nx.log_softmax(le), nx.log_softmax(la)
        keep = apc_keep(np.exp(logp_exp), tau)
        masked = np.where(keep, guided_scores(logp_exp, logp_amt, alpha), -np.inf)
        x = int(np.argmax(masked))
        dt = time.perf_counter() - t0
        trace.records.append(StepRecord(
            step=n, chosen_id=x, logp_exp_chosen=float(logp_exp[x]),
            logp_amt_chosen_per_k={0: float(logp_amt[x])}, masked_count=int((~keep).sum()),
            guided_score_chosen=float(masked[x]), entropy_exp=float(nx.entropy_from_logprobs(logp_exp)),
            ops_backbone=trace.backbone_steps, ops_projector=0, expert_top=_top(logp_exp), seconds=dt,
        ))
        out.append(x)
        pending = x
    trace.state_bytes = expert.nbytes + amateur.nbytes + c_exp.nbytes + c_amt.nbytes
    return out
