"""Entropy hierarchy across offsets, n-gram diversity, and decode cost accounting."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .cmtpp import Projector
from .decoding import DecodeTrace
from .model import Backbone

N_BINS = 50


class MetricsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# n-gram diversity
# ---------------------------------------------------------------------------


def ngrams(tokens: Sequence[int], n: int) -> list[tuple[int, ...]]:
    tokens = list(tokens)
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def distinct_n(tokens: Sequence[int], n: int) -> float:
    """Unique n-grams over total n-grams."""
    if n < 1:
        raise MetricsError("n must be >= 1")
    if len(tokens) < n:
        raise MetricsError(f"need at least {n} tokens for {n}-grams, got {len(tokens)}")
    grams = ngrams(tokens, n)
    return len(set(grams)) / len(grams)


def rep_n(tokens: Sequence[int], n: int) -> float:
    return 1.0 - distinct_n(tokens, n)


def corpus_distinct_n(sequences: Iterable[Sequence[int]], n: int) -> float:
    """Distinct-n pooled over several sequences; n-grams never span two sequences."""
    total, seen = 0, set()
    for seq in sequences:
        grams = ngrams(seq, n)
        total += len(grams)
        seen.update(grams)
    if total == 0:
        raise MetricsError(f"no sequence has {n} or more tokens")
    return len(seen) / total


@dataclass
class DiversityReport:
    distinct_1: float
    distinct_2: float
    rep_4: float
    n_tokens: int
    n_sequences: int = 1

    def to_dict(self) -> dict:
        return dict(distinct_1=self.distinct_1, distinct_2=self.distinct_2, rep_4=self.rep_4,
                    n_tokens=self.n_tokens, n_sequences=self.n_sequences)


def diversity_report(continuations: Sequence[Sequence[int]]) -> DiversityReport:
    """Corpus-level diversity over generated continuations (prompts excluded by the caller)."""
    continuations = [list(c) for c in continuations]
    return DiversityReport(
        distinct_1=corpus_distinct_n(continuations, 1),
        distinct_2=corpus_distinct_n(continuations, 2),
        rep_4=1.0 - corpus_distinct_n(continuations, 4),
        n_tokens=sum(len(c) for c in continuations),
        n_sequences=len(continuations),
    )


# ---------------------------------------------------------------------------
# Entropy sweep
# ---------------------------------------------------------------------------


@dataclass
class OffsetEntropy:
    offset: int
    count: int
    mean: float
    stderr: float
    bin_edges: np.ndarray
    counts: np.ndarray
    samples: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return dict(offset=self.offset, count=self.count, mean=self.mean, stderr=self.stderr,
                    bin_edges=self.bin_edges.tolist(), counts=self.counts.tolist())


@dataclass
class EntropyReport:
    vocab_size: int
    offsets: dict[int, OffsetEntropy]

    def means(self) -> dict[int, float]:
        return {k: v.mean for k, v in self.offsets.items()}

    def to_dict(self) -> dict:
        return dict(vocab_size=self.vocab_size, max_entropy=math.log(self.vocab_size),
                    offsets=[v.to_dict() for v in self.offsets.values()])


def entropy_sweep(
    eval_tokens: Sequence[int],
    backbone: Backbone,
    projector: Projector | None,
    offsets: Sequence[int],
    window: int | None = None,
) -> EntropyReport:
    """Teacher-forced entropies of the next-token head (offset 0) and each
    offset's amateur, over non-overlapping windows of ``eval_tokens``.

    At row ``i`` of a window the expert reads ``h[i]`` and offset ``k`` reads
    ``h[i-k]``; both predict token ``i+1``. Rows with ``i < max(offsets)`` are
    skipped so every offset is scored on the same targets.
    """
    tokens = np.asarray(eval_tokens)
    if len(tokens) < 64:
        raise MetricsError(f"entropy sweep needs >= 64 tokens, got {len(tokens)}")
    offsets = sorted(set(int(k) for k in offsets))
    if offsets and projector is None:
        raise MetricsError("amateur offsets need a projector")
    window = window or backbone.config.max_seq_len
    k_max = max(offsets, default=0)
    if window <= k_max + 1:
        raise MetricsError("window too short for the requested offsets")
    W = backbone.params["lm_head"]
    samples: dict[int, list[np.ndarray]] = {k: [] for k in [0] + offsets}
    sums = {k: 0.0 for k in samples}
    n_seen = 0
    for start in range(0, len(tokens) - k_max - 1, window):
        chunk = tokens[start : start + window]
        if len(chunk) <= k_max + 1:
            break
        hidden, logits = backbone.forward(chunk)
        rows = np.arange(k_max, len(chunk))
        ent = nx.entropy_from_logprobs(nx.log_softmax(logits[rows]))
        samples[0].append(ent)
        sums[0] += float(ent.sum())
        for k in offsets:
            lp = nx.log_softmax(projector.forward(hidden[rows - k], k) @ W)
            e = nx.entropy_from_logprobs(lp)
            samples[k].append(e)
            sums[k] += float(e.sum())
        n_seen += len(rows)
    hmax = math.log(backbone.config.vocab_size)
    edges = np.linspace(0.0, hmax, N_BINS + 1)
    report = {}
    for k, parts in samples.items():
        arr = np.concatenate(parts)
        counts, _ = np.histogram(np.clip(arr, 0.0, hmax), bins=edges)
        sd = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        report[k] = OffsetEntropy(
            offset=k, count=len(arr), mean=sums[k] / n_seen, stderr=sd / math.sqrt(len(arr)),
            bin_edges=edges, counts=counts, samples=arr,
        )
    return EntropyReport(backbone.config.vocab_size, report)


# ---------------------------------------------------------------------------
# Efficiency accounting
# ---------------------------------------------------------------------------


@dataclass
class EfficiencyRow:
    method: str
    tokens: int
    backbone_per_token: float
    projector_per_token: float
    state_bytes: int
    ms_per_token: float

    def to_dict(self) -> dict:
        return self.__dict__.copy()


def tegu_overhead_bytes(projector: Projector, max_offset: int, d_model: int) -> int:
    """Extra persistent state over greedy: projector arrays plus a full ring of float64 hiddens."""
    return projector.nbytes + max_offset * d_model * 8


def efficiency_report(traces: Mapping[str, Sequence[DecodeTrace]]) -> list[EfficiencyRow]:
    budgets = {m: [t.n_tokens for t in ts] for m, ts in traces.items()}
    ref = next(iter(budgets.values()), None)
    for m, b in budgets.items():
        if b != ref:
            raise MetricsError(f"token budgets differ between methods ({m}: {sum(b)} vs {sum(ref)})")
    rows = []
    for method, ts in traces.items():
        n = sum(t.n_tokens for t in ts)
        if n == 0:
            raise MetricsError(f"method {method} produced no tokens")
        rows.append(EfficiencyRow(
            method=method,
            tokens=n,
            backbone_per_token=sum(t.backbone_steps for t in ts) / n,
            projector_per_token=sum(t.projector_calls for t in ts) / n,
            state_bytes=max(t.state_bytes for t in ts),
            ms_per_token=1000.0 * sum(t.seconds for t in ts) / n,
        ))
    return rows


# ---------------------------------------------------------------------------
# Writers
# ---------------------------------------------------------------------------


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_csv(path, rows: Sequence[Mapping]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols: list[str] = []
    for r in rows:
        cols.extend(c for c in r if c not in cols)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)


def write_entropy_report(report: EntropyReport, outdir, stem: str = "entropy") -> None:
    outdir = Path(outdir)
    write_json(outdir / f"{stem}.json", report.to_dict())
    write_csv(outdir / f"{stem}.csv", [
        dict(offset=k, count=v.count, mean=v.mean, stderr=v.stderr) for k, v in report.offsets.items()
    ])
    for k, v in report.offsets.items():
        centers = 0.5 * (v.bin_edges[:-1] + v.bin_edges[1:])
        write_csv(outdir / f"{stem}_hist_k{k}.csv",
                  [dict(entropy=float(c), count=int(n)) for c, n in zip(centers, v.counts)])
