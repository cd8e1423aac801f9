import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tegu import numerics as nx
from tegu.cmtpp import ProjectorConfig, init_projector
from tegu.decoding import DecodeTrace, GuidanceConfig, cd_decode, greedy_decode, tegu_decode
from tegu.metrics import (MetricsError, corpus_distinct_n, distinct_n, diversity_report,
                          efficiency_report, entropy_sweep, rep_n, tegu_overhead_bytes,
                          write_entropy_report)
from tegu.training import tokenize

from .conftest import TINY

token_lists = st.lists(st.integers(0, 5), min_size=4, max_size=60)


def test_distinct_examples():
    a = [7] * 5
    assert distinct_n(a, 1) == pytest.approx(0.2)
    assert rep_n(a, 4) == pytest.approx(0.5)
    assert distinct_n(list(range(10)), 3) == 1.0 and rep_n(list(range(10)), 3) == 0.0
    with pytest.raises(MetricsError, match="at least 4"):
        distinct_n([1, 2, 3], 4)


def test_distinct_matches_set_oracle(rng):
    toks = rng.integers(0, 4, 1000).tolist()
    for n in (1, 2, 3, 4):
        grams = {tuple(toks[i : i + n]) for i in range(1000 - n + 1)}
        assert distinct_n(toks, n) == len(grams) / (1000 - n + 1)


@given(token_lists, st.integers(1, 4))
def test_rep_plus_distinct_is_one(toks, n):
    d = distinct_n(toks, n)
    assert 0 < d <= 1
    assert rep_n(toks, n) + d == 1.0


def test_corpus_level_pooling():
    # identical continuations repeat each other at corpus level; no n-gram spans two sequences
    assert corpus_distinct_n([[1, 2], [1, 2]], 2) == 0.5
    assert corpus_distinct_n([[1, 2], [3, 4]], 2) == 1.0
    rep = diversity_report([[1, 2, 3, 4, 5], [1, 2, 3, 4, 9]])
    assert rep.rep_4 == pytest.approx(1 - 3 / 4)
    assert rep.n_tokens == 10 and rep.n_sequences == 2
    with pytest.raises(MetricsError):
        corpus_distinct_n([[1]], 2)


def test_entropy_sweep_zero_init_shift(tiny_backbone, rng):
    pr = init_projector(ProjectorConfig(d_model=TINY.d_model, max_offset=3))
    toks = rng.integers(0, TINY.vocab_size, 80)
    rep = entropy_sweep(toks, tiny_backbone, pr, [1, 2], window=16)
    # recompute NTP entropies per window and shift
    for k in (1, 2):
        expected = []
        for s in range(0, 80, 16):
            chunk = toks[s : s + 16]
            if len(chunk) <= 3:
                continue
            _, logits = tiny_backbone.forward(chunk)
            ent = nx.entropy_from_logprobs(nx.log_softmax(logits))
            expected.append(ent[2 - k : len(chunk) - k])
        np.testing.assert_allclose(rep.offsets[k].samples, np.concatenate(expected), atol=1e-12)


def test_entropy_report_invariants(tiny_backbone, tiny_projector, rng):
    rep = entropy_sweep(rng.integers(0, TINY.vocab_size, 100), tiny_backbone, tiny_projector, [1, 3], window=16)
    for k, off in rep.offsets.items():
        assert off.counts.sum() == off.count == len(off.samples)
        assert 0 <= off.mean <= math.log(TINY.vocab_size)
        assert off.mean == pytest.approx(float(np.mean(off.samples)), abs=1e-9)
        assert len(off.bin_edges) == 51
    assert set(rep.offsets) == {0, 1, 3}
    with pytest.raises(MetricsError, match="64"):
        entropy_sweep(np.zeros(63, dtype=int), tiny_backbone, tiny_projector, [1])


def test_entropy_near_zero_on_periodic(periodic_models):
    toks = tokenize("bcdefa" * 30)
    rep = entropy_sweep(toks, periodic_models["backbone"], periodic_models["projector"], [1, 2], window=48)
    means = rep.means()
    assert means[0] < 0.05 and means[1] < 0.1 and means[2] < 0.5


def test_entropy_report_files(tiny_backbone, tiny_projector, rng, tmp_path):
    rep = entropy_sweep(rng.integers(0, TINY.vocab_size, 64), tiny_backbone, tiny_projector, [1], window=16)
    write_entropy_report(rep, tmp_path)
    doc = json.loads((tmp_path / "entropy.json").read_text())
    assert [o["offset"] for o in doc["offsets"]] == [0, 1]
    with open(tmp_path / "entropy_hist_k1.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 50 and sum(int(r["count"]) for r in rows) == rep.offsets[1].count


def test_efficiency_report(tiny_backbone, tiny_projector):
    g, c = DecodeTrace("greedy"), DecodeTrace("cd")
    greedy_decode([1, 2, 3, 4], tiny_backbone, 5, trace=g)
    cd_decode([1, 2, 3, 4], tiny_backbone, tiny_backbone, 0.2, 0.1, 5, trace=c)
    _, t = tegu_decode([1, 2, 3, 4], tiny_backbone, tiny_projector,
                       GuidanceConfig(offsets=(1, 3), max_new_tokens=5))
    rows = {r.method: r for r in efficiency_report({"greedy": [g], "cd": [c], "tegu": [t]})}
    assert rows["greedy"].backbone_per_token == 1.0 and rows["greedy"].projector_per_token == 0.0
    assert rows["cd"].backbone_per_token == 2.0
    assert rows["tegu"].backbone_per_token == 1.0 and rows["tegu"].projector_per_token == 2.0
    overhead = rows["tegu"].state_bytes - rows["greedy"].state_bytes
    assert overhead == tegu_overhead_bytes(tiny_projector, 3, TINY.d_model)
    assert overhead == tiny_projector.n_params * 8 + 3 * TINY.d_model * 8
    short = DecodeTrace("greedy")
    greedy_decode([1], tiny_backbone, 2, trace=short)
    with pytest.raises(MetricsError, match="budgets"):
        efficiency_report({"greedy": [short], "cd": [c]})
