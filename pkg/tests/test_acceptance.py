"""Acceptance criteria, one test each, named ``test_criterion_<n>``.

Every test records a one-line ``detail`` before asserting, and the summary
hook in ``conftest.py`` prints a PASS/FAIL line per criterion.
"""

import itertools
import time

import numpy as np
import pytest

from aunet import budget
from aunet import numerics as nx
from aunet.checkpoint import load_checkpoint, save_checkpoint
from aunet import config as cfgmod
from aunet.hierarchy import AUNet
from aunet.numerics.gradcheck import numerical_grad, relative_error
from aunet.splitter import StreamingSplitter, regex_boundaries, split_stage1
from helpers import (causal_violation, decode_error, load_table, mixed_corpus, random_config, random_text,
                     replay_flops, tiny_config)

ROWS = load_table()
VARIANTS = list(itertools.product(["select", "average"], ["multilinear", "repeat", "simple"]))


def rel(a, b):
    return a / b - 1


def test_criterion_01_flop_table_replay(record_property):
    t0 = time.perf_counter()
    base = [r for r in ROWS if r["family"] == "bpe"]
    aunet = [r for r in ROWS if r["family"] == "aunet"]
    base_err = [abs(rel(replay_flops(r), r["flops_per_unit"])) for r in base]
    au_ok = [r["name"] for r in aunet if abs(rel(replay_flops(r), r["flops_per_unit"])) < 0.10]
    one_b = next(r for r in aunet if r["name"] == "AUNet 2 1B")
    spots = {v: next(r for r in base if r["flops_per_unit"] == v) for v in (1.9e9, 8.6e9, 3.6e10)}
    spot_ok = all(abs(rel(replay_flops(r), v)) < 0.10 for v, r in spots.items())
    secs = time.perf_counter() - t0
    record_property("detail", f"baselines {sum(e < 0.10 for e in base_err)}/12 within 10% (worst "
                              f"{max(base_err):.1%}); AU-Net rows {len(au_ok)}/{len(aunet)} within 10%; "
                              f"AUNet 2 1B {replay_flops(one_b):.3g} FLOPs/byte; {secs:.2f} s")
    assert max(base_err) < 0.10 and spot_ok
    assert len(au_ok) >= 6 and "AUNet 2 1B" in au_ok
    assert secs < 1.0


def test_criterion_02_hyperparameter_law_replay(record_property):
    t0 = time.perf_counter()
    scaling = [r for r in ROWS if r["nominal_budget"] is not None]
    lr_nom = {r["name"]: rel(budget.predict_lr(r["nominal_budget"], budget.FITS[r["family"]]), r["lr"])
              for r in scaling}
    lr_tot = {r["name"]: rel(budget.predict_lr(r["total_flops"], budget.FITS[r["family"]]), r["lr"])
              for r in scaling}
    bsz = [abs(rel(budget.predict_bsz(r["nominal_budget"], budget.FITS[r["family"]]), r["units_per_step"]))
           for r in scaling]
    misses = {k: v for k, v in lr_nom.items() if abs(v) >= 0.05}
    ex_au = rel(budget.predict_lr(1.1e19, budget.AUNET_FIT), 0.002923)
    ex_bpe = rel(budget.predict_lr(2.0e19, budget.BPE_FIT), 0.008152)
    secs = time.perf_counter() - t0
    record_property("detail", f"LR at nominal budget {36 - len(misses)}/36 within 5% (misses: "
                              + ", ".join(f"{k} {v:+.1%}" for k, v in misses.items())
                              + f"); LR at total FLOPs {sum(abs(v) < 0.05 for v in lr_tot.values())}/36; "
                              f"examples 1.1e19 AU-Net {ex_au:+.1%}, 2.0e19 BPE {ex_bpe:+.1%}; "
                              f"BSZ {sum(e < 0.15 for e in bsz)}/36 within 15%; {secs:.2f} s")
    assert len(scaling) == 36
    assert max(bsz) < 0.15
    assert abs(ex_au) < 0.05 and abs(ex_bpe) < 0.05
    assert not misses
    assert secs < 1.0


def test_criterion_03_gamma_conversion(record_property):
    gammas = [1.0, 2.0, 10.0, 0.5, 123.456]
    ratios = [budget.gamma_convert(g, 4.56) / g for g in gammas]
    record_property("detail", f"gamma_convert(g, 4.56) / g = {ratios[0]!r} for g in {gammas}")
    assert all(budget.gamma_convert(g, 4.56) == 20.7936 * g for g in gammas)


def test_criterion_04_causality_suite(record_property):
    rng = np.random.default_rng(2024)
    combos = [(n, p, u) for n in (1, 2, 3, 4) for p, u in (VARIANTS if n > 1 else VARIANTS[:1])]
    violations, pairs, t0 = 0, 0, time.perf_counter()
    while pairs < 200:
        n, p, u = combos[pairs % len(combos)]
        cfg = tiny_config(n_stages=n, pooling=p, upsampling=u, window=int(rng.integers(1, 12)),
                          groups=tuple(int(g) for g in rng.integers(1, 4, size=2)))
        model = AUNet(cfg, seed=int(rng.integers(1 << 30)))
        data = random_text(rng, int(rng.integers(2, 96)))
        t = int(rng.integers(0, len(data)))
        new = int(rng.choice([b for b in b" .,!\nabz09\xc3\xff" if b != data[t]]))
        violations += causal_violation(model, data, t, new)
        pairs += 1
    record_property("detail", f"{pairs} (model, input) pairs over n_stages 1-4 and {len(VARIANTS)} variants, "
                              f"{violations} bit-level violations; {time.perf_counter() - t0:.0f} s")
    assert violations == 0


def test_criterion_05_incremental_decode(record_property):
    rng = np.random.default_rng(5)
    worst = {"float32": 0.0, "float64": 0.0}
    t0 = time.perf_counter()
    for i in range(100):
        n = 1 + i % 4
        p, u = VARIANTS[(i // 4) % len(VARIANTS)]
        dtype = "float64" if i % 2 else "float32"
        model = AUNet(tiny_config(n_stages=n, pooling=p, upsampling=u, dtype=dtype,
                                  window=int(rng.integers(1, 40))), seed=i)
        err = decode_error(model, random_text(rng, int(rng.integers(1, 257))))
        worst[dtype] = max(worst[dtype], err)
    record_property("detail", f"100 prompts (1-256 bytes, n_stages 1-4): worst relative error "
                              f"{worst['float32']:.2e} single, {worst['float64']:.2e} double; "
                              f"{time.perf_counter() - t0:.0f} s")
    assert worst["float32"] < 1e-5 and worst["float64"] < 1e-10


def test_criterion_06_gradient_oracle(record_property):
    model = AUNet(tiny_config(n_stages=3, window=4), seed=6)
    n_params = model.num_parameters()
    ids = np.frombuffer(b"a b. c d", dtype=np.uint8).astype(np.int64)[None]
    targets = np.frombuffer(b" b. c de", dtype=np.uint8).astype(np.int64)[None]
    proj = np.random.default_rng(6).standard_normal((1, 8, 256))
    _, layout = model(ids, return_layout=True)

    def loss():
        # a random projection of all logits exercises every output, not only the targets
        logits = model(ids)
        return nx.cross_entropy_logits(logits, targets) + nx.sum(logits * proj) * 0.01

    model.zero_grad()
    loss().backward()
    worst, t0 = 0.0, time.perf_counter()
    for name, t in model.params.items():
        worst = max(worst, relative_error(t.grad, numerical_grad(loss, t, h=1e-5), floor=1e-6))
    record_property("detail", f"AU-Net-3 with {n_params} parameters, 8-byte input, stage-3 rows "
                              f"{int(layout.links[1].n_real[0])}: worst relative error {worst:.2e} over all "
                              f"parameters; {time.perf_counter() - t0:.0f} s")
    assert n_params <= 50_000
    assert layout.links[1].n_real[0] >= 1
    assert worst < 1e-4


def test_criterion_07_splitter_oracle(record_property):
    data = mixed_corpus(1_000_000)
    ours, ref = split_stage1(data), regex_boundaries(data)
    mismatches = sum(a != b for a, b in zip(ours, ref)) + abs(len(ours) - len(ref))

    rng = np.random.default_rng(7)
    unstable = 0
    for _ in range(10_000):
        a = int(rng.integers(0, len(data) - 200))
        x = data[a: a + int(rng.integers(0, 60))]
        y = data[a + 100: a + 100 + int(rng.integers(0, 40))] if rng.random() < 0.7 else \
            rng.integers(0, 256, int(rng.integers(1, 8)), dtype=np.uint8).tobytes()
        sp, committed = StreamingSplitter(), []
        for b in x:
            committed.extend(end for end, _ in sp.push(b))
        unstable += split_stage1(x + y)[: len(committed)] != committed
    record_property("detail", f"{len(data)} mixed bytes, {len(ref)} boundaries, {mismatches} mismatches "
                              f"against the regex engine; {unstable}/10000 unstable (prefix, suffix) pairs")
    assert mismatches == 0 and unstable == 0


@pytest.mark.slow
def test_criterion_08_desk_scale_learning(record_property):
    import desk_run

    res = desk_run.run()
    au, base = res["aunet2"], res["byte1"]
    record_property("detail", f"AU-Net-2 ({au['params'] / 1e6:.2f}M params, {au['flops_per_byte']:.3g} FLOPs/byte) "
                              f"{au['bpb']:.3f} bpb after {au['steps']} steps; 1-stage baseline "
                              f"({base['params'] / 1e6:.2f}M params, {base['flops_per_byte']:.3g} FLOPs/byte) "
                              f"{base['bpb']:.3f} bpb")
    assert au["steps"] == 5000 and 4e6 <= au["params"] <= 6e6
    assert abs(base["flops_per_byte"] / au["flops_per_byte"] - 1) < 0.05
    assert au["bpb"] <= 2.2
    assert au["bpb"] <= base["bpb"]


def test_criterion_09_deepest_stage_lookahead(record_property):
    rng = np.random.default_rng(9)
    groups = leaks = silent = 0
    for i, (p, u) in enumerate(VARIANTS * 2):
        model = AUNet(tiny_config(n_stages=3, pooling=p, upsampling=u), seed=100 + i)
        ids = np.frombuffer(random_text(rng, 80), dtype=np.uint8).astype(np.int64)[None]
        base, layout = model(ids, return_layout=True)
        for g, pos in enumerate(layout.positions[0][1]):
            mask = np.ones((1, layout.lengths[2]))
            mask[0, g] = 0
            changed = np.flatnonzero(np.any(model(ids, coarse_masks={3: mask}).data[0] != base.data[0], axis=-1))
            groups += 1
            leaks += bool(changed.size) and changed.min() <= pos
            # a group reaches bytes through the next stage-2 row, which may not be readable yet
            readers = np.any(layout.links[0].src[0] == layout.links[1].pool_idx[0, g] + 1)
            silent += changed.size == 0 and u != "simple" and readers
    record_property("detail", f"{groups} stage-3 groups over {len(VARIANTS)} variants: {leaks} changed a logit at "
                              f"or before their boundary; {silent} with a reading byte had no effect")
    assert groups > 50 and leaks == 0 and silent == 0


def test_criterion_10_checkpoint_and_config_round_trip(record_property, tmp_path):
    bad_cfg = bad_ck = 0
    for seed in range(50):
        cfg = random_config(np.random.default_rng(1000 + seed))
        # checkpoints hold float32, so bit-exactness is checked on single-precision models
        cfg.model.dtype = "float32"
        bad_cfg += cfgmod.loads(cfgmod.dumps(cfg)) != cfg
        model = AUNet(cfg.model, seed=seed)
        save_checkpoint(model, tmp_path / "m.aunt", cfg)
        loaded, cfg2 = load_checkpoint(tmp_path / "m.aunt")
        bad_cfg += cfg2 != cfg
        a, b = model.state_dict(), loaded.state_dict()
        bad_ck += a.keys() != b.keys() or any(a[k].tobytes() != b[k].tobytes() for k in a)
    record_property("detail", f"50 randomized configs: {bad_cfg} config mismatches, {bad_ck} checkpoints "
                              f"not bit-exact")
    assert bad_cfg == 0 and bad_ck == 0
