"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` or directly with
``python tests/test_acceptance.py``.
"""

import itertools
import math
import os
import sys
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from microdense.ablation import AblationSpec, count_ablation_params, run_ablation, summarize
from microdense.autograd import Tensor
from microdense.checkpoint import load_checkpoint, save_checkpoint
from microdense.checks import block_gradcheck
from microdense.config import load_config
from microdense.data import SyntheticSpec, make_synthetic
from microdense.layers import Conv2d, ConvSpec, count_params, zero_pad_channels
from microdense.network import allocated_by_layer, build_block, build_network, planned_by_layer, zero_block_weights
from microdense.planner import ArchConfig, plan_block, plan_network
from microdense.trainer import TrainConfig, evaluate, lr_schedule, train

from conftest import CONFIGS

RESULTS: list[str] = []


def report(n: int, ok: bool, detail: str) -> None:
    """Record and print one criterion line; conftest repeats them in the terminal summary."""
    line = f"[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}"
    RESULTS.append(line)
    print(line, flush=True)
    assert ok, line


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


# ---------------------------------------------------------------- 1, 2


@pytest.mark.parametrize("n,config,target", [(1, "30a64.json", 0.7e6), (2, "60a115.json", 4.0e6)])
def test_parameter_count_reproduction(n, config, target):
    with Timer() as t:
        plan = plan_network(load_config(os.path.join(CONFIGS, config)).arch)
    rel = plan.total_params / target - 1
    ok = abs(rel) <= 0.10 and t.elapsed < 1.0
    report(n, ok, f"{config} total={plan.total_params:,} vs {target / 1e6:.1f}M ({rel:+.1%}), "
                  f"ra={plan.config.ra}, {t.elapsed * 1000:.0f} ms")


# ---------------------------------------------------------------- 3


def _random_small_configs(count: int, seed: int = 0) -> list[ArchConfig]:
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        N = int(rng.integers(1, 7))
        n_stages = int(rng.integers(1, min(N, 3) + 1))
        cuts = sorted(rng.choice(np.arange(1, N), n_stages - 1, replace=False).tolist()) if n_stages > 1 else []
        stages = [b - a for a, b in zip([0] + cuts, cuts + [N])]
        gc = int(rng.choice([1, 2, 4]))
        ra = float(rng.choice([0.207, 0.25, 0.5, 1.0]))
        W0 = int(rng.integers(4, 25))
        if W0 < gc or math.floor(W0 * ra) < 1:
            continue
        out.append(ArchConfig(W0=W0, alpha=int(rng.integers(0, 25)), N=N, n=int(rng.integers(1, 5)), gc=gc,
                              ra=ra, stages=stages, resolution=8, num_classes=int(rng.integers(2, 11)),
                              fixed_growth=bool(rng.integers(0, 2))))
    return out


def test_closed_form_vs_allocation():
    with Timer() as t:
        configs = [load_config(os.path.join(CONFIGS, c)).arch for c in ("30a64.json", "60a115.json")]
        configs += _random_small_configs(50)
        mismatches = []
        for cfg in configs:
            net = build_network(cfg, dtype="float32")
            planned, allocated = planned_by_layer(net.plan), allocated_by_layer(net)
            if planned != allocated or net.plan.total_params != net.num_parameters():
                mismatches.append(cfg)
    ok = not mismatches and t.elapsed < 30
    report(3, ok, f"{len(configs)} configs, {len(mismatches)} with any per-layer mismatch, {t.elapsed:.1f} s")


# ---------------------------------------------------------------- 4


def test_conv_param_count_grid():
    with Timer() as t:
        rng = np.random.default_rng(0)
        checked, bad, worst = 0, [], 0.0
        for ci, cu, g, k in itertools.product([4, 8, 16, 32], [4, 8, 16, 32], [1, 2, 4], [1, 3]):
            spec = ConvSpec(ci, cu, k, groups=g, bias=True)
            allocated = Conv2d(spec, rng, np.float32).num_parameters()
            exact = count_params(spec)
            p_l = cu * (ci * k * k + 1)  # ungrouped count
            if exact != allocated or count_params(spec, "ungrouped") != p_l:
                bad.append(spec)
            if g == 1 and exact != p_l:
                bad.append(spec)
            ratio = exact / (p_l / g)
            worst = max(worst, ratio - 1)
            if not 1.0 <= ratio <= 1.0 + g / (ci * k * k):
                bad.append(spec)
            checked += 1
    ok = not bad and t.elapsed < 5
    report(4, ok, f"{checked} specs, {len(bad)} violations, max exact/(P_l/G) - 1 = {worst:.4f}, "
                  f"{t.elapsed * 1000:.0f} ms")


# ---------------------------------------------------------------- 5


def test_block_gradient_check():
    with Timer() as t:
        errs = {}
        for ds in (False, True):
            e = block_gradcheck(c_in=8, c_out=12, n=3, spatial=4, batch=2, downsample=ds)
            errs.update({f"{'ds' if ds else 'plain'}/{k}": v for k, v in e.items()})
    worst = max(errs, key=errs.get)
    ok = errs[worst] < 1e-4 and t.elapsed < 300 and any(k.endswith("/input") for k in errs)
    report(5, ok, f"{len(errs)} tensors (plain + downsampling MDConv-3 block), worst {worst} = "
                  f"{errs[worst]:.2e}, {t.elapsed:.1f} s")


# ---------------------------------------------------------------- 6


def test_schedule_exactness():
    with Timer() as t:
        cases = [(0.1, 64000, 3200), (0.1, 100, 10), (0.05, 1000, 50), (0.3, 7, 2)]
        worst = 0.0
        for lr_max, n_a, n_w in cases:
            cfg = TrainConfig(lr_max=lr_max, iterations=n_a, warmup=n_w)
            for i in (0, n_w // 2, n_w, n_a // 2, n_a):
                top = lr_max * i / n_w if i <= n_w else lr_max
                ref = top * (1 + math.cos(math.pi * i / n_a)) / 2
                got = lr_schedule(i, cfg)
                err = abs(got - ref) / abs(ref) if ref else abs(got)
                worst = max(worst, err)
            # continuity: warmup branch at N_w equals the plateau branch
            plateau = lr_max * (1 + math.cos(math.pi * n_w / n_a)) / 2
            worst = max(worst, abs(lr_schedule(n_w, cfg) - plateau) / plateau)
    ok = worst <= 1e-12 and t.elapsed < 1
    report(6, ok, f"{len(cases)} schedules x 5 points, max relative deviation {worst:.1e}")


# ---------------------------------------------------------------- 7

SANITY_ARCH = ArchConfig(W0=16, alpha=16, N=3, resolution=16)


def test_training_sanity_overfit():
    with Timer() as t:
        train_data, _ = make_synthetic(SyntheticSpec(sigma=5.0, train_per_class=50, test_per_class=1))
        subset = train_data.subset(64, seed=0)
        net = build_network(SANITY_ARCH, seed=0, dtype="float32")
        cfg = TrainConfig(lr_max=0.1, iterations=300, batch_size=32, record_wall_time=False)
        train(net, subset, cfg)
        acc, loss = evaluate(net, subset)
    ok = acc >= 0.95 and cfg.iterations <= 2000 and t.elapsed < 900
    report(7, ok, f"(a) 64-sample noisy subset, {cfg.iterations} iterations: train acc {acc:.3f} "
                  f"(loss {loss:.3f}), {t.elapsed:.0f} s")


def test_training_sanity_noiseless():
    with Timer() as t:
        syn = SyntheticSpec(num_classes=10, train_per_class=20, test_per_class=20, sigma=0.0)
        train_data, test_data = make_synthetic(syn)
        net = build_network(SANITY_ARCH, seed=0, dtype="float32")
        cfg = TrainConfig(lr_max=0.1, iterations=200, batch_size=32, record_wall_time=False)
        train(net, train_data, cfg)
        acc, loss = evaluate(net, test_data)
    ok = acc == 1.0 and len(train_data) == 200 and len(test_data) == 200 and t.elapsed < 900
    report(7, ok, f"(b) sigma=0, 10 classes, 200/200: test acc {acc:.3f} (loss {loss:.3f}), "
                  f"{t.elapsed:.0f} s")


# ---------------------------------------------------------------- 8


def test_ablation_depth_trend():
    cfg = load_config(os.path.join(CONFIGS, "ablation-synthetic.json"))
    with Timer() as t:
        train_data, test_data = make_synthetic(cfg.synthetic)
        rows = run_ablation("depth-sweep", 50_000, train_data, test_data, cfg.train, seeds=(0, 1, 2),
                            **cfg.ablation)
        curve = summarize(rows)
    counts = {r["variant"]: r["params"] for r in rows}
    in_budget = all(abs(c - 50_000) <= 0.02 * 50_000 for c in counts.values())
    baseline = curve["n=3"]
    ok = (curve["n=3"] >= curve["n=1"] and 0.60 <= baseline <= 0.90 and in_budget and t.elapsed < 7200)
    pts = ", ".join(f"{k}: {v:.3f} ({counts[k]:,} params)" for k, v in curve.items())
    report(8, ok, f"sigma={cfg.synthetic.sigma}, mean test acc over 3 seeds: {pts}; {t.elapsed:.0f} s")


# ---------------------------------------------------------------- 9


def test_determinism_and_persistence(tmp_path):
    with Timer() as t:
        syn = SyntheticSpec(num_classes=4, train_per_class=16, test_per_class=8, image_size=8, sigma=0.5)
        train_data, test_data = make_synthetic(syn)
        arch = ArchConfig(W0=8, alpha=8, N=3, resolution=8, num_classes=4)
        cfg = TrainConfig(iterations=30, batch_size=16, eval_interval=10, record_wall_time=False)
        nets = []
        for d in ("a", "b"):
            net = build_network(arch, seed=0, dtype="float32")
            train(net, train_data, cfg, test_data, out_dir=tmp_path / d)
            nets.append(net)
        same_csv = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
        save_checkpoint(tmp_path / "rt.mdnw", nets[0])
        loaded, _ = load_checkpoint(tmp_path / "rt.mdnw")
        before = evaluate(nets[0], test_data)
        after = evaluate(loaded, test_data)
        same_logits = np.array_equal(nets[0].predict(test_data.images), loaded.predict(test_data.images))
    ok = same_csv and before == after and same_logits and t.elapsed < 300
    report(9, ok, f"rerun CSV identical={same_csv}; eval before/after round-trip {before} / {after}, "
                  f"logits identical={same_logits}; {t.elapsed:.1f} s")


# ---------------------------------------------------------------- 10


@settings(max_examples=40, deadline=None)
@given(st.integers(4, 64), st.integers(1, 6), st.sampled_from([1, 2, 4]), st.sampled_from([0.207, 0.25, 0.5]),
       st.booleans())
def _prop_pyramidal(c_in, n, gc, ra, ds):
    if math.floor(c_in * ra) < 1:
        return
    b = plan_block(c_in, c_in + 4, n, gc, ra, downsample=ds, spatial=8)
    w = b.dense_widths
    assert all(a < c for a, c in zip(w, w[1:]))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 32), st.integers(1, 32), st.integers(1, 8))
def _prop_groups_divisibility(ci, cu, g):
    divisible = ci % g == 0 and cu % g == 0
    try:
        ConvSpec(ci, cu, 3, groups=g)
        assert divisible
    except ValueError:
        assert not divisible
    for l in plan_network(ArchConfig(W0=max(8, ci), alpha=cu, N=3, resolution=8)).all_layers():
        if l.has_conv:
            assert l.in_channels % l.groups == 0 and l.out_channels % l.groups == 0


@settings(max_examples=15, deadline=None)
@given(st.integers(4, 12), st.integers(0, 6), st.integers(1, 3), st.booleans(), st.integers(0, 1000))
def _prop_zero_weight_identity(c_in, extra, n, ds, seed):
    rng = np.random.default_rng(seed)
    block = build_block(plan_block(c_in, c_in + extra, n, 4, 0.5, downsample=ds, spatial=4), rng)
    zero_block_weights(block)
    x = rng.standard_normal((2, c_in, 4, 4))
    ref = x.reshape(2, c_in, 2, 2, 2, 2).mean(axis=(3, 5)) if ds else x
    np.testing.assert_array_equal(block(Tensor(x)).data, zero_pad_channels(Tensor(ref), c_in + extra).data)


def test_invariant_suite():
    from test_layers import test_concat_shape_property, test_grouped_conv_locality

    props = {
        "pyramidal strict increase": _prop_pyramidal,
        "groups divisibility": _prop_groups_divisibility,
        "zero-weight residual identity": _prop_zero_weight_identity,
        "grouped-conv locality": test_grouped_conv_locality,
        "concat shape": test_concat_shape_property,
    }
    failures = []
    with Timer() as t:
        for name, prop in props.items():
            try:
                prop()
            except Exception as e:  # noqa: BLE001 - collected into the report line
                failures.append(f"{name}: {type(e).__name__}")
    ok = not failures and t.elapsed < 120
    report(10, ok, f"{len(props) - len(failures)}/{len(props)} properties hold"
                   + (f" (failed: {failures})" if failures else "") + f", {t.elapsed:.1f} s")


if __name__ == "__main__":
    import tempfile

    checks = [
        lambda: test_parameter_count_reproduction(1, "30a64.json", 0.7e6),
        lambda: test_parameter_count_reproduction(2, "60a115.json", 4.0e6),
        test_closed_form_vs_allocation,
        test_conv_param_count_grid,
        test_block_gradient_check,
        test_schedule_exactness,
        test_training_sanity_overfit,
        test_training_sanity_noiseless,
        test_ablation_depth_trend,
        lambda: test_determinism_and_persistence(__import__("pathlib").Path(tempfile.mkdtemp())),
        test_invariant_suite,
    ]
    failed = 0
    for check in checks:
        try:
            check()
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
