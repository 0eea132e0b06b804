"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 5 and 6 train several models and are marked ``slow``; run them with
``pytest -m slow`` or as part of the full suite.
"""
import json
import math
import time

import numpy as np
import pytest

from ccnn import data
from ccnn.bench import bench_forward
from ccnn.cli import cli_dispatch
from ccnn.density import (
    DensityMap,
    HeadAnnotations,
    KernelSpec,
    downsample_preserving_count,
    read_cdm,
    render_density,
    write_cdm,
)
from ccnn.model import CCNNConfig, ablation_variant, build, count_parameters, load_checkpoint, save_checkpoint
from ccnn.train import TrainConfig, constant_baseline, count_metrics, evaluate, train

from conftest import ACCEPTANCE_LINES
from gradcheck import full_network_gradcheck, he_scaled

# The output's receptive field is 52 px, narrower than a sigma=15 blob's visible extent, so on
# scattered heads no network can match the target pixel for pixel. Lattice seating makes the
# unseen part of every blob predictable from the seen part, which is what an overfit check needs.
OVERFIT_SCENES = data.SyntheticSceneSpec(layout="lattice", disk_radius=(3.0, 3.0), intensity=(0.9, 1.0),
                                         noise=0.02, background=0.1)
SMOKE_SCENES = data.SyntheticSceneSpec()
SMOKE_TRAIN = TrainConfig(epochs=16, batch_size=8, lr=1e-4, crop_size=(192, 192))


def verdict(number, name, ok, detail):
    line = f"criterion {number} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


def test_c1_parameter_budget():
    n = count_parameters(CCNNConfig())
    ok = 55_000 <= n <= 80_000 and n < 150_000 and build().size() == n
    assert verdict(1, "parameter budget", ok, f"{n} parameters")


def test_c2_full_network_gradients():
    rng = np.random.default_rng(0)
    params = he_scaled(build(seed=0), rng)
    t = time.perf_counter()
    frac, rest, maxerr = full_network_gradcheck(params, rng, size=(16, 16), step=1e-3, rel=1e-3, abs_=1e-4)
    elapsed = time.perf_counter() - t
    ok = frac >= 0.99 and rest and elapsed < 300
    detail = (f"{frac:.2%} of {params.size()} within rel 1e-3, rest within abs 1e-4: {rest}, "
              f"max abs err {maxerr:.2e}, {elapsed:.0f}s")
    assert verdict(2, "full-network gradients", ok, detail)


def test_c3_mass_conservation():
    rng = np.random.default_rng(3)
    spec = KernelSpec(mode="fixed", sigma_fixed=15.0)
    worst, worst_pool = 0.0, 0.0
    t = time.perf_counter()
    for _ in range(100):
        h, w = 8 * rng.integers(8, 33, size=2)
        n = int(rng.integers(0, 101))
        pts = rng.uniform(0, 1, (n, 2)) * [w, h]
        dm = render_density(HeadAnnotations(int(h), int(w), pts), spec)
        slack = abs(dm.count - n) - (0.005 * n + 1e-4)
        worst = max(worst, slack + 0.005 * n + 1e-4)
        assert slack <= 0, f"{n} heads in {h}x{w}: density sum {dm.count}"
        pooled = downsample_preserving_count(DensityMap(dm.raster.astype(np.float64)), 8)
        rel = abs(pooled.count - dm.count) / max(dm.count, 1e-300)
        worst_pool = max(worst_pool, rel)
    elapsed = time.perf_counter() - t
    ok = worst_pool <= 1e-12 and elapsed < 60
    assert verdict(3, "mass conservation", ok,
                   f"max |sum - N| {worst:.2e}, max pooling drift {worst_pool:.1e}, {elapsed:.1f}s")


def test_c4_overfit_four_scenes():
    scenes = data.synthetic_set(OVERFIT_SCENES, 4, first_seed=100)
    cfg = TrainConfig(epochs=2000, batch_size=8, lr=1e-4, crop_size=(192, 192), max_steps=2000)
    state = {}

    def stop(step, loss, params):
        state.setdefault("initial", loss)
        state["final"] = loss
        if step % 50 == 0:
            state["mae"] = evaluate(params, scenes).mae
            return state["mae"] < 1.0 and loss < 0.05 * state["initial"]
        return False

    t = time.perf_counter()
    res = train(scenes, [], cfg, callback=stop)
    mae = evaluate(res.params, scenes).mae
    ratio = res.history[-1]["loss"] / res.history[0]["loss"]
    ok = mae < 1.0 and ratio < 0.05 and res.steps <= 2000
    assert verdict(4, "overfit sanity", ok,
                   f"{res.steps} steps, count MAE {mae:.3f}, final/initial loss {ratio:.3%}, "
                   f"{time.perf_counter() - t:.0f}s")


@pytest.fixture(scope="module")
def smoke_split():
    train_scenes = data.synthetic_set(SMOKE_SCENES, 200, first_seed=10_000)
    held_out = data.synthetic_set(SMOKE_SCENES, 50, first_seed=20_000)
    return train_scenes, held_out


def smoke_run(model_cfg, split, seed=0):
    train_scenes, held_out = split
    cfg = TrainConfig(**{**SMOKE_TRAIN.__dict__, "model": model_cfg, "seed": seed})
    return evaluate(train(train_scenes, [], cfg).params, held_out)


@pytest.mark.slow
def test_c5_generalization(smoke_split):
    t = time.perf_counter()
    m = smoke_run(CCNNConfig(), smoke_split)
    base = constant_baseline(*smoke_split)
    gain = 1 - m.mae / base.mae
    ok = gain >= 0.30
    assert verdict(5, "generalization smoke test", ok,
                   f"held-out MAE {m.mae:.2f} vs constant baseline {base.mae:.2f}, "
                   f"improvement {gain:.1%}, {time.perf_counter() - t:.0f}s")


@pytest.mark.slow
def test_c6_ablation_ordering(smoke_split):
    names = ("only5", "only7", "only9")
    t = time.perf_counter()
    maes = {n: [smoke_run(ablation_variant(n), smoke_split).mae] for n in ("full",) + names}
    losers = [n for n in names if maes["full"][0] > 1.10 * maes[n][0]]
    binding = []
    for n in losers:
        # the ordering only binds when seed-to-seed spread is smaller than the gap
        for name in ("full", n):
            while len(maes[name]) < 3:
                maes[name].append(smoke_run(ablation_variant(name), smoke_split, len(maes[name])).mae)
        gap = maes["full"][0] - 1.10 * maes[n][0]
        if max(np.std(maes["full"]), np.std(maes[n])) <= gap:
            binding.append(n)
    table = ", ".join(f"{n} {v[0]:.2f}" + (f" (seeds {np.round(v, 2).tolist()})" if len(v) > 1 else "")
                      for n, v in maes.items())
    note = f"exceeds +10% of {losers}, binding for {binding}" if losers else "full within +10% of every variant"
    assert verdict(6, "ablation ordering", not binding,
                   f"held-out MAE {table}; {note}; {time.perf_counter() - t:.0f}s")


def test_c7_benchmark_protocol():
    params = build()
    big = bench_forward(params, (768, 1024), warmup=1, runs=3, threads=1)
    identity = big.fps == big.timed_runs / sum(big.latencies) and len(big.latencies) == big.timed_runs
    # alternate the two sizes so slow drift in machine speed hits both alike
    small_lat, big_lat = [], list(big.latencies)
    for _ in range(3):
        small_lat += bench_forward(params, (384, 512), warmup=0, runs=3, threads=1).latencies
        big_lat += bench_forward(params, (768, 1024), warmup=0, runs=1, threads=1).latencies
    scale = float(np.median(big_lat) / np.median(small_lat))
    ok = identity and 3.0 <= scale <= 6.0
    assert verdict(7, "benchmark protocol", ok,
                   f"{big.fps:.2f} FPS at 768x1024, latency ratio {scale:.2f} for doubled dims")


def test_c8_metric_identities(rng):
    m = count_metrics(["a", "b"], [13, 6], [10, 10])
    fixture_ok = abs(m.mae - 3.5) <= 1e-6 and abs(m.mse - math.sqrt(12.5)) <= 1e-6
    ordered = True
    for _ in range(200):
        n = int(rng.integers(1, 60))
        r = count_metrics([str(i) for i in range(n)], rng.normal(50, 20, n), rng.integers(0, 100, n))
        ordered &= r.mae <= r.mse
    scenes = data.synthetic_set(data.SyntheticSceneSpec(image_size=(64, 64)), 6)
    for seed in range(3):
        e = evaluate(build(seed=seed, std=0.1), scenes)
        ordered &= e.mae <= e.mse
    assert verdict(8, "metric identities", fixture_ok and ordered,
                   f"fixture MAE {m.mae} RMSE {m.mse:.7f}, MAE <= MSE on every evaluation: {ordered}")


def test_c9_round_trips(tmp_path, capsys):
    rng = np.random.default_rng(9)
    params = he_scaled(build(seed=9), rng)
    save_checkpoint(params, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    ckpt_ok = back.config == params.config and back.flatten().tobytes() == params.flatten().tobytes()

    dm = DensityMap(rng.random((24, 32)).astype(np.float32), scale=8)
    write_cdm(dm, tmp_path / "d.cdm")
    got = read_cdm(tmp_path / "d.cdm")
    cdm_ok = got.raster.tobytes() == dm.raster.tobytes() and got.scale == 8

    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"image_size": [64, 64], "head_count": [3, 15]}))
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"epochs": 1, "batch_size": 8, "crop_size": [64, 64]}))
    ds, ck = tmp_path / "ds", tmp_path / "run" / "model.ckpt"
    steps = [
        ["synth", "--spec", spec, "--out", ds, "--count", 12],
        ["gen-gt", "--manifest", ds / "manifest.json", "--out", tmp_path / "gt"],
        ["train", "--manifest", ds / "manifest.json", "--config", cfg, "--out", ck],
        ["eval", "--ckpt", ck, "--manifest", ds / "manifest.json", "--split", "test"],
        ["bench", "--ckpt", ck, "--height", 64, "--width", 64, "--warmup", 1, "--runs", 2],
    ]
    codes = []
    for argv in steps:
        codes.append(cli_dispatch([str(a) for a in argv]))
        capsys.readouterr()
    ok = ckpt_ok and cdm_ok and codes == [0] * len(steps)
    assert verdict(9, "round-trip integrity", ok,
                   f"checkpoint bitwise {ckpt_ok}, CDM1 bitwise {cdm_ok}, CLI exit codes {codes}")
