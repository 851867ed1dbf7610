"""End-to-end acceptance checks, one test per criterion.

The conftest prints a PASS/FAIL line per ``test_criterion_<N>_*`` at the end
of the run. Criteria 6 to 8 share one trained TraNet/CNN6 pair and a single
paired sweep on a held-out scenario; that fixture dominates the runtime.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import oracles
from conftest import random_trajectory
from speedrecon import baselines, synth
from speedrecon.baselines import AsmParams
from speedrecon.cli import main
from speedrecon.evaluation import density_sweep
from speedrecon.grid import GridSpec, SparseSpeedField, TraceSet, aggregate, rasterize_trajectory
from speedrecon.neuralnet import (TrainConfig, augment, build, evaluate_loss, infer_field,
                                  masked_imae_loss, train)
from speedrecon.neuralnet.models import glorot_init
from speedrecon.patches import PatchLayout, decompose, output_origins, stitch

LIBRARY_SIZE, LIBRARY_SEED = 43, 7
HELD_OUT = 0
N_SAMPLES = 10_000
TRANET_EPOCHS = 8
CNN6_EPOCHS = 8
SWEEP_P = (0.2, 0.5, 0.8)
SWEEP_ITERATIONS = 20


# ------------------------------------------------------------------ 1

def test_criterion_1_gridding_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    spec = GridSpec(t0=0.0, duration=3600, x0=0.0, length=10000)
    records = []
    for k in range(1000):
        traj = random_trajectory(rng, spec, tid=f"r{k}")
        tr = rasterize_trajectory(traj, spec)
        dist, dur = oracles.in_domain_totals(traj, spec)
        assert tr.distance.sum() == pytest.approx(dist, rel=1e-6, abs=1e-9)
        assert tr.time.sum() == pytest.approx(dur, rel=1e-6, abs=1e-9)
        v = np.clip(tr.distance / tr.time * 3.6, 3.0, 130.0)
        records += [(int(i), int(j), float(s)) for i, j, s in zip(tr.i, tr.j, v)]
    f = aggregate(records, spec)
    ref = oracles.harmonic(records)
    assert len(f) == len(ref)
    for i, j, v in zip(f.i, f.j, f.v):
        assert v == ref[(int(i), int(j))]
    assert time.perf_counter() - t0 < 10.0


# ------------------------------------------------------------------ 2

@pytest.mark.parametrize("v", [7.5, 42.0, 118.0])
def test_criterion_2_kernel_identities(v):
    rng = np.random.default_rng(int(v))
    spec = GridSpec.from_shape(60, 80)
    mask = rng.random(spec.shape) < 0.05
    f = SparseSpeedField.from_dense(spec, np.where(mask, v, np.nan))
    np.testing.assert_allclose(baselines.isotropic(f).v, v, atol=1e-9, rtol=0)
    np.testing.assert_allclose(baselines.asm(f).v, v, atol=1e-9, rtol=0)
    p = AsmParams()
    assert abs(baselines.asm_weight(p.v_thres, p.v_thres + 30.0, p) - 0.5) <= 1e-9
    assert abs(baselines.asm_weight(p.v_thres + 30.0, p.v_thres, p) - 0.5) <= 1e-9


# ------------------------------------------------------------------ 3

def test_criterion_3_wave_speed_fidelity():
    t0 = time.perf_counter()
    spec = GridSpec(duration=3600, length=10000)
    jam = synth.CongestionPrimitive("moving_jam", 10.0, anchor_t=300, anchor_x=9500, c=-15.0,
                                    width=400, lifetime=2700)
    truth = synth.render_ground_truth(synth.Scenario(spec, [jam]))
    trajs = synth.sample_probes(truth, synth.ProbeConfig(rate=120, rng_seed=1))
    est = baselines.asm(TraceSet.from_trajectories(trajs, spec).field())
    # rows where the whole jam lies inside the road
    rows = np.arange(6, 38)
    t = spec.t_centers()[rows]
    locus = spec.x_centers()[np.argmin(est.v[rows], axis=1)]
    c_fit = np.polyfit(t, locus, 1)[0] * 3.6
    print(f"fitted wave speed {c_fit:.2f} km/h")
    assert abs(c_fit - (-15.0)) <= 3.0
    assert time.perf_counter() - t0 < 60.0


# ------------------------------------------------------------------ 4

def test_criterion_4_patch_round_trip():
    rng = np.random.default_rng(4)
    layout = PatchLayout()
    for _ in range(100):
        n_t, n_x = (int(n) for n in rng.integers(1, 200, size=2))
        spec = GridSpec.from_shape(n_t, n_x)
        dense = np.where(rng.random((n_t, n_x)) < 0.1, rng.uniform(3, 130, (n_t, n_x)), np.nan)
        f = SparseSpeedField.from_dense(spec, dense)
        patches = decompose(f, layout)
        assert [p.origin for p in patches] == output_origins(spec, layout)
        hits = np.zeros((n_t, n_x), dtype=int)
        blocks = []
        for p in patches:
            a, b = p.origin
            hits[a:a + layout.l_t, b:b + layout.l_x] += 1
            # tag every output cell with a value identifying its tile
            blocks.append((p.origin, np.full((layout.l_t, layout.l_x), (len(blocks) % 100) / 1000)))
        assert np.all(hits == 1)
        out = stitch(blocks, spec, layout)
        expect = np.zeros((n_t, n_x))
        for (a, b), block in blocks:
            expect[a:a + layout.l_t, b:b + layout.l_x] = block[:n_t - a, :n_x - b]
        np.testing.assert_allclose(out.v, expect * 100 + 65, rtol=1e-12)


# ------------------------------------------------------------------ 5

@pytest.fixture(scope="module")
def library_sets():
    lib = synth.scenario_library(LIBRARY_SIZE, LIBRARY_SEED)
    sets = []
    for scn in lib:
        truth = synth.render_ground_truth(scn)
        trajs = synth.sample_probes(truth, synth.default_probes(scn))
        sets.append(TraceSet.from_trajectories(trajs, scn.spec, scn.name))
    return lib, sets


def test_criterion_5_training_sanity(library_sets):
    t0 = time.perf_counter()
    _, sets = library_sets
    samples = augment(sets[1:], 100, seed=5)
    torch.manual_seed(5)
    model = build("tranet")
    glorot_init(model)
    before = evaluate_loss(model, samples)
    cfg = TrainConfig(epochs=50, val_fraction=0.0, rng_seed=5)
    res = train(model, samples, cfg, init=False)
    after = evaluate_loss(model, samples)
    print(f"overfit loss {before:.5f} -> {after:.5f}")
    assert len(res.history) <= 50
    assert after <= 0.5 * before

    # gradients against central differences, float64 and away from the clamp
    model = build("tranet").double().eval()
    torch.nn.init.normal_(model.out.weight, std=0.05)  # the zero start would mask upstream gradients
    x = torch.from_numpy(samples.x[:4]).double()
    target = torch.from_numpy(samples.target[:4]).double()
    mask = torch.from_numpy(samples.mask[:4])
    with torch.no_grad():
        v = model(x) * 100 + 65
    assert 3 < float(v.min()) and float(v.max()) < 130
    skipped = oracles.check_gradients(model, lambda: masked_imae_loss(model(x), target, mask),
                                      np.random.default_rng(0))
    print(f"gradient check: 10 coordinates, {skipped} kinks skipped")
    assert time.perf_counter() - t0 < 300.0


# ------------------------------------------------------------------ 6, 7, 8

@pytest.fixture(scope="module")
def desk_experiment(library_sets):
    t0 = time.perf_counter()
    lib, sets = library_sets
    train_sets = [s for k, s in enumerate(sets) if k != HELD_OUT]
    samples = augment(train_sets, N_SAMPLES, seed=1)
    nets = {}
    for name, epochs in (("tranet", TRANET_EPOCHS), ("cnn6", CNN6_EPOCHS)):
        model = build(name)
        res = train(model, samples, TrainConfig(epochs=epochs, rng_seed=0))
        print(f"{name}: best epoch {res.best_epoch}, val loss {res.best_loss:.5f}")
        nets[name] = model.eval()
    methods = {"iso": baselines.isotropic, "asm": baselines.asm, "psm": baselines.psm_lite,
               "tranet": lambda f: infer_field(nets["tranet"], f),
               "cnn6": lambda f: infer_field(nets["cnn6"], f)}
    sweep = density_sweep(sets[HELD_OUT], methods, SWEEP_P, SWEEP_ITERATIONS, seed=0)
    elapsed = time.perf_counter() - t0
    for row in sweep.summary():
        print(f"{row['method']:>6} p={row['p']:.1f} imae={row['mean']:.5f} +- {row['std']:.5f}")
    return {"nets": nets, "sweep": sweep, "elapsed": elapsed, "n_train": len(train_sets)}


def test_criterion_6_method_ordering(desk_experiment):
    sweep = desk_experiment["sweep"]
    assert desk_experiment["n_train"] >= 40
    for p in (0.2, 0.5):
        assert sum(1 for r in sweep.rows if r[0] == "tranet" and r[1] == p) >= 20
        assert sweep.mean("tranet", p) < sweep.mean("cnn6", p)
        assert sweep.mean("tranet", p) < sweep.mean("iso", p)
    assert desk_experiment["elapsed"] < 3600.0


def test_criterion_7_density_monotonicity(desk_experiment):
    sweep = desk_experiment["sweep"]
    for method in ("iso", "asm", "psm", "tranet", "cnn6"):
        assert sweep.mean(method, 0.8) <= sweep.mean(method, 0.2), method


def test_criterion_8_empty_input_prior(desk_experiment):
    model = desk_experiment["nets"]["tranet"]
    with torch.no_grad():
        v = model(torch.zeros(1, 2, 64, 64)) * 100 + 65
    print(f"empty-patch mean speed {float(v.mean()):.1f} km/h")
    assert float(v.mean()) > 100.0


# ------------------------------------------------------------------ 9

def _digests(manifest: Path, root: Path) -> dict:
    out = json.loads(manifest.read_text())["outputs"]
    return {str(Path(k).relative_to(root)): v for k, v in out.items()}


def _run_all(root: Path) -> dict:
    root.mkdir()
    lib = root / "lib"
    assert main(["synth", "--library", "3", "--seed", "9", "--out", str(lib)]) == 0
    names = sorted(p.name for p in lib.iterdir() if p.is_dir())
    held = lib / names[0]
    ckpts = {}
    for net in ("tranet", "cnn6"):
        ckpts[net] = root / f"{net}.ckpt"
        assert main(["train", str(lib), "--net", net, "--holdout", names[0], "--epochs", "1",
                     "--samples", "48", "--seed", "3", "--out", str(ckpts[net])]) == 0
    recon = {}
    for method in ("iso", "asm", "psm", "tranet", "cnn6"):
        out = root / f"{method}.tsf"
        argv = ["reconstruct", str(held / "traces.csv"), "--method", method,
                "--scenario", str(held / "scenario.conf"), "--out", str(out)]
        if method in ckpts:
            argv += ["--checkpoint", str(ckpts[method])]
        assert main(argv) == 0
        recon[method] = Path(str(out) + ".manifest.json")
    assert main(["sweep", str(held), "--methods", "iso,psm,tranet,cnn6", "--p", "0.3,0.7",
                 "--iterations", "2", "--tranet-checkpoint", str(ckpts["tranet"]),
                 "--cnn6-checkpoint", str(ckpts["cnn6"]), "--out", str(root / "sweep")]) == 0
    manifests = [lib / "manifest.json", root / "sweep" / "manifest.json"]
    manifests += [Path(str(c) + ".manifest.json") for c in ckpts.values()] + list(recon.values())
    return {str(m.relative_to(root)): _digests(m, root) for m in manifests}


def test_criterion_9_cli_determinism(tmp_path):
    a = _run_all(tmp_path / "a")
    b = _run_all(tmp_path / "b")
    assert a.keys() == b.keys()
    for key in a:
        assert a[key] == b[key], key
