"""Numbered acceptance criteria. Each test prints one PASS/FAIL line.

Criteria 3 to 5 train networks and take roughly an hour together; select the
rest with ``-m "not slow"``.
"""
import shutil
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

import oracles
from cmrfcn import cli, clinical, data, experiments, gradcheck, metrics, stats
from cmrfcn import network as net


def crit(n):
    return pytest.mark.criterion(n)


def _fmt_dice(d):
    return " ".join(f"{c}:{v:.3f}" for c, v in d.items())


@crit(1)
def test_gradient_suite(verdict):
    t0 = time.perf_counter()
    reports = gradcheck.run_suite(seed=0)
    seconds = time.perf_counter() - t0
    layers = [r for r in reports if not r.name.startswith("network")]
    net_rep = reports[-1]
    worst = max(layers, key=lambda r: r.max_rel_error)
    ok = (all(r.passed and r.max_rel_error < gradcheck.LAYER_TOL for r in layers)
          and net_rep.passed and net_rep.max_rel_error < gradcheck.NETWORK_TOL and net_rep.n_checked >= 20
          and seconds < 120)
    verdict(ok, f"worst layer {worst.name} {worst.max_rel_error:.1e} (<1e-4), network "
                f"{net_rep.max_rel_error:.1e} over {net_rep.n_checked} weights (<1e-3), {seconds:.0f} s (<120 s)")


@crit(2)
def test_architecture(verdict):
    model = net.build_network(net.NetworkConfig(k=4, input_size=32), seed=0)
    # transposed-conv kernels live under "up*" and are not counted
    convs = [n for n, p in model.params.items()
             if n.endswith(".weight") and not n.startswith("up") and p.value.shape[-1] in (1, 3)]
    x = np.random.default_rng(0).random((2, 1, 32, 32), dtype=np.float32)
    _, tape = net.forward_logits(model, x, "train", keep_tape=True)
    width = sum(tape["concat"])  # channel count of each concatenated scale
    ok = len(convs) == 16 == model.config.conv_layer_count and model.config.concat_width == 496 == width
    verdict(ok, f"{len(convs)} conv layers (16), concatenation {width} channels (496)")


@pytest.fixture(scope="module")
def generalised():
    return experiments.generalise()


@pytest.mark.slow
@crit(3)
def test_overfit(verdict):
    _, res = experiments.overfit()
    lv = res.dice[1]
    ok = lv > 0.95 and res.loss < 0.05 and res.final_batch_loss < 0.05 and res.seconds < 1800
    verdict(ok, f"train LV Dice {lv:.4f} (>0.95), loss over training set {res.loss:.4f} and final batch "
                f"{res.final_batch_loss:.4f} (both <0.05), {res.seconds / 60:.1f} min (<30 min); all {_fmt_dice(res.dice)}")


@pytest.mark.slow
@crit(4)
def test_generalisation(verdict, generalised):
    _, res = generalised
    ok = all(v > 0.90 for v in res.dice.values())
    verdict(ok, f"held-out Dice {_fmt_dice(res.dice)} (each >0.90), {res.seconds / 60:.1f} min")


@pytest.mark.slow
@crit(5)
def test_finetune_shift(verdict, generalised):
    model, _ = generalised
    _, res = experiments.finetune_shift(model, iterations=500)
    before, after = experiments.mean_dice(res.before), experiments.mean_dice(res.after)
    ok = before < after and res.improvement >= 0.05
    verdict(ok, f"shifted test mean Dice {before:.3f} -> {after:.3f}, +{res.improvement:.3f} (>=0.05); "
                f"before {_fmt_dice(res.before)}; after {_fmt_dice(res.after)}")


@crit(6)
def test_metric_oracle(verdict):
    rng = np.random.default_rng(6)
    mismatches, compared = [], 0
    for i in range(200):
        h, w = (int(v) for v in rng.integers(1, 17, 2))
        fill = rng.uniform(0.05, 0.9)
        a = rng.random((h, w)) < fill
        b = rng.random((h, w)) < fill
        spacing = tuple(float(v) for v in rng.uniform(0.5, 3.0, 2)) + (10.0,)
        if metrics.dice(a, b) != oracles.dice_brute(a, b):
            mismatches.append((i, "dice"))
        for name, fast, slow in (("mcd", metrics.mean_contour_distance, oracles.mcd_brute),
                                 ("hd", metrics.hausdorff, oracles.hd_brute)):
            got, want = fast(a, b, spacing), slow(a, b, spacing)
            if (got is None) != (want is None) or (got is not None and abs(got - want) > 1e-9):
                mismatches.append((i, name, got, want))
            compared += want is not None
    verdict(not mismatches, f"200 pairs, {compared} distance values compared, mismatches {mismatches[:3]}")


@crit(7)
def test_clinical_measures(verdict):
    lab = np.zeros((10, 20, 20), np.int16)
    lab.ravel()[:1000] = data.LV_CAVITY
    vol = clinical.chamber_volume(data.LabelMap(lab, (1.8, 1.8, 10.0)), data.LV_CAVITY)
    myo = np.zeros((10, 20, 20), np.int16)
    myo.ravel()[:1000] = data.LV_MYO  # 1000 voxels of 100 mm^3
    mass = clinical.lv_mass(data.LabelMap(myo, (5.0, 2.0, 10.0)))
    d = clinical.derived_measures(143, 60)
    ok = vol == 32.4 and mass == 105.0 and d.sv == 83 and abs(d.ef - 58.0) <= 0.1
    verdict(ok, f"volume {vol!r} mL (32.4), mass {mass!r} g (105), SV {d.sv} (83), EF {d.ef:.2f}% (58.0 +/- 0.1)")


@crit(8)
def test_statistics(verdict):
    ba = stats.bland_altman(stats.PairedSample([10, 20, 30], [12, 18, 33]))
    ba_ok = (abs(ba.bias - 1.0) <= 1e-3 and abs(ba.lower + 4.186) <= 1e-3 and abs(ba.upper - 6.186) <= 1e-3)
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(20):
        a = rng.normal(rng.uniform(-2, 2), rng.uniform(0.5, 3), int(rng.integers(3, 30)))
        b = rng.normal(rng.uniform(-2, 2), rng.uniform(0.5, 3), int(rng.integers(3, 30)))
        p, _, _ = oracles.welch_p_quadrature(a.tolist(), b.tolist())
        worst = max(worst, abs(stats.welch_t_test(a, b).p - p))
    same = stats.welch_t_test([4.0, 5.5, 7.25, 6.0], [4.0, 5.5, 7.25, 6.0]).p
    ok = ba_ok and worst < 1e-6 and same == 1.0
    verdict(ok, f"bias {ba.bias:.4f}, limits ({ba.lower:.4f}, {ba.upper:.4f}); welch max |dp| {worst:.1e} "
                f"(<1e-6) on 20 cases; identical groups p = {same}")


def _run(*argv):
    return cli.main([str(a) for a in argv])


@crit(9)
def test_inference_time(verdict, tmp_path):
    assert _run("synth", "--subjects", 1, "--size", 192, "--slices", 10, "--frames", 20, "--out", tmp_path / "d") == 0
    assert _run("train", "--manifest", tmp_path / "d" / "manifest.csv", "--iterations", 1, "--input-size", 192,
                "--batch-size", 2, "--out", tmp_path / "m") == 0
    with threadpool_limits(1):
        t0 = time.perf_counter()
        rc = _run("segment", "--manifest", tmp_path / "d" / "manifest.csv", "--checkpoint",
                  tmp_path / "m" / "model.fcnc", "--input-size", 192, "--split", "all", "--threads", 1,
                  "--out", tmp_path / "s")
        wall = time.perf_counter() - t0
    timing = (tmp_path / "s" / "timing.csv").read_text().splitlines()
    slices = sum(int(r.split(",")[2]) for r in timing[1:])
    compute = sum(float(r.split(",")[3]) for r in timing[1:])
    ok = rc == 0 and len(timing) == 3 and slices == 20 and wall < 30
    verdict(ok, f"{len(timing) - 1} frames x 10 slices at 192 px: {wall:.1f} s wall incl. I/O, "
                f"{compute:.1f} s logged in timing.csv (<30 s, 1 thread)")


def _tree(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "timing.csv"}


@crit(10)
def test_determinism(verdict, tmp_path):
    runs = []
    out = tmp_path / "run"
    for _ in range(2):
        shutil.rmtree(out, ignore_errors=True)
        assert _run("synth", "--subjects", 3, "--frames", 6, "--slices", 3, "--size", 32, "--seed", 11,
                    "--out", out / "synth") == 0
        assert _run("train", "--manifest", out / "synth" / "manifest.csv", "--iterations", 4, "--input-size", 32,
                    "--batch-size", 4, "--log-every", 1, "--max-translation", 2, "--seed", 11,
                    "--out", out / "train") == 0
        assert _run("segment", "--manifest", out / "synth" / "manifest.csv", "--checkpoint",
                    out / "train" / "model.fcnc", "--input-size", 32, "--split", "all", "--out", out / "seg") == 0
        runs.append({stage: _tree(out / stage) for stage in ("synth", "train", "seg")})
    same = {stage: runs[0][stage] == runs[1][stage] for stage in runs[0]}

    model = net.load_checkpoint(out / "train" / "model.fcnc")
    raw = net.checkpoint_bytes(model)
    back = net.checkpoint_from_bytes(raw)
    ck_ok = net.checkpoint_bytes(back) == raw and all(
        np.array_equal(model[n], back[n]) and model[n].dtype == back[n].dtype for n in model.params)

    rng = np.random.default_rng(10)
    vol = data.Volume(rng.random((2, 3, 7, 5), dtype=np.float32) * 1e3, (1.8, 1.7, 8.0), 0.035)
    lab = data.LabelMap(rng.integers(0, 4, (3, 7, 5)).astype(np.int16), (1.25, 1.25, 10.0))
    cont_ok = True
    for item in (vol, lab):
        path = tmp_path / f"rt_{type(item).__name__}.csg"
        data.write_container(path, item)
        got = data.read_container(path)
        cont_ok &= (got.data.tobytes() == item.data.tobytes() and got.data.dtype == item.data.dtype
                    and got.spacing == item.spacing)
    ok = all(same.values()) and ck_ok and cont_ok
    verdict(ok, f"byte-identical reruns {same}; checkpoint round-trip {ck_ok}; container round-trip {cont_ok}")
