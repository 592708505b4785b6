"""Acceptance gate.

Every test prints one PASS/FAIL line (run with -s to see them on success).
Directional thresholds are contracts of the committed fixture suite, victim
seed, and attack seeds; they are checked at exactly the stated tolerances.
"""

import hashlib
import json
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import scipy.ndimage

from rga_forge import attack as A
from rga_forge import cli, fixtures, metrics, pngio, regions
from rga_forge import tensor_core as tc
from rga_forge import transforms
from rga_forge import victim as V
from rga_forge.attack import AttackConfig, TargetKind
from rga_forge.regions import SadConfig
from rga_forge.transforms import derive_rng

VICTIM_SEED = 14
MASTER_SEEDS = (0, 1)
EPSILON = 8 / 255


def report(criterion, passed, detail):
    line = f"ACCEPTANCE {criterion}: {'PASS' if passed else 'FAIL'} ({detail})"
    print(line, file=sys.stderr)
    assert passed, line


def per_image_seed(master, index):
    return int(derive_rng(master, 1000 + index).integers(0, 2**63 - 1))


@pytest.fixture(scope="module")
def victim():
    return V.ToyVictim(seed=VICTIM_SEED, min_area=16)


@pytest.fixture(scope="module")
def suite():
    return fixtures.fixture_suite()


@pytest.fixture(scope="module")
def suite_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("suite")
    fixtures.write_fixture_suite(d)
    return d


def run_variant(victim, suite, fn, **cfg_kw):
    records = []
    for master in MASTER_SEEDS:
        for i, (_, img) in enumerate(suite):
            seed = per_image_seed(master, i)
            cfg = AttackConfig(seed=seed, **cfg_kw)
            cfg = replace(cfg, sad=replace(cfg.sad, seed=seed))
            result = fn(victim, img, cfg)
            records.append(
                metrics.evaluate_attack(victim, img, pngio.quantize(result.adversarial_image))
            )
    return metrics.pool_records(records)


@pytest.fixture(scope="module")
def headline_runs(victim, suite):
    """The attack-vs-baseline runs shared by criteria 5, 6, 7, and 9."""
    t0 = time.monotonic()
    rga = run_variant(victim, suite, A.rga_attack)
    noise_records = []
    for master in MASTER_SEEDS:
        for i, (_, img) in enumerate(suite):
            seed = per_image_seed(master, i)
            res = A.noise_baseline(img, EPSILON, derive_rng(seed, 0))
            noise_records.append(
                metrics.evaluate_attack(victim, img, pngio.quantize(res.adversarial_image))
            )
    noise = metrics.pool_records(noise_records)
    rga_noise_seconds = time.monotonic() - t0
    return {
        "rga": rga,
        "noise": noise,
        "rga_noise_seconds": rga_noise_seconds,
        "black": run_variant(victim, suite, A.rga_attack, target_kind=TargetKind.BLACK),
        "white": run_variant(victim, suite, A.rga_attack, target_kind=TargetKind.WHITE),
        "random_noise_target": run_variant(
            victim, suite, A.rga_attack, target_kind=TargetKind.RANDOM_NOISE
        ),
        "mim": run_variant(victim, suite, lambda v, x, c: A.mim_attack(v, x, c, use_rgm=False)),
        "mim_rgm": run_variant(victim, suite, lambda v, x, c: A.mim_attack(v, x, c, use_rgm=True)),
        "dim": run_variant(victim, suite, lambda v, x, c: A.dim_attack(v, x, c, use_rgm=False)),
        "dim_rgm": run_variant(victim, suite, lambda v, x, c: A.dim_attack(v, x, c, use_rgm=True)),
    }


def test_criterion_1_gradient_correctness(victim):
    t0 = time.monotonic()
    worst = 0.0
    for fixture_idx in range(5):
        rng = derive_rng(900, fixture_idx)
        x_data = rng.random((8, 8, 3)).astype(np.float32)
        guide = rng.random((8, 8, 3)).astype(np.float32)
        rst = transforms.sample_rst(rng, transforms.TransformConfig(), 8, 8)
        y_s = victim.encode(x_data)
        y_g = victim.encode(guide)
        si_scales = (1.0, 0.5, 0.25)

        def f(t):
            warped = transforms.warp(t, rst)
            total = None
            for c in si_scales:
                feats = V.toy_encode_tape(victim.weights, warped * float(c))
                loss = A.rga_loss(
                    feats,
                    tc.Tensor(y_s, dtype=t.data.dtype),
                    tc.Tensor(y_g, dtype=t.data.dtype),
                    1.0,
                )
                total = loss if total is None else total + loss
            return total * (1.0 / len(si_scales))

        err = tc.finite_diff_check(
            f, tc.Tensor(x_data), h=1e-3, samples=64, rng=derive_rng(901, fixture_idx)
        )
        worst = max(worst, err)
    elapsed = time.monotonic() - t0
    report(
        "1 gradient-correctness",
        worst < 1e-3 and elapsed < 30.0,
        f"max rel err {worst:.2e} < 1e-3 over 5 fixtures x 64 coords, {elapsed:.1f}s < 30s",
    )


def test_criterion_2_sad_invariants():
    t0 = time.monotonic()
    rng = np.random.default_rng(902)
    checked_boundary = 0
    for trial in range(200):
        h = int(rng.integers(8, 65))
        w = int(rng.integers(8, 65))
        gamma = float(rng.uniform(0.05, 0.35))
        n_dilate = int(rng.integers(0, 4))
        gs = regions.compute_grid_size(w, h, gamma)
        masks = []
        for _ in range(int(rng.integers(1, 5))):
            m = np.zeros((h, w), dtype=bool)
            y0, x0 = int(rng.integers(0, h)), int(rng.integers(0, w))
            y1 = min(h, y0 + int(rng.integers(1, h // 2 + 2)))
            x1 = min(w, x0 + int(rng.integers(1, w // 2 + 2)))
            m[y0:y1, x0:x1] = True
            masks.append(m)
        if trial % 10 == 0 and gs + 1 < min(h, w) // 2:
            # a mask with area exactly grid_size**2 must take the dilation branch
            boundary = np.zeros((h, w), dtype=bool)
            boundary[1:1 + gs, 1:1 + gs] = True
            masks = [boundary]
            checked_boundary += 1
        cfg = SadConfig(gamma=gamma, n_dilate=n_dilate, seed=int(rng.integers(0, 2**31)))
        counter = np.zeros((h, w), dtype=np.int64)
        rgm = regions.build_rgm(masks, cfg, write_counter=counter)
        assert counter.max() <= 1, "a pixel was written twice"

        structure = np.ones((3, 3), dtype=bool)
        support = np.zeros((h, w), dtype=bool)
        for m in masks:
            if int(m.sum()) <= gs * gs:
                grown = (
                    scipy.ndimage.binary_dilation(m, structure=structure, iterations=n_dilate)
                    if n_dilate else m
                )
                support |= grown
            else:
                for ty in range(0, h, gs):
                    for tx in range(0, w, gs):
                        tile = m[ty:ty + gs, tx:tx + gs]
                        if tile.any():
                            support[ty:ty + gs, tx:tx + gs] |= tile
        np.testing.assert_array_equal(rgm.any(axis=2), support)
        if len(masks) == 1 and masks[0].sum() == gs * gs and n_dilate > 0:
            assert support.sum() > gs * gs, "boundary mask did not dilate"
    elapsed = time.monotonic() - t0
    report(
        "2 sad-invariants",
        elapsed < 10.0,
        f"200 mask sets: first-writer-wins, boundary routing ({checked_boundary} explicit), "
        f"support oracle equality, {elapsed:.1f}s < 10s",
    )


def test_criterion_3_metric_oracles():
    rng = np.random.default_rng(903)

    def naive_iou(p, g):
        inter = union = 0
        for y in range(p.shape[0]):
            for x in range(p.shape[1]):
                inter += bool(p[y, x] and g[y, x])
                union += bool(p[y, x] or g[y, x])
        return 1.0 if union == 0 else inter / union

    for _ in range(500):
        p = rng.random((9, 8)) < 0.4
        g = rng.random((9, 8)) < 0.4
        assert metrics.iou(p, g) == naive_iou(p, g)
    ious = rng.random(60).tolist()
    for t in np.linspace(0, 1, 11):
        expected = sum(1 for v in ious if v <= t) / len(ious)
        assert metrics.asr_at(ious, float(t)) == expected
    asr_curve = [metrics.asr_at(ious, float(t)) for t in np.linspace(0, 1, 11)]
    assert all(a <= b for a, b in zip(asr_curve, asr_curve[1:]))

    mean, _ = metrics.miou([0.6, 0.4, 0.05])
    ok = (
        math.isclose(mean, 0.35)
        and metrics.asr_at([0.6, 0.4, 0.05], 0.50) == pytest.approx(2 / 3)
        and metrics.asr_at([0.6, 0.4, 0.05], 0.10) == pytest.approx(1 / 3)
    )
    report(
        "3 metric-oracles",
        ok,
        "500 pairs match pixel-loop oracle exactly; asr monotone; pinned values hold",
    )


def test_criterion_4_linf_budget(suite_dir, tmp_path):
    levels = round(EPSILON * 255)
    failures = []
    for method in ("rga", "mim", "mim+rgm", "dim", "dim+rgm", "noise"):
        out = tmp_path / method.replace("+", "_")
        cfg_path = tmp_path / f"{method.replace('+', '_')}.json"
        cfg_path.write_text(json.dumps({
            "inputs": [str(suite_dir)],
            "out": str(out),
            "method": method,
            "attack": {"seed": 0},
            "victim": {"kind": "toy", "seed": VICTIM_SEED, "min_area": 16},
        }))
        assert cli.main(["attack", "--config", str(cfg_path)]) == 0
        for clean_path in sorted(suite_dir.glob("*.png")):
            clean = pngio.image_to_u8(pngio.load_image(clean_path)).astype(int)
            adv = pngio.image_to_u8(
                pngio.load_image(out / f"{clean_path.stem}.adv.png")
            ).astype(int)
            worst = int(np.abs(adv - clean).max())
            if worst > levels:
                failures.append((method, clean_path.stem, worst))
    report(
        "4 linf-budget",
        not failures,
        f"all saved PNGs within {levels}/255 levels for 6 variants x 8 fixtures"
        + (f"; violations: {failures}" if failures else ""),
    )


def test_criterion_5_attack_effectiveness(headline_runs):
    rga = headline_runs["rga"]
    noise = headline_runs["noise"]
    margin = noise.miou - rga.miou
    elapsed = headline_runs["rga_noise_seconds"]
    ok = rga.miou <= 0.5 and margin >= 0.3 and rga.asr50 >= 0.5 and elapsed < 300.0
    report(
        "5 attack-effectiveness",
        ok,
        f"mIoU(rga)={rga.miou:.3f}<=0.5, noise-rga margin={margin:.3f}>=0.3, "
        f"ASR@50={rga.asr50:.3f}>=0.5, runtime {elapsed:.1f}s < 300s",
    )


def test_criterion_6_target_type_ordering(headline_runs):
    rga = headline_runs["rga"].miou
    others = {
        "black": headline_runs["black"].miou,
        "white": headline_runs["white"].miou,
        "random-noise": headline_runs["random_noise_target"].miou,
    }
    ok = rga < min(others.values())
    report(
        "6 target-ordering",
        ok,
        f"mIoU(rgm)={rga:.3f} < " + ", ".join(f"{k}={v:.3f}" for k, v in others.items()),
    )


def test_criterion_7_rgm_integration_lift(headline_runs):
    mim = headline_runs["mim"].miou
    mim_rgm = headline_runs["mim_rgm"].miou
    dim = headline_runs["dim"].miou
    dim_rgm = headline_runs["dim_rgm"].miou
    ok = mim_rgm < mim and dim_rgm < dim
    report(
        "7 rgm-integration-lift",
        ok,
        f"mim+rgm={mim_rgm:.3f} < mim={mim:.3f}; dim+rgm={dim_rgm:.3f} < dim={dim:.3f}",
    )


def test_criterion_8_determinism(suite_dir, tmp_path):
    hashes = []
    for run in ("a", "b"):
        out = tmp_path / f"run_{run}"
        cfg_path = tmp_path / f"run_{run}.json"
        cfg_path.write_text(json.dumps({
            "inputs": [str(suite_dir)],
            "out": str(out),
            "method": "rga",
            "attack": {"seed": 0},
            "victim": {"kind": "toy", "seed": VICTIM_SEED, "min_area": 16},
        }))
        assert cli.main(["attack", "--config", str(cfg_path)]) == 0
        tree = {}
        for p in sorted(Path(out).rglob("*")):
            if p.is_file():
                tree[str(p.relative_to(out))] = hashlib.sha256(p.read_bytes()).hexdigest()
        hashes.append(tree)
    ok = hashes[0] == hashes[1] and len(hashes[0]) > 0
    report(
        "8 determinism",
        ok,
        f"two attack runs produced byte-identical trees ({len(hashes[0])} files)",
    )


def test_criterion_9_sweep_sanity(suite_dir, tmp_path, headline_runs):
    cfg_path = tmp_path / "sweep_eps.json"
    cfg_path.write_text(json.dumps({
        "inputs": [str(suite_dir)],
        "out": str(tmp_path / "sweep_eps"),
        "method": "rga",
        "attack": {"seed": 0},
        "victim": {"kind": "toy", "seed": VICTIM_SEED, "min_area": 16},
        "sweep": {"param": "epsilon", "values": [0.0, 2 / 255, 8 / 255]},
    }))
    assert cli.main(["sweep", "--config", str(cfg_path)]) == 0
    rows = {
        round(r["param_value"], 8): r
        for r in json.loads((tmp_path / "sweep_eps" / "sweep.json").read_text())["rows"]
    }
    miou_0 = rows[0.0]["miou"]
    miou_2 = rows[round(2 / 255, 8)]["miou"]
    miou_8 = rows[round(8 / 255, 8)]["miou"]

    asr_t40 = headline_runs["rga"].asr50
    t1 = run_variant(
        V.ToyVictim(seed=VICTIM_SEED, min_area=16), fixtures.fixture_suite(),
        A.rga_attack, iters=1,
    )
    ok = miou_0 == 1.0 and miou_8 < miou_2 and asr_t40 >= t1.asr50
    report(
        "9 sweep-sanity",
        ok,
        f"mIoU(eps=0)={miou_0} == 1.0; mIoU(8/255)={miou_8:.3f} < mIoU(2/255)={miou_2:.3f}; "
        f"ASR@50(T=40)={asr_t40:.3f} >= ASR@50(T=1)={t1.asr50:.3f}",
    )


def test_criterion_10_oracle_loopback(victim, suite):
    name, img = suite[0]
    seed = per_image_seed(0, 0)
    cfg = AttackConfig(seed=seed)
    cfg = replace(cfg, sad=replace(cfg.sad, seed=seed))
    local = A.rga_attack(victim, img, cfg)
    command = [sys.executable, "-m", "rga_forge.sidecar", "--seed", str(VICTIM_SEED)]
    with V.OracleClient(command) as client:
        remote_victim = V.SidecarVictim(client, segmenter=victim)
        remote = A.rga_attack(remote_victim, img, cfg)
    ok = (
        np.array_equal(local.delta, remote.delta)
        and np.array_equal(local.adversarial_image, remote.adversarial_image)
        and local.loss_trace == remote.loss_trace
        and local.grad_norm_trace == remote.grad_norm_trace
    )
    report(
        "10 oracle-loopback",
        ok,
        f"sidecar-backed attack on {name} reproduced the in-process result bit-identically",
    )
