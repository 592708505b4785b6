"""Command-line front end: config loading, image I/O, batch orchestration,
hyper-parameter sweeps, and report emission.

Subcommands: rgm, attack, evaluate, sweep. Configuration comes from a JSON
file plus a handful of flag overrides; every JSON artifact carries a
schema_version field. Re-running a command with the same config and seed
overwrites artifacts with byte-identical content.
"""

import argparse
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import metrics, pngio, regions
from .attack import (
    AttackConfig,
    TargetKind,
    dim_attack,
    mim_attack,
    noise_baseline,
    rga_attack,
)
from .regions import SadConfig
from .tensor_core import NormMode
from .transforms import TransformConfig, derive_rng
from .victim import DOWNSAMPLE, OracleClient, PaddedVictim, SidecarVictim, ToyVictim, pad_image

SCHEMA_VERSION = 1
METHODS = ("rga", "mim", "mim+rgm", "dim", "dim+rgm", "noise")
SWEEP_PARAMS = ("epsilon", "T", "gamma", "n_dilate")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    inputs: list
    out: Path
    method: str
    attack: AttackConfig
    victim_spec: dict
    artifacts: Path | None = None
    sweep: dict | None = None


def _expand_inputs(entries, base):
    paths = []
    for entry in entries:
        p = Path(entry)
        if not p.is_absolute():
            p = base / p
        if p.is_dir():
            paths.extend(sorted(p.glob("*.png")))
        elif p.exists():
            paths.append(p)
        else:
            raise ConfigError(f"input path does not exist: {p}")
    if not paths:
        raise ConfigError("no input images found")
    return paths


def _parse_transform(d):
    cfg = TransformConfig()
    if "max_translate_frac" in d:
        cfg.max_translate_frac = float(d["max_translate_frac"])
    if "max_rotate_deg" in d:
        cfg.max_rotate_rad = math.radians(float(d["max_rotate_deg"]))
    if "scale_range" in d:
        cfg.scale_range = tuple(float(v) for v in d["scale_range"])
    if "si_scales" in d:
        cfg.si_scales = tuple(float(v) for v in d["si_scales"])
    if "dim_prob" in d:
        cfg.dim_prob = float(d["dim_prob"])
    if "dim_pad_max_frac" in d:
        cfg.dim_pad_max_frac = float(d["dim_pad_max_frac"])
    cfg.__post_init__()
    return cfg


def _parse_sad(d):
    kwargs = {}
    for key in ("gamma", "n_dilate", "seed", "mask_order"):
        if key in d:
            kwargs[key] = d[key]
    return SadConfig(**kwargs)


def _parse_attack(d):
    try:
        return AttackConfig(
            epsilon=float(d.get("epsilon", 8 / 255)),
            alpha=float(d.get("alpha", 2 / 255)),
            iters=int(d.get("iters", 40)),
            mu=float(d.get("mu", 1.0)),
            lambda_=float(d.get("lambda", 1.0)),
            sad=_parse_sad(d.get("sad", {})),
            transform=_parse_transform(d.get("transform", {})),
            target_kind=TargetKind(d.get("target", "rgm")),
            seed=int(d.get("seed", 0)),
            norm_mode=NormMode(d.get("norm_mode", "norm-product")),
            l1_normalize_grad=bool(d.get("l1_normalize_grad", False)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def attack_config_to_json(cfg):
    return {
        "epsilon": cfg.epsilon,
        "alpha": cfg.alpha,
        "iters": cfg.iters,
        "mu": cfg.mu,
        "lambda": cfg.lambda_,
        "target": cfg.target_kind.value,
        "seed": cfg.seed,
        "norm_mode": cfg.norm_mode.value,
        "l1_normalize_grad": cfg.l1_normalize_grad,
        "sad": {
            "gamma": cfg.sad.gamma,
            "n_dilate": cfg.sad.n_dilate,
            "seed": cfg.sad.seed,
            "mask_order": cfg.sad.mask_order,
        },
        "transform": {
            "max_translate_frac": cfg.transform.max_translate_frac,
            "max_rotate_deg": math.degrees(cfg.transform.max_rotate_rad),
            "scale_range": list(cfg.transform.scale_range),
            "si_scales": list(cfg.transform.si_scales),
            "dim_prob": cfg.transform.dim_prob,
            "dim_pad_max_frac": cfg.transform.dim_pad_max_frac,
        },
    }


def load_run_config(path, overrides=None):
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    overrides = overrides or {}
    base = path.parent

    attack_raw = dict(raw.get("attack", {}))
    for key in ("epsilon", "iters", "seed", "target"):
        if overrides.get(key) is not None:
            attack_raw[key] = overrides[key]
    attack_cfg = _parse_attack(attack_raw)

    victim_spec = dict(raw.get("victim", {"kind": "toy", "seed": 0, "min_area": 16}))
    if overrides.get("victim") is not None:
        spec = overrides["victim"]
        if spec == "toy":
            victim_spec = {"kind": "toy", "seed": 0, "min_area": 16}
        elif spec.startswith("toy:"):
            victim_spec = {"kind": "toy", "seed": int(spec.split(":", 1)[1]), "min_area": 16}
        else:
            raise ConfigError(f"unsupported --victim override {spec!r}")

    method = raw.get("method", "rga")
    if method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {method!r}")

    if overrides.get("out"):
        out = Path(overrides["out"]).absolute()  # flag paths are cwd-relative
    else:
        out = Path(raw.get("out", "out"))
        if not out.is_absolute():
            out = base / out

    artifacts = raw.get("artifacts")
    if artifacts is not None:
        artifacts = Path(artifacts)
        if not artifacts.is_absolute():
            artifacts = base / artifacts

    sweep = raw.get("sweep")
    if sweep is not None:
        if sweep.get("param") not in SWEEP_PARAMS:
            raise ConfigError(
                f"sweep param must be one of {SWEEP_PARAMS}, got {sweep.get('param')!r}"
            )
        values = sweep.get("values")
        if not values:
            raise ConfigError("sweep needs a nonempty values list")
        sweep = {"param": sweep["param"], "values": [float(v) for v in values]}

    inputs = raw.get("inputs")
    if not inputs:
        raise ConfigError("config needs an 'inputs' list")
    return RunConfig(
        inputs=_expand_inputs(inputs, base),
        out=out,
        method=method,
        attack=attack_cfg,
        victim_spec=victim_spec,
        artifacts=artifacts,
        sweep=sweep,
    )


def build_victim(spec):
    kind = spec.get("kind", "toy")
    if kind == "toy":
        return ToyVictim(seed=int(spec.get("seed", 0)), min_area=int(spec.get("min_area", 16)))
    if kind == "oracle":
        command = spec.get("command")
        if not command:
            raise ConfigError("oracle victim needs a 'command' list")
        segmenter = None
        if "toy_seed" in spec:
            segmenter = ToyVictim(seed=int(spec["toy_seed"]), min_area=int(spec.get("min_area", 16)))
        return SidecarVictim(OracleClient(command), segmenter=segmenter)
    raise ConfigError(f"unknown victim kind {kind!r}")


def close_victim(victim):
    client = getattr(victim, "client", None)
    if client is not None:
        client.close()


def _thread_count():
    raw = os.environ.get("RGA_FORGE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _for_each_image(paths, fn):
    """Run fn(index, path) for every image, returning (results, errors).

    Results keep input order. Parallelism is capped by RGA_FORGE_THREADS;
    per-image artifacts are independent, so ordering does not change bytes.
    """
    results = [None] * len(paths)
    errors = []
    workers = min(_thread_count(), len(paths))
    if workers <= 1:
        for i, p in enumerate(paths):
            try:
                results[i] = fn(i, p)
            except Exception as exc:
                errors.append((p, f"{type(exc).__name__}: {exc}"))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(fn, i, p): (i, p) for i, p in enumerate(paths)}
            for fut, (i, p) in futures.items():
                try:
                    results[i] = fut.result()
                except Exception as exc:
                    errors.append((p, f"{type(exc).__name__}: {exc}"))
    return results, [e for e in sorted(errors, key=lambda t: str(t[0]))]


def _per_image_seed(seed, index):
    """Stable per-image stream: child of (seed, image index)."""
    return int(derive_rng(seed, 1000 + index).integers(0, 2**63 - 1))


def _padded_for_victim(img):
    h, w, _ = img.shape
    ph = (-h) % DOWNSAMPLE
    pw = (-w) % DOWNSAMPLE
    if ph == 0 and pw == 0:
        return img, h, w
    return pad_image(img, h + ph, w + pw), h, w


def _eval_victim(victim, h, w):
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        return PaddedVictim(victim, h, w)
    return victim


def run_attack_on_image(victim, img, method, cfg):
    padded, h, w = _padded_for_victim(img)
    if method == "rga":
        result = rga_attack(victim, padded, cfg)
    elif method == "mim":
        result = mim_attack(victim, padded, cfg, use_rgm=False)
    elif method == "mim+rgm":
        result = mim_attack(victim, padded, cfg, use_rgm=True)
    elif method == "dim":
        result = dim_attack(victim, padded, cfg, use_rgm=False)
    elif method == "dim+rgm":
        result = dim_attack(victim, padded, cfg, use_rgm=True)
    elif method == "noise":
        result = noise_baseline(padded, cfg.epsilon, derive_rng(cfg.seed, 0))
    else:
        raise ConfigError(f"unknown method {method!r}")
    return result, h, w


def epsilon_levels(epsilon):
    return int(round(epsilon * 255))


def save_attack_artifacts(out_dir, stem, clean, result, cfg, method, seed):
    """Write the adversarial PNG, perturbation visualization, traces, and
    metadata. The adversarial image is written in 8-bit levels clamped to
    round(epsilon * 255) of the clean image's levels, so the serialized
    budget holds exactly for any epsilon."""
    h, w, _ = clean.shape
    adv = result.adversarial_image[:h, :w]
    delta = result.delta[:h, :w]

    clean_u8 = pngio.image_to_u8(clean).astype(np.int32)
    levels = epsilon_levels(cfg.epsilon)
    adv_u8 = np.clip(np.rint(adv * 255.0).astype(np.int32),
                     np.maximum(clean_u8 - levels, 0),
                     np.minimum(clean_u8 + levels, 255)).astype(np.uint8)
    pngio.save_image_u8(out_dir / f"{stem}.adv.png", adv_u8)

    if cfg.epsilon > 0:
        viz = (delta + cfg.epsilon) / (2 * cfg.epsilon)
    else:
        viz = np.full_like(delta, 0.5)
    pngio.save_image(out_dir / f"{stem}.delta.png", viz)

    if result.rgm_used is not None:
        pngio.save_image(out_dir / f"{stem}.target.png", result.rgm_used[:h, :w])

    pngio.atomic_write_json(out_dir / f"{stem}.traces.json", {
        "schema_version": SCHEMA_VERSION,
        "loss_trace": result.loss_trace,
        "grad_norm_trace": result.grad_norm_trace,
    })
    pngio.atomic_write_json(out_dir / f"{stem}.meta.json", {
        "schema_version": SCHEMA_VERSION,
        "method": method,
        "seed": seed,
        "epsilon_levels": levels,
        "image_size": [h, w],
        "fallback_random_noise": result.metadata.get("fallback_random_noise", False),
        "degenerate_target_features": result.metadata.get("degenerate_target_features", False),
        "attack": attack_config_to_json(cfg),
    })


def cmd_rgm(run_cfg):
    victim = build_victim(run_cfg.victim_spec)
    run_cfg.out.mkdir(parents=True, exist_ok=True)

    def work(index, path):
        img = pngio.load_image(path)
        h, w, _ = img.shape
        masks = _eval_victim(victim, h, w).segment_everything(img)
        if not masks:
            raise RuntimeError("victim produced no masks; cannot build a map")
        rgm = regions.build_rgm(masks, run_cfg.attack.sad)
        stem = path.stem
        pngio.save_image(run_cfg.out / f"{stem}.rgm.png", rgm)
        regions.save_mask_set(run_cfg.out / f"{stem}.masks", masks)
        return stem

    _, errors = _for_each_image(run_cfg.inputs, work)
    _report_errors("rgm", errors)
    close_victim(victim)
    return 1 if errors else 0


def cmd_attack(run_cfg):
    victim = build_victim(run_cfg.victim_spec)
    run_cfg.out.mkdir(parents=True, exist_ok=True)

    def work(index, path):
        img = pngio.load_image(path)
        seed = _per_image_seed(run_cfg.attack.seed, index)
        cfg = replace(run_cfg.attack, seed=seed,
                      sad=replace(run_cfg.attack.sad, seed=seed))
        result, h, w = run_attack_on_image(victim, img, run_cfg.method, cfg)
        save_attack_artifacts(run_cfg.out, path.stem, img, result, cfg,
                              run_cfg.method, seed)
        return path.stem

    _, errors = _for_each_image(run_cfg.inputs, work)
    _report_errors("attack", errors)
    close_victim(victim)
    return 1 if errors else 0


def cmd_evaluate(run_cfg):
    victim = build_victim(run_cfg.victim_spec)
    artifacts = run_cfg.artifacts or run_cfg.out
    run_cfg.out.mkdir(parents=True, exist_ok=True)

    per_image = {}
    missing = []
    records = []

    def work(index, path):
        adv_path = artifacts / f"{path.stem}.adv.png"
        if not adv_path.exists():
            return ("missing", path.stem, None)
        clean = pngio.load_image(path)
        adv = pngio.load_image(adv_path)
        h, w, _ = clean.shape
        record = metrics.evaluate_attack(_eval_victim(victim, h, w), clean, adv)
        return ("ok", path.stem, record)

    results, errors = _for_each_image(run_cfg.inputs, work)
    for item in results:
        if item is None:
            continue
        status, stem, record = item
        if status == "missing":
            missing.append(stem)
        else:
            per_image[stem] = record
            records.append(record)

    pooled = metrics.pool_records(records)
    report = {
        "schema_version": SCHEMA_VERSION,
        "pooled": pooled.to_json_dict(),
        "per_image": {stem: rec.to_json_dict() for stem, rec in per_image.items()},
        "missing_artifacts": sorted(missing),
        "errors": [f"{p}: {msg}" for p, msg in errors],
    }
    pngio.atomic_write_json(run_cfg.out / "report.json", report)
    _report_errors("evaluate", errors)
    close_victim(victim)
    return 1 if errors else 0


def _sweep_variant(attack_cfg, param, value):
    if param == "epsilon":
        eps = float(value)
        alpha = min(attack_cfg.alpha, eps) if eps > 0 else attack_cfg.alpha
        return replace(attack_cfg, epsilon=eps, alpha=alpha)
    if param == "T":
        return replace(attack_cfg, iters=int(value))
    if param == "gamma":
        return replace(attack_cfg, sad=replace(attack_cfg.sad, gamma=float(value)))
    if param == "n_dilate":
        return replace(attack_cfg, sad=replace(attack_cfg.sad, n_dilate=int(value)))
    raise ConfigError(f"sweep param must be one of {SWEEP_PARAMS}, got {param!r}")


def _format_value(param, value):
    return str(int(value)) if param in ("T", "n_dilate") else f"{value:g}"


def cmd_sweep(run_cfg):
    if run_cfg.sweep is None:
        raise ConfigError("sweep command needs a 'sweep' config section")
    param = run_cfg.sweep["param"]
    values = run_cfg.sweep["values"]
    # validate every variant before running anything
    variants = [(v, _sweep_variant(run_cfg.attack, param, v)) for v in values]

    run_cfg.out.mkdir(parents=True, exist_ok=True)
    rows = []
    failed = 0
    for value, cfg in variants:
        tag = _format_value(param, value)
        sub_out = run_cfg.out / f"{param}_{tag}"
        sub = RunConfig(
            inputs=run_cfg.inputs, out=sub_out, method=run_cfg.method,
            attack=cfg, victim_spec=run_cfg.victim_spec,
        )
        failed += cmd_attack(sub)
        failed += cmd_evaluate(sub)
        report = json.loads((sub_out / "report.json").read_text())
        pooled = report["pooled"]
        rows.append((value, pooled["miou"], pooled["asr50"], pooled["asr10"]))

    csv_lines = ["param_value,miou,asr50,asr10"]
    for value, miou_v, asr50, asr10 in rows:
        csv_lines.append(f"{value:g},{_fmt(miou_v)},{_fmt(asr50)},{_fmt(asr10)}")
    pngio.atomic_write_text(run_cfg.out / "sweep.csv", "\n".join(csv_lines) + "\n")
    pngio.atomic_write_json(run_cfg.out / "sweep.json", {
        "schema_version": SCHEMA_VERSION,
        "param": param,
        "rows": [{"param_value": v, "miou": m, "asr50": a50, "asr10": a10}
                 for v, m, a50, a10 in rows],
    })
    return 1 if failed else 0


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def _report_errors(command, errors):
    for path, message in errors:
        print(f"rga-forge {command}: {path}: {message}", file=sys.stderr)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="rga-forge",
        description="region-guided adversarial attacks on a promptable segmenter",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("rgm", "attack", "evaluate", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--epsilon", type=float, default=None)
        p.add_argument("--iters", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--target", default=None)
        p.add_argument("--victim", default=None)
        p.add_argument("--out", default=None)
    args = parser.parse_args(argv)

    overrides = {
        "epsilon": args.epsilon,
        "iters": args.iters,
        "seed": args.seed,
        "target": args.target,
        "victim": args.victim,
        "out": args.out,
    }
    try:
        run_cfg = load_run_config(args.config, overrides)
        command = {"rgm": cmd_rgm, "attack": cmd_attack,
                   "evaluate": cmd_evaluate, "sweep": cmd_sweep}[args.command]
        return command(run_cfg)
    except ConfigError as exc:
        print(f"rga-forge: config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
