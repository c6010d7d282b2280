"""Command-line entry point: ``grcnn {train,finetune,gen-noise,eval,rf-probe,grad-check}``.

Configuration is a flat dict of dotted keys. Later sources win:
built-in defaults, preset, ``--config`` JSON file, ``--set key=value``,
dedicated flags. The resolved dict is written to ``<out>/resolved-config.json``
before the command runs.

Exit codes: 0 success, 1 verification or training failure, 2 bad
configuration or input.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import traceback
from dataclasses import fields
from pathlib import Path

import numpy as np

from .augment import generate_texture_noise_dataset, verify_texture_noise_dataset
from .checkpoint import CheckpointError, Checkpoint, load_checkpoint, restore, save_checkpoint
from .data import load_image_folder, load_overlay_pool, synthetic_corpus
from .gradcheck import SUITES, run_grad_check
from .grcl import GateMode, init_grcl
from .network import PRESETS, GrcnnConfig, build_grcnn, network_forward
from .objectives import SuperclassMap
from .receptive_field import receptive_field_probe
from .trainer import ConfigError, DivergenceError, TrainConfig, TrainState, evaluate, finetune_stage, run_training

log = logging.getLogger("grcnn")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class VerificationFailed(RuntimeError):
    pass


# --------------------------------------------------------------------------
# configuration


def default_config() -> dict:
    cfg = {
        "model.preset": "tiny",
        "model.T": None,
        "model.num_classes": None,
        "model.tie_weights": True,
        "data.synthetic_train": 5000,
        "data.synthetic_test": 1000,
        "data.synthetic_seed": 0,
        "probe.T": [0, 1, 2, 3],
        "probe.size": 33,
        "probe.scope": "block",
        "probe.gate": "learned",
        "grad_check.scope": "kernel",
        "grad_check.seeds": 10,
    }
    for f in fields(TrainConfig):
        d = f.default
        cfg[f"trainer.{f.name}"] = list(d) if isinstance(d, tuple) else d
    return cfg


PRESET_OVERRIDES = {
    "tiny": {},
    "paper": {"data.synthetic_train": 5000, "trainer.batch_size": 256, "trainer.lr": 0.1},
}


def _coerce(key: str, value, default):
    if isinstance(value, str) and not isinstance(default, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            if default is not None:
                raise ConfigError(f"{key}: cannot parse {value!r}") from None
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(value, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{key}: expected a list, got {value!r}")
    return value


def _merge(cfg: dict, updates: dict, source: str) -> None:
    for key, value in updates.items():
        if key not in cfg:
            raise ConfigError(f"unknown config key {key!r} (from {source})")
        cfg[key] = _coerce(key, value, cfg[key] if cfg[key] is not None else default_config()[key])


def resolve_config(args) -> dict:
    cfg = default_config()
    file_cfg = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from None
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"{path}: top level must be an object of dotted keys")
    preset = args.preset or file_cfg.get("model.preset") or cfg["model.preset"]
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    cfg["model.preset"] = preset
    _merge(cfg, PRESET_OVERRIDES[preset], f"preset {preset}")
    _merge(cfg, file_cfg, str(args.config))
    sets = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        sets[k.strip()] = v
    _merge(cfg, sets, "--set")
    _merge(cfg, {k: v for k, v in _flag_overrides(args).items() if v is not None}, "flags")
    return cfg


def _flag_overrides(args) -> dict:
    out = {"trainer.seed": args.seed}
    if args.preset:
        out["model.preset"] = args.preset
    for flag, key in FLAG_KEYS.get(args.command, {}).items():
        out[key] = getattr(args, flag, None)
    return out


FLAG_KEYS = {
    "train": {"epochs": "trainer.epochs", "lr": "trainer.lr", "batch_size": "trainer.batch_size",
              "data": "trainer.data_dir", "test_data": "trainer.test_dir", "cutmix": "trainer.cutmix",
              "augmix": "trainer.augmix"},
    "finetune": {"epochs": "trainer.epochs", "lr": "trainer.lr", "batch_size": "trainer.batch_size",
                 "data": "trainer.data_dir", "textures": "trainer.texture_dir", "noise": "trainer.noise_dir",
                 "p_blend": "trainer.p_blend"},
    "eval": {"data": "trainer.test_dir"},
    "rf-probe": {"T": "probe.T", "size": "probe.size", "scope": "probe.scope"},
    "grad-check": {"scope": "grad_check.scope", "seeds": "grad_check.seeds"},
}


def trainer_config(cfg: dict, **over) -> TrainConfig:
    d = {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("trainer.")}
    d.update(over)
    return TrainConfig.from_dict(d)


def model_config(cfg: dict, num_classes: int) -> GrcnnConfig:
    n = cfg["model.num_classes"] or num_classes
    mc = PRESETS[cfg["model.preset"]](n, tie_weights=cfg["model.tie_weights"])
    if cfg["model.T"] is not None:
        if cfg["model.T"] < 0:
            raise ConfigError("model.T must be >= 0")
        mc = mc.with_T(cfg["model.T"])
    return mc


def _datasets(cfg: dict, need_train: bool = True):
    try:
        return _load_datasets(cfg, need_train)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _load_datasets(cfg: dict, need_train: bool):
    train = test = None
    if cfg["trainer.data_dir"] or cfg["trainer.test_dir"]:
        if need_train:
            if not cfg["trainer.data_dir"]:
                raise ConfigError("trainer.data_dir is required when trainer.test_dir is set")
            train = load_image_folder(cfg["trainer.data_dir"])
        if cfg["trainer.test_dir"]:
            test = load_image_folder(cfg["trainer.test_dir"])
        return train, test
    return synthetic_corpus(cfg["data.synthetic_train"], cfg["data.synthetic_test"], cfg["data.synthetic_seed"])


def _smap(cfg: dict):
    if not cfg["trainer.superclass_map"]:
        return None
    for key in ("trainer.superclass_map", "trainer.superclass_reference"):
        if cfg[key] and not Path(cfg[key]).is_file():
            raise FileNotFoundError(f"{key}: file not found: {cfg[key]}")
    return SuperclassMap.from_files(cfg["trainer.superclass_map"], cfg["trainer.superclass_reference"])


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# commands


def cmd_train(cfg: dict, out: Path, args) -> int:
    tc = trainer_config(cfg, stage="pretrain")
    train, test = _datasets(cfg)
    smap = _smap(cfg)
    if args.resume:
        ckpt = _load(args.resume)
        net = build_grcnn(ckpt.config, 0)
        state = restore(TrainState.fresh(net, tc), ckpt)
    else:
        net = build_grcnn(model_config(cfg, train.num_classes), tc.seed)
        state = TrainState.fresh(net, tc)
        save_checkpoint(state, out / "initial.ckpt", extra={"train": tc.to_dict()})
        (out / "metrics.jsonl").write_text("")
    if net.config.num_classes != train.num_classes:
        raise ConfigError(f"network has {net.config.num_classes} classes, dataset {train.num_classes}")
    history = run_training(state, train, tc, test=test, smap=smap, metrics_path=out / "metrics.jsonl",
                           checkpoint_dir=out / "checkpoints")
    save_checkpoint(state, out / "final.ckpt", extra={"train": tc.to_dict()})
    summary = {"epochs_run": len(history), "final_epoch": state.epoch,
               "train": evaluate(state.net, train, smap)}
    if test is not None:
        summary["test"] = evaluate(state.net, test, smap)
    _write_json(out / "summary.json", summary)
    return EXIT_OK


def _load(path) -> Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return load_checkpoint(p)


def cmd_finetune(cfg: dict, out: Path, args) -> int:
    stage = {"v1": "finetune_v1", "v2": "finetune_v2"}[args.stage]
    tc = trainer_config(cfg, stage=stage)
    ckpt = _load(args.checkpoint)
    textures = load_overlay_pool(tc.texture_dir) if tc.texture_dir else None
    noise = load_overlay_pool(tc.noise_dir) if tc.noise_dir else None
    if stage == "finetune_v1" and not noise:
        raise ConfigError("finetune v1 needs a non-empty noise dataset (--noise)")
    if not textures:
        raise ConfigError("fine-tuning needs a non-empty texture dataset (--textures)")
    train, _ = _datasets(cfg)
    net = build_grcnn(ckpt.config, 0)
    state = restore(TrainState.fresh(net, tc), ckpt)
    # fresh optimizer and schedule for the stage
    state.opt.lr, state.opt.momentum, state.opt.weight_decay = tc.lr, tc.momentum, tc.weight_decay
    state.opt.buffers = {}
    state.epoch = 0
    state.rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 0xF1]))
    before = {k: v.copy() for k, v in net.parameters().items()}
    metrics_path = out / "metrics.jsonl"
    metrics_path.write_text("")

    def log_epoch(_state, m):
        with open(metrics_path, "a") as fh:
            fh.write(json.dumps({k: v for k, v in m.items() if k != "seconds"}, sort_keys=True) + "\n")

    finetune_stage(state, train, tc, textures=textures, noise=noise, smap=_smap(cfg), on_epoch=log_epoch)
    save_checkpoint(state, out / "final.ckpt", extra={"train": tc.to_dict()})
    after = net.parameters()
    changed = sorted(k for k in before if not np.array_equal(before[k], after[k]))
    groups = sorted({k.split(".", 1)[0] for k in changed})
    _write_json(out / "diff-report.json", {"stage": stage, "changed": changed, "changed_groups": groups,
                                           "unchanged_count": len(before) - len(changed)})
    (out / "diff-report.txt").write_text("".join(f"{k}\n" for k in changed))
    print(f"changed parameter groups: {', '.join(groups) or '(none)'}")
    return EXIT_OK


def cmd_gen_noise(cfg: dict, out: Path, args) -> int:
    src = Path(args.textures)
    if not src.is_dir():
        raise FileNotFoundError(f"texture directory not found: {src}")
    try:
        rows = generate_texture_noise_dataset(src, out, cfg["trainer.seed"])
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if not rows:
        raise ConfigError(f"no images found in {src}")
    results = verify_texture_noise_dataset(out)
    with open(out / "verification.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["name", "spectrum_rel_error", "mean_abs_error", "status"])
        for r in results:
            if r["passed"] is None:
                w.writerow([r["name"], "", "", "skipped"])
                continue
            w.writerow([r["name"], f"{r['spectrum_rel_error']:.3e}", f"{r['mean_abs_error']:.3e}",
                        "pass" if r["passed"] else "fail"])
    failed = [r["name"] for r in results if r["passed"] is False]
    print(f"{len(rows)} textures, {len(results)} verified, {len(failed)} failed")
    if failed:
        raise VerificationFailed("spectrum verification failed for: " + ", ".join(failed))
    return EXIT_OK


def cmd_eval(cfg: dict, out: Path, args) -> int:
    ckpt = _load(args.checkpoint)
    net = ckpt.build_network()
    _, test = _datasets(cfg, need_train=False)
    if test is None:
        raise ConfigError("no evaluation dataset (--data)")
    if net.config.num_classes != test.num_classes:
        raise ConfigError(f"network has {net.config.num_classes} classes, dataset {test.num_classes}")
    metrics = evaluate(net, test, _smap(cfg))
    _write_json(out / "eval.json", metrics)
    print(json.dumps({k: v for k, v in metrics.items() if k != "per_superclass_accuracy"}))
    return EXIT_OK


def cmd_rf_probe(cfg: dict, out: Path, args) -> int:
    Ts = cfg["probe.T"]
    Ts = [Ts] if isinstance(Ts, int) else Ts
    if not Ts or any(not isinstance(t, int) or isinstance(t, bool) or t < 0 for t in Ts):
        raise ConfigError(f"probe.T must be non-negative integers, got {Ts}")
    size = cfg["probe.size"]
    if size < 1:
        raise ConfigError("probe.size must be positive")
    gate = GateMode(cfg["probe.gate"])
    base = _load(args.checkpoint).config if args.checkpoint else model_config(cfg, 10)
    rows = []
    rng = np.random.default_rng(cfg["trainer.seed"])
    # weights are replaced by a positive surrogate, so only the architecture matters
    for T in Ts:
        if cfg["probe.scope"] == "block":
            ch = base.blocks[0].channels
            model = init_grcl(rng, ch, ch, T, tie_weights=base.tie_weights, a_kernel=base.a_kernel,
                              b_kernel=base.b_kernel, c_kernel=base.c_kernel)
            out_hw = (size, size)
        elif cfg["probe.scope"] == "network":
            model = build_grcnn(base.with_T(T), rng)
            out_hw = None
        else:
            raise ConfigError(f"probe.scope must be block or network, got {cfg['probe.scope']!r}")
        if out_hw is None:
            out_hw = _last_feature_hw(model, size)
        res = receptive_field_probe(model, (size, size), (out_hw[0] // 2, out_hw[1] // 2), mode=gate)
        rows.append({"source": cfg["probe.scope"], "T": T, "support_h": res.extent[0], "support_w": res.extent[1],
                     "radius": res.radius})
    k = base.a_kernel
    ctrl = receptive_field_probe(np.ones((1, 1, k, k)), (size, size), (size // 2, size // 2))
    rows.append({"source": "single_conv", "T": "", "support_h": ctrl.extent[0], "support_w": ctrl.extent[1],
                 "radius": ctrl.radius})
    with open(out / "rf-probe.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["source", "T", "support_h", "support_w", "radius"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"{r['source']:>12} T={r['T']!s:>2} support {r['support_h']}x{r['support_w']} radius {r['radius']}")
    return EXIT_OK


def _last_feature_hw(net, size):
    feat, _ = network_forward(net, np.zeros((1, net.config.in_channels, size, size)), "eval", upto=len(net.blocks))
    return feat.shape[2:]


def cmd_grad_check(cfg: dict, out: Path, args) -> int:
    scope = cfg["grad_check.scope"]
    scopes = list(SUITES) if scope == "all" else [scope]
    if any(s not in SUITES for s in scopes):
        raise ConfigError(f"grad_check.scope must be one of {sorted(SUITES)} or all, got {scope!r}")
    n = cfg["grad_check.seeds"]
    if n < 1:
        raise ConfigError("grad_check.seeds must be >= 1")
    seeds = [cfg["trainer.seed"] + i for i in range(n)]
    lines, ok = [], True
    for s in scopes:
        report = run_grad_check(s, seeds)
        lines += report.lines()
        ok &= report.passed
    text = "\n".join(lines) + "\n"
    (out / "grad-check-report.txt").write_text(text)
    print(text, end="")
    if not ok:
        raise VerificationFailed("gradient check tolerance breached")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "finetune": cmd_finetune,
    "gen-noise": cmd_gen_noise,
    "eval": cmd_eval,
    "rf-probe": cmd_rf_probe,
    "grad-check": cmd_grad_check,
}


# --------------------------------------------------------------------------
# argument parsing


def _int_list(text: str):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of dotted keys")
    common.add_argument("--seed", type=int, help="global seed (trainer.seed)")
    common.add_argument("--out", default="out", help="output directory (default: ./out)")
    common.add_argument("--preset", choices=sorted(PRESETS))
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="grcnn", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a network from scratch")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--data", help="image-folder training set (default: synthetic shapes)")
    t.add_argument("--test-data")
    t.add_argument("--cutmix", action="store_true", default=None)
    t.add_argument("--augmix", action="store_true", default=None)
    t.add_argument("--resume", help="continue from a checkpoint")

    f = sub.add_parser("finetune", parents=[common], help="blend fine-tuning of GRCL block 1 (v1) or 2 (v2)")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--stage", choices=["v1", "v2"], required=True)
    f.add_argument("--textures")
    f.add_argument("--noise")
    f.add_argument("--data")
    f.add_argument("--epochs", type=int)
    f.add_argument("--lr", type=float)
    f.add_argument("--batch-size", type=int)
    f.add_argument("--p-blend", type=float)

    g = sub.add_parser("gen-noise", parents=[common], help="phase-randomized noise from a texture folder")
    g.add_argument("--textures", required=True)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="image-folder test set (default: synthetic test split)")

    r = sub.add_parser("rf-probe", parents=[common], help="receptive-field support versus T")
    r.add_argument("--checkpoint", help="take the architecture from a checkpoint instead of the preset")
    r.add_argument("--T", type=_int_list, help="comma-separated recursion depths")
    r.add_argument("--size", type=int)
    r.add_argument("--scope", choices=["block", "network"])

    c = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient suites")
    c.add_argument("--scope", choices=[*SUITES, "all"])
    c.add_argument("--seeds", type=int, help="number of seeds")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "resolved-config.json", {"command": args.command, **cfg})
        return COMMANDS[args.command](cfg, out, args)
    except (ConfigError, FileNotFoundError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (VerificationFailed, DivergenceError) as e:
        print(f"failed: {e}", file=sys.stderr)
        return EXIT_FAIL
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
