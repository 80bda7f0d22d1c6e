"""Command-line experiment harness.

Subcommands::

    gen-data   write a synthetic house (channel files + manifest)
    train      fit a per-appliance model and save a checkpoint
    attack     perturb the evaluation windows of a house against a model
    eval       metrics for clean vs perturbed signals
    sweep      attack + eval over a range of delta or iteration counts
    transfer   craft on a source model, evaluate on target models

Every flag can also come from ``--config FILE`` holding ``flag-name = value``
lines (list-valued flags take comma-separated values).  Explicit flags win.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from meterguard import __version__
from meterguard.attack import AttackConfig, write_perturbation_dump
from meterguard.data import (
    ChannelFileRef,
    DEFAULT_APPLIANCES,
    Manifest,
    SynthConfig,
    export_csv,
    load_channel,
    load_house,
    read_kv,
    read_synth_config,
    synth_scene,
    write_channel,
    write_manifest,
)
from meterguard.errors import ConfigError, DataError, MeterGuardError
from meterguard.experiment import (
    ATTACKS,
    AttackSpec,
    evaluate,
    eval_starts,
    fit_appliance_model,
    laplace_sensitivity,
    run_attack,
)
from meterguard.metrics import format_report
from meterguard.model import TrainConfig, load_checkpoint, save_checkpoint

log = logging.getLogger("meterguard")

DEFAULT_DELTAS = (0.02, 0.05, 0.1, 0.15, 0.2)
DEFAULT_NUM_ITERS = tuple(range(1, 11))


def _conv_spec(text: str) -> tuple[tuple[int, int], ...]:
    """``"9x8,5x8"`` -> ((9, 8), (5, 8)); kernel x channels per conv layer."""
    layers = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            k, c = part.lower().split("x")
            layers.append((int(k), int(c)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad conv layer {part!r}; expected KERNELxCHANNELS") from None
    return tuple(layers)


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from None


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


# shared argument groups


def _add_attack_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("attack")
    g.add_argument("--attack", choices=ATTACKS, default="jaco_adam")
    g.add_argument("--delta", type=float, default=0.1, help="infinity-norm budget in normalized units")
    g.add_argument("--num-iters", type=int, default=5, help="Adam iterations of the Jacobian attack")
    g.add_argument("--adam-lr", type=float, default=0.1, help="step size of the Jacobian attack")
    g.add_argument("--zero-sum", action="store_true", help="billing-neutral perturbations")
    g.add_argument("--clamp-nonnegative", action="store_true", help="floor perturbed readings at 0 W")
    g.add_argument("--pgd-steps", type=int, default=10)
    g.add_argument("--pgd-step-size", type=float, default=None, help="default: delta / 4")
    g.add_argument("--epsilon-privacy", type=float, default=0.01, help="Laplace baseline budget")
    g.add_argument("--sensitivity", type=float, default=None, help="Laplace sensitivity (normalized units)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--window-len", type=int, default=None, help="must match the checkpoint if given")
    g.add_argument("--stride", type=int, default=None, help="attack windows are disjoint; must equal w")
    g.add_argument("--split", choices=("train", "test", "all"), default="test")


def _attack_spec(args, house, model) -> AttackSpec:
    if args.window_len is not None and args.window_len != model.window_len:
        raise ConfigError(f"--window-len {args.window_len} does not match checkpoint window {model.window_len}")
    if args.stride is not None and args.stride != model.window_len:
        raise ConfigError("attack windows must not overlap: --stride must equal the window length")
    # delta is passed to run_attack separately so that 0 (no perturbation) is allowed
    cfg = AttackConfig(
        delta=args.delta if args.delta > 0 else 1.0,
        num_iters=args.num_iters,
        lr=args.adam_lr,
        zero_sum=args.zero_sum,
        seed=args.seed,
        clamp_nonnegative=args.clamp_nonnegative,
    )
    sensitivity = args.sensitivity
    if args.attack == "laplace" and sensitivity is None:
        sensitivity = laplace_sensitivity(house)
    return AttackSpec(args.attack, cfg, args.pgd_steps, args.pgd_step_size, args.epsilon_privacy, sensitivity)


def _condition(spec: AttackSpec, delta: float) -> str:
    return f"{spec.name}@{delta!r}"


# subcommands


def cmd_gen_data(args) -> int:
    cfg = read_synth_config(args.synth_config) if args.synth_config else SynthConfig(DEFAULT_APPLIANCES)
    overrides = {k: getattr(args, k) for k in ("seed", "length") if getattr(args, k) is not None}
    cfg = replace(cfg, **overrides)
    scene = synth_scene(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_channel(scene.aggregate, out / "aggregate.dat")
    refs = []
    for label, series in scene.appliances.items():
        path = out / f"{label}.dat"
        write_channel(series, path)
        refs.append(ChannelFileRef(str(path), label, cfg.sample_period))
    manifest = Manifest(
        ChannelFileRef(str(out / "aggregate.dat"), "aggregate", cfg.sample_period),
        tuple(refs),
        cfg.sample_period,
        args.train_fraction,
        args.name,
    )
    write_manifest(manifest, out / "manifest.txt")
    print(f"wrote {len(scene)} samples x {scene.appliance_count} appliances to {out}")
    return 0


def cmd_train(args) -> int:
    house = load_house(args.manifest, [args.appliance])
    cfg = TrainConfig(args.batch_size, args.epochs, args.lr, args.optimizer, args.seed)

    def report(epoch, loss):
        print(f"epoch {epoch}: loss {loss:.6g}", flush=True)

    model = fit_appliance_model(
        house, args.appliance, args.window_len, args.stride, cfg, args.conv, args.model_seed, on_epoch=report
    )
    save_checkpoint(model, args.out)
    print(f"saved {args.out} (sha256 params {model.checksum()[:16]})")
    return 0


def cmd_attack(args) -> int:
    model = load_checkpoint(args.checkpoint)
    house = load_house(args.manifest, [model.appliance_id])
    spec = _attack_spec(args, house, model)
    starts = eval_starts(house, model.window_len, args.split)
    agg = house.scene.aggregate.power
    truth = house.scene.appliances[model.appliance_id].power
    result = run_attack(model, agg, truth, starts, spec, args.delta)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ts = house.scene.aggregate.timestamps
    period = house.scene.sample_period
    app = model.appliance_id
    write_channel(house.scene.aggregate, out / "clean_aggregate.dat")
    write_channel(house.scene.aggregate.with_power(result.perturbed), out / f"perturbed_{app}.dat")
    write_perturbation_dump(out / f"perturbations_{app}.csv", result.perturbations)
    with open(out / f"billing_{app}.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("start,linf,drift,drift_after_clamp\n")
        for r in result.reports:
            after = "" if r.drift_after_clamp is None else repr(r.drift_after_clamp)
            fh.write(f"{r.start},{r.linf!r},{r.drift!r},{after}\n")
    meta = [
        ("attack", spec.name),
        ("delta", repr(float(args.delta))),
        ("delta_watts", repr(float(args.delta) * model.norm_std)),
        ("zero_sum", str(spec.zero_sum).lower()),
        ("num_iters", str(args.num_iters)),
        ("seed", str(args.seed)),
        ("condition", _condition(spec, args.delta)),
    ]
    (out / "attack.cfg").write_text("".join(f"{k} = {v}\n" for k, v in meta), encoding="utf-8")
    for r in result.reports:
        print(f"window {r.start} ({ts[r.start]}): linf {r.linf:.6g} billing drift {r.drift:.3e}")
    print(
        f"{len(result.reports)} windows, delta {args.delta} "
        f"(~{args.delta * model.norm_std:.2f} W at {period} s), output in {out}"
    )
    return 0


def _aligned_signal(path, house) -> np.ndarray:
    series = load_channel(ChannelFileRef(str(path), "perturbed", house.scene.sample_period))
    if not series.same_grid(house.scene.aggregate):
        raise DataError(f"{path} is not on the manifest's aligned grid")
    return series.power


def cmd_eval(args) -> int:
    models = [load_checkpoint(p) for p in args.checkpoint]
    house = load_house(args.manifest, [m.appliance_id for m in models])
    pdir = Path(args.perturbed_dir)
    condition = args.condition
    if condition is None:
        meta = dict(read_kv(pdir / "attack.cfg")) if (pdir / "attack.cfg").is_file() else {}
        condition = meta.get("condition", "perturbed")
    rows = []
    for model in models:
        starts = eval_starts(house, model.window_len, args.split)
        truth = house.scene.appliances[model.appliance_id].power
        perturbed = _aligned_signal(pdir / f"perturbed_{model.appliance_id}.dat", house)
        rows.append(evaluate(model, house.scene.aggregate.power, truth, starts, "clean"))
        rows.append(evaluate(model, perturbed, truth, starts, condition))
    export_csv(rows, args.out)
    print(format_report(rows))
    return 0


def cmd_sweep(args) -> int:
    model = load_checkpoint(args.checkpoint)
    house = load_house(args.manifest, [model.appliance_id])
    starts = eval_starts(house, model.window_len, args.split)
    agg = house.scene.aggregate.power
    truth = house.scene.appliances[model.appliance_id].power
    values = args.values
    if values is None:
        values = list(DEFAULT_DELTAS if args.axis == "delta" else DEFAULT_NUM_ITERS)
    label = args.axis
    rows = [evaluate(model, agg, truth, starts, f"{label}=0")]
    for v in values:
        if v == 0:
            continue
        if args.axis == "delta":
            spec = _attack_spec(args, house, model)
            result = run_attack(model, agg, truth, starts, spec, float(v))
        else:
            if v != int(v) or v < 1:
                raise ConfigError(f"num_iters values must be positive integers, got {v}")
            args.num_iters = int(v)
            spec = _attack_spec(args, house, model)
            result = run_attack(model, agg, truth, starts, spec, args.delta)
        tag = f"{label}={int(v) if args.axis == 'num_iters' else v!r}"
        rows.append(evaluate(model, result.perturbed, truth, starts, tag))
        print(f"{tag}: mae {rows[-1].mae:.4f}", flush=True)
    export_csv(rows, args.out)
    print(format_report(rows, clean_tag=f"{label}=0"))
    return 0


def cmd_transfer(args) -> int:
    source = load_checkpoint(args.source)
    targets = [(Path(p).stem, load_checkpoint(p)) for p in args.target]
    for name, t in targets:
        if t.appliance_id != source.appliance_id or t.window_len != source.window_len:
            raise ConfigError(f"target {name} must model {source.appliance_id!r} with w={source.window_len}")
    house = load_house(args.manifest, [source.appliance_id])
    spec = _attack_spec(args, house, source)
    starts = eval_starts(house, source.window_len, args.split)
    agg = house.scene.aggregate.power
    truth = house.scene.appliances[source.appliance_id].power
    result = run_attack(source, agg, truth, starts, spec, args.delta)
    rows = []
    for name, target in targets:
        rows.append(evaluate(target, agg, truth, starts, f"{name}:clean"))
        rows.append(evaluate(target, result.perturbed, truth, starts, f"{name}:perturbed"))
    export_csv(rows, args.out)
    for clean, pert in zip(rows[::2], rows[1::2]):
        print(f"{pert.condition_tag}: mae {clean.mae:.4f} -> {pert.mae:.4f}, corr {clean.corr} -> {pert.corr}")
    return 0


# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meterguard", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key-value file mirroring the flags")
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "write a synthetic house")
    p.add_argument("--synth-config", help="synthetic house description (key-value)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--length", type=int, default=None)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--name", default="synthetic")
    p.add_argument("--out", required=True, help="output directory")

    p = add("train", cmd_train, "train a per-appliance model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--appliance", required=True)
    p.add_argument("--window-len", type=int, default=64)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    p.add_argument("--seed", type=int, default=0, help="shuffling seed (and init seed unless --model-seed)")
    p.add_argument("--model-seed", type=int, default=None)
    p.add_argument("--conv", type=_conv_spec, default=((9, 8), (5, 8)), help="e.g. 9x8,5x8")
    p.add_argument("--out", required=True, help="checkpoint path")

    p = add("attack", cmd_attack, "perturb a house's evaluation windows")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    _add_attack_args(p)
    p.add_argument("--out", required=True, help="output directory")

    p = add("eval", cmd_eval, "metrics for clean vs perturbed signals")
    p.add_argument("--checkpoint", action="append", required=True, help="repeat per appliance")
    p.add_argument("--manifest", required=True)
    p.add_argument("--perturbed-dir", required=True, help="output directory of 'attack'")
    p.add_argument("--condition", default=None, help="condition tag for perturbed rows")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--out", required=True, help="metrics CSV path")

    p = add("sweep", cmd_sweep, "attack + eval across delta or num_iters")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--axis", choices=("delta", "num_iters"), default="delta")
    p.add_argument("--values", type=_float_list, default=None, help="comma-separated axis values")
    _add_attack_args(p)
    p.add_argument("--out", required=True, help="metrics CSV path")

    p = add("transfer", cmd_transfer, "craft on a source model, evaluate on targets")
    p.add_argument("--source", required=True)
    p.add_argument("--target", action="append", required=True, help="repeat per target checkpoint")
    p.add_argument("--manifest", required=True)
    _add_attack_args(p)
    p.add_argument("--out", required=True, help="metrics CSV path")
    return parser


def _config_path(argv: list[str]) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    config = _config_path(argv)
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    command = next((tok for tok in argv if tok in sub.choices), None)
    if config is None or command is None:
        return parser.parse_args(argv)
    subparser = sub.choices[command]
    actions = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, value in read_kv(config):
        dest = key.replace("-", "_")
        action = actions.get(dest)
        if action is None or dest in ("help", "config"):
            raise ConfigError(f"{config}: unknown setting {key!r} for '{command}'")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[dest] = _bool(value)
        elif isinstance(action, argparse._AppendAction):
            defaults[dest] = [v.strip() for v in value.split(",") if v.strip()]
        elif action.type is not None:
            try:
                defaults[dest] = action.type(value)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise ConfigError(f"{config}: bad value for {key!r}: {exc}") from None
        else:
            defaults[dest] = value
        if action.choices is not None and defaults[dest] not in action.choices:
            raise ConfigError(f"{config}: {key} must be one of {list(action.choices)}")
        action.required = False
    subparser.set_defaults(**defaults)
    args = parser.parse_args(argv)
    # append actions extend their default; explicit flags replace the config list
    for dest, value in defaults.items():
        if isinstance(actions[dest], argparse._AppendAction):
            explicit = getattr(args, dest)[len(value):]
            if explicit:
                setattr(args, dest, explicit)
    return args


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return args.func(args)
    except MeterGuardError as exc:
        print(f"meterguard: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"meterguard: error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
