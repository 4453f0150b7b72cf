"""Command-line entry point: ``d2c <command> [options]``.

Exit codes: 0 success, 1 usage or input problem, 2 numeric failure.
Log verbosity comes from ``D2C_LOG_LEVEL`` (default INFO).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import config as cfgmod
from . import tokenizer as tok
from .errors import D2CError, NumericError

log = logging.getLogger("d2c")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def resolve_config(args, base: dict | None = None, overlay: dict | None = None) -> cfgmod.RunConfig:
    """Preset (or checkpoint config), then ``overlay``, the JSON file and ``--set`` overrides."""
    if base is None:
        base = (cfgmod.desk_preset() if args.preset == "desk" else cfgmod.RunConfig()).to_dict()
    if overlay:
        base = _merge(base, overlay)
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            base = _merge(base, json.load(fh))
    cfg = cfgmod.RunConfig.from_dict(base)
    for item in args.set or []:
        if "=" not in item:
            raise cfgmod.ConfigError(f"--set expects section.field=value, got {item!r}")
        key, value = item.split("=", 1)
        cfgmod.set_path(cfg, key.strip(), value.strip())
    # rebuild so __post_init__ validation sees the overridden values
    cfg = cfgmod.RunConfig.from_dict(cfg.sync().to_dict())
    cfg.validate()
    log.info("resolved config (digest %s):\n%s", cfg.digest()[:16], cfg.to_json())
    return cfg


def _check_world(cfg: cfgmod.RunConfig, other: cfgmod.RunConfig, what: str) -> None:
    if cfg.world != other.world:
        raise cfgmod.ConfigError(f"{what} was trained on a different synthetic world")


# ----------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    from .train import world_from

    cfg = resolve_config(args)
    world = world_from(cfg)
    count = args.count or cfg.train1.dataset_size
    classes, tokens, latents = tok.generate_dataset(world, count, cfg.data_seed, args.start)
    tok.write_records(args.out, world.C, world.K, world.h, world.w, world.d, classes, tokens, latents)
    print(f"wrote {count} samples to {args.out}")
    return EXIT_OK


def cmd_train_stage1(args) -> int:
    from . import train

    if args.resume:
        run = train.load_stage1(args.resume)
        run.config = resolve_config(args, base=run.config.to_dict())
    else:
        run = None
    cfg = run.config if run else resolve_config(args)
    run = train.train_stage1(cfg, run)
    train.save_stage1(args.out, run)
    world = train.world_from(cfg)
    classes, tokens, _ = tok.generate_dataset(world, args.eval_count, cfg.data_seed + 1000003)
    ce = train.stage1_eval_ce(run.model, classes, tokens)
    floor = tok.oracle_template_entropy(world)
    print(f"stage1 steps {run.state.step} held-out CE {ce:.6g} nats (floor {floor:.6g})")
    return EXIT_OK


def cmd_train_stage2(args) -> int:
    from . import train

    s1 = train.load_stage1(args.stage1, use_ema=not args.no_ema)
    if args.resume:
        run = train.load_stage2(args.resume, s1.model)
        cfg = resolve_config(args, base=run.config.to_dict())
        run.config = cfg
    else:
        run = None
        first = s1.config.to_dict()
        cfg = resolve_config(args, overlay={k: first[k] for k in ("world", "stage1", "data_seed")})
    _check_world(cfg, s1.config, "the first-stage checkpoint")
    run = train.train_stage2(cfg, s1.model, run)
    train.save_stage2(args.out, run)
    hist = run.state.history
    if hist:
        print(f"stage2 steps {run.state.step} first-epoch loss {hist[0]['loss']:.6g} "
              f"last-epoch loss {hist[-1]['loss']:.6g}")
    return EXIT_OK


def _load_models(args):
    from . import train

    s1 = train.load_stage1(args.stage1, use_ema=not args.no_ema)
    s2 = train.load_stage2(args.stage2, s1.model, use_ema=not args.no_ema)
    _check_world(s2.config, s1.config, "the second-stage checkpoint")
    return s1, s2


def _generation_config(args, s2_cfg: cfgmod.RunConfig) -> cfgmod.RunConfig:
    """Models come from the checkpoint; sampling settings from the command line."""
    return resolve_config(args, base=s2_cfg.to_dict())


def cmd_sample(args) -> int:
    from .diffusion import make_schedule
    from .pipeline import sample_many

    s1, s2 = _load_models(args)
    cfg = _generation_config(args, s2.config)
    spc = args.samples_per_class or cfg.generation.samples_per_class
    classes = np.repeat(np.arange(cfg.world.C), spc)
    schedule = make_schedule(cfg.diffusion.T, cfg.diffusion.schedule)
    tokens, latents = sample_many(s1.model, s2.stage2, s2.denoiser, schedule, classes, cfg.generation,
                                  workers=args.workers)
    w = cfg.world
    tok.write_records(args.out, w.C, w.K, w.h, w.w, w.d, classes, tokens, latents)
    print(f"wrote {len(classes)} samples to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import evaluate
    from .train import world_from

    cfg = resolve_config(args)
    world = world_from(cfg)
    data = tok.read_records(args.samples)
    if (data["C"], data["K"], data["h"], data["w"], data["d"]) != (world.C, world.K, world.h, world.w, world.d):
        raise cfgmod.ConfigError("samples file does not match the configured world")
    report = evaluate(world, data["classes"], data["latents"], None if args.no_tokens else data["tokens"])
    print(report.table())
    if args.csv:
        _write_text(args.csv, report.csv())
    return EXIT_OK


def cmd_sweep(args) -> int:
    from . import train
    from .sweep import TRAINING_AXES, sweep

    s1, s2 = _load_models(args)
    cfg = _generation_config(args, s2.config)
    if args.samples_per_class:
        cfg.generation.samples_per_class = args.samples_per_class
    grid = [v.strip() for v in args.grid.split(",") if v.strip()]
    def retrain(point):
        return train.train_stage2(point, s1.model)

    train_fn = retrain if args.axis in TRAINING_AXES else None
    result = sweep(args.axis, grid, cfg, s1.model, s2, train_fn, workers=args.workers)
    print(result.csv(), end="")
    print(json.dumps(result.summary()))
    if args.csv:
        _write_text(args.csv, result.csv())
    if args.plot_data:
        _write_text(args.plot_data, json.dumps(result.plot_data(), indent=2) + "\n")
    return EXIT_OK


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (partial sections allowed)")
    common.add_argument("--preset", choices=("desk", "default"), default="desk",
                        help="starting values before --config and --set (default: desk)")
    common.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE",
                        help="override one config field; repeatable")

    p = _Parser(prog="d2c", description="Two-stage discrete/continuous token generator on synthetic data.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset file")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=0, help="samples (default: train1.dataset_size)")
    g.add_argument("--start", type=int, default=0, help="first sample index")
    g.set_defaults(func=cmd_gen_data)

    t1 = sub.add_parser("train-stage1", parents=[common], help="train the discrete prior")
    t1.add_argument("--out", required=True)
    t1.add_argument("--resume", help="continue from this first-stage checkpoint")
    t1.add_argument("--eval-count", type=int, default=2000)
    t1.set_defaults(func=cmd_train_stage1)

    t2 = sub.add_parser("train-stage2", parents=[common], help="train the masked generator and diffusion head")
    t2.add_argument("--stage1", required=True)
    t2.add_argument("--out", required=True)
    t2.add_argument("--resume", help="continue from this second-stage checkpoint")
    t2.add_argument("--no-ema", action="store_true", help="condition on raw (not EMA) first-stage weights")
    t2.set_defaults(func=cmd_train_stage2)

    for name, func, text in (("sample", cmd_sample, "generate samples to a record file"),
                             ("sweep", cmd_sweep, "run an ablation sweep")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--stage1", required=True)
        s.add_argument("--stage2", required=True)
        s.add_argument("--no-ema", action="store_true", help="use raw weights instead of EMA shadows")
        s.add_argument("--workers", type=int, default=1, help="sampling threads (output does not depend on it)")
        s.add_argument("--samples-per-class", type=int, default=0)
        s.set_defaults(func=func)
        if name == "sample":
            s.add_argument("--out", required=True)
        else:
            s.add_argument("--axis", required=True, choices=("cfg", "temperature", "steps", "queries", "qformer_arch"))
            s.add_argument("--grid", required=True, help="comma-separated values")
            s.add_argument("--csv")
            s.add_argument("--plot-data", help="write plot data as JSON")

    e = sub.add_parser("eval", parents=[common], help="Fréchet proxy and token-match report for a samples file")
    e.add_argument("--samples", required=True)
    e.add_argument("--csv")
    e.add_argument("--no-tokens", action="store_true", help="skip the token-match column")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    level = os.environ.get("D2C_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (D2CError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
