"""Command-line entry point: gen-data, train, eval, analyze, attn, gradcheck.

Exit codes: 0 success, 2 configuration/usage error, 3 runtime error,
4 gradient check failure.  Errors are reported on stderr as a single line
``error class=<Name> message=<text>``.  ``FUSEDRIVE_LOG`` sets log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .config import ConfigError, ExperimentConfig, config_hash, dump_config, load_config, tiny_experiment

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 2, 3, 4
PRESETS = {"desk": lambda: ExperimentConfig().validate(), "tiny": tiny_experiment}
MANIFEST = "run_manifest.json"


class UsageError(ConfigError):
    pass


def resolve_config(arg: str | None) -> ExperimentConfig:
    if arg is None:
        return PRESETS["desk"]()
    if arg in PRESETS:
        return PRESETS[arg]()
    if not Path(arg).is_file():
        raise UsageError(f"config {arg!r} is neither a preset ({', '.join(PRESETS)}) nor a file")
    return load_config(arg)


def resolve_routes(arg: str) -> list:
    from .sim import SHIPPED, load_routes, shipped_routes
    if arg in SHIPPED:
        return shipped_routes(arg)
    if not Path(arg).is_file():
        raise UsageError(f"routes {arg!r} is neither a shipped set ({', '.join(SHIPPED)}) nor a file")
    return load_routes(arg)


def write_manifest(out_dir: Path, command: str, cfg_hash: str, seed: int, outputs: list, started: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    m = {"command": command, "argv": sys.argv[1:], "config_hash": cfg_hash, "seed": seed,
         "version": __version__, "started": started,
         "finished": datetime.now(timezone.utc).isoformat(timespec="seconds"),
         "outputs": [str(p) for p in outputs]}
    path = out_dir / MANIFEST
    path.write_text(json.dumps(m, indent=1))
    return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(a) -> int:
    from .sim.dataset import collect_dataset
    started = _now()
    cfg = resolve_config(a.config)
    routes = resolve_routes(a.routes)
    out = Path(a.out)
    m = collect_dataset(routes, out, sample_hz=a.sample_hz, cfg=cfg.sim, seed=a.seed,
                        n_waypoints=cfg.model.n_waypoints, cfg_hash=config_hash(cfg))
    write_manifest(out, "gen-data", config_hash(cfg), a.seed,
                   [out / "manifest.json", out / "labels.jsonl", out / "images.bin"], started)
    print(f"wrote {m['n_samples']} samples from {len(routes)} routes to {out}")
    return EXIT_OK


def cmd_train(a) -> int:
    import dataclasses
    from .sim.dataset import Dataset
    from .train import train
    started = _now()
    cfg = resolve_config(a.config)
    if a.seed is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=a.seed))
    if not Path(a.data, "manifest.json").is_file():
        raise UsageError(f"no dataset at {a.data}")
    ds = Dataset.open(a.data)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(dump_config(cfg))
    res = train(cfg, ds, out, resume=a.resume,
                progress=lambda r: logging.getLogger("fusedrive.train").debug(json.dumps(r)))
    write_manifest(out, "train", config_hash(cfg), cfg.train.seed,
                   [res.checkpoint, res.loss_log, out / "config.json"], started)
    last = res.history[-1] if res.history else {}
    print(f"trained {len(res.history)} steps in {res.seconds:.1f}s; final total loss {last.get('total', float('nan')):.4f}")
    return EXIT_OK


def _policy(a):
    from .agent import ModelPolicy
    from .sim.evaluate import ExpertPolicy, RandomPolicy, ZeroPolicy
    from .train import model_from_checkpoint
    import dataclasses
    if a.ckpt == "expert":
        return ExpertPolicy(), resolve_config(a.config), "expert"
    if a.ckpt == "zero":
        return ZeroPolicy(), resolve_config(a.config), "zero"
    if a.ckpt == "random":
        return RandomPolicy(a.seed), resolve_config(a.config), "random"
    if not Path(a.ckpt).is_file():
        raise UsageError(f"checkpoint not found: {a.ckpt}")
    model, cfg = model_from_checkpoint(a.ckpt)
    control = cfg.control if a.mode is None else dataclasses.replace(cfg.control, mode=a.mode)
    return ModelPolicy(model, control, cfg.sim.dt), cfg, config_hash(cfg)


def cmd_eval(a) -> int:
    from .sim.evaluate import evaluate
    started = _now()
    policy, cfg, tag = _policy(a)
    routes = resolve_routes(a.routes)
    rep = evaluate(policy, routes, cfg.sim, seed=a.seed)
    report = Path(a.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    data = {"policy": a.ckpt, **rep.to_dict()}
    report.write_text(json.dumps(data, indent=1))
    write_manifest(report.parent, "eval", tag, a.seed, [report], started)
    print("\n".join(rep.lines()))
    return EXIT_OK


def cmd_analyze(a) -> int:
    from .cost_model import analyze
    cfg = resolve_config(a.config)
    rep = analyze(cfg.model)
    print(rep.to_text(grouped=not a.rows))
    if a.json:
        path = Path(a.json)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(rep.to_json())
        write_manifest(path.parent, "analyze", config_hash(cfg), cfg.train.seed, [path], _now())
    return EXIT_OK


def cmd_attn(a) -> int:
    from .attention_dump import attention_dump
    from .sim.dataset import Dataset
    from .train import model_from_checkpoint
    started = _now()
    if not Path(a.ckpt).is_file():
        raise UsageError(f"checkpoint not found: {a.ckpt}")
    model, cfg = model_from_checkpoint(a.ckpt)
    ds = Dataset.open(a.data)
    if not 0 <= a.sample < len(ds):
        raise UsageError(f"sample {a.sample} out of range [0, {len(ds)})")
    inputs, _ = ds.batch([a.sample])
    dump = attention_dump(model, inputs)
    dump["sample"] = a.sample
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "attention.json"
    path.write_text(json.dumps(dump))
    write_manifest(out, "attn", config_hash(cfg), cfg.train.seed, [path], started)
    print(f"attention {'x'.join(map(str, dump['shape']))} blocks {dump['blocks']} -> {path}")
    return EXIT_OK


def cmd_gradcheck(a) -> int:
    from .gradcheck import run
    rep = run(a.scope, a.seed)
    print("\n".join(rep.lines()))
    return EXIT_OK if rep.ok else EXIT_GRADCHECK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fusedrive", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="collect expert demonstrations")
    g.add_argument("--config")
    g.add_argument("--routes", default="train")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--sample-hz", type=float, default=None)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="imitation-learn a policy from a dataset")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="closed-loop evaluation; --ckpt also accepts expert, zero, random")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--routes", default="heldout")
    e.add_argument("--report", required=True)
    e.add_argument("--config", help="simulator settings for the reference policies")
    e.add_argument("--mode", choices=("dynamic", "static_tcp"), default=None)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(fn=cmd_eval)

    n = sub.add_parser("analyze", help="analytic parameter and MAC counts")
    n.add_argument("--config")
    n.add_argument("--json", help="also write the per-layer report as JSON")
    n.add_argument("--rows", action="store_true", help="print every layer instead of grouped totals")
    n.set_defaults(fn=cmd_analyze)

    at = sub.add_parser("attn", help="dump decoder attention maps for one sample")
    at.add_argument("--ckpt", required=True)
    at.add_argument("--data", required=True)
    at.add_argument("--sample", type=int, default=0)
    at.add_argument("--out", required=True)
    at.set_defaults(fn=cmd_attn)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    gc.add_argument("--scope", choices=("primitive", "block", "model"), default="model")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(fn=cmd_gradcheck)
    return p


def _error(exc: BaseException) -> str:
    msg = " ".join(str(exc).split())
    return f"error class={type(exc).__name__} message={msg}"


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("FUSEDRIVE_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        code = args.fn(args)
    except ConfigError as exc:
        print(_error(exc), file=sys.stderr)
        return EXIT_CONFIG
    except (KeyboardInterrupt, SystemExit):
        raise
    except Exception as exc:
        logging.getLogger("fusedrive").debug("failure", exc_info=True)
        print(_error(exc), file=sys.stderr)
        return EXIT_RUNTIME
    logging.getLogger("fusedrive").info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
