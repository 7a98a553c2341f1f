"""Command-line entry points.

Every command that produces a run directory writes ``resolved_config.json``
into it. Configuration precedence is flags > ``--config`` JSON file > preset.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import data, evalstats, sim
from .errors import InvalidArgument, S2Error
from .percept import Fixture, MockPerceptionServer, RemoteBackend
from .policy import VARIANTS, PolicyConfig, TrainedPolicy, fit

log = logging.getLogger("s2policy")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
PRESETS = {"desk": PolicyConfig.desk, "tiny": PolicyConfig.tiny, "full": PolicyConfig}
# flag dest -> PolicyConfig field
POLICY_FLAGS = {
    "variant": "variant",
    "epochs": "epochs",
    "lr": "lr",
    "batch_size": "batch_size",
    "seed": "seed",
    "n_infer_steps": "n_infer_steps",
    "eta": "eta",
    "K": "K",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidArgument(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise InvalidArgument(f"config file {path} must hold a JSON object")
    return cfg


def resolve_policy_config(args: argparse.Namespace) -> PolicyConfig:
    base = PRESETS[args.preset]().to_dict()
    base.update(_read_config_file(args.config))
    for dest, key in POLICY_FLAGS.items():
        value = getattr(args, dest, None)
        if value is not None:
            base[key] = value
    return PolicyConfig.from_dict(base)


def backend_factory():
    """Remote backend when S2_PERCEPTION_URL is set, otherwise the oracle."""
    url = os.environ.get("S2_PERCEPTION_URL")
    if not url:
        return None
    return lambda env: RemoteBackend(url)


# -- commands ----------------------------------------------------------------


DEMO_DEFAULTS = {"task": None, "instance": None, "n": 40, "seed": 0, "step_limit": None}


def cmd_demos(args) -> int:
    cfg = dict(DEMO_DEFAULTS)
    cfg.update({k: v for k, v in _read_config_file(args.config).items() if k in cfg})
    cfg.update({k: getattr(args, k) for k in cfg if getattr(args, k) is not None})
    if cfg["task"] not in sim.ENV_CLASSES or cfg["instance"] is None:
        raise InvalidArgument("demos needs --task and --instance (flag or config file)")
    out = Path(args.out)
    inst = sim.instance(cfg["task"], cfg["instance"])
    path = data.record_demos(cfg["task"], inst, cfg["n"], cfg["seed"], out, cfg["step_limit"])
    _write_json(out / "resolved_config.json", {"command": "demos", **cfg})
    print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_policy_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_config.json", {"command": "train", "data": str(args.data), "policy": cfg.to_dict()})
    dataset = data.load_dataset(args.data)
    policy = fit(dataset, cfg, log_path=out / "train_log.jsonl")
    print(policy.save(out))
    return EXIT_OK


def cmd_eval(args) -> int:
    policy = TrainedPolicy.load(args.policy)
    task = args.task or policy.task
    inst = sim.instance(task, args.instance)
    result = evalstats.run_rollouts(
        policy, task, inst, args.trials, args.seed_base, backend_factory(), args.prompt, args.step_limit
    )
    out = Path(args.out) if args.out else Path(args.policy) / f"eval_{task}_{args.instance}.json"
    _write_json(out, result.to_dict())
    _write_json(
        out.with_name(out.stem + ".resolved_config.json"),
        {"command": "eval", "policy": str(args.policy), "task": task, "instance": args.instance,
         "trials": args.trials, "seed_base": args.seed_base, "prompt": args.prompt, "step_limit": args.step_limit,
         "perception_url": os.environ.get("S2_PERCEPTION_URL")},
    )
    summary = {k: v for k, v in result.to_dict().items() if k != "trials"}
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve_policy_config(args)
    dataset = data.load_dataset(args.data)
    variants = args.variants or list(VARIANTS)
    for v in variants:
        if v not in VARIANTS:
            raise InvalidArgument(f"unknown variant {v!r}")
    instances = [sim.instance(dataset.task, s) for s in args.instances]
    out = Path(args.out)
    _write_json(
        out / "resolved_config.json",
        {"command": "ablate", "data": str(args.data), "variants": variants, "instances": args.instances,
         "trials": args.trials, "seed_base": args.seed_base, "policy": cfg.to_dict()},
    )
    matrix = evalstats.ablation_run(dataset, instances, variants, cfg, args.trials, args.seed_base, out)
    results = evalstats.flatten(matrix)
    evalstats.save_results(results, out / "results.json")
    paths = evalstats.emit_report(results, out)
    print(paths["txt"].read_text())
    return EXIT_OK


def cmd_report(args) -> int:
    results = []
    for p in args.results:
        p = Path(p)
        files = sorted(p.glob("*.json")) if p.is_dir() else [p]
        for f in files:
            if f.name.endswith("resolved_config.json"):
                continue
            results.extend(evalstats.load_results(f))
    paths = evalstats.emit_report(results, args.out)
    print(paths["txt"].read_text())
    return EXIT_OK


def cmd_mock_perception(args) -> int:
    if args.fixture:
        fixture = Fixture.load(args.fixture)
    else:
        inst = sim.instance(args.task, args.instance)
        env = sim.make_env(args.task, inst)
        env.reset(args.seed)
        fixture = Fixture.from_result(env.ground_truth_perception(inst.prompt))
    server = MockPerceptionServer(fixture, args.host, args.port)
    print(server.url, flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def _add_policy_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with PolicyConfig fields")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk", help="base configuration (default: desk)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-infer-steps", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--K", type=int, dest="K")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="s2policy", description="Spatial-semantic diffusion policy experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("demos", help="record expert demonstrations")
    p.add_argument("--task", choices=sorted(sim.ENV_CLASSES))
    p.add_argument("--instance")
    p.add_argument("--n", type=int, help="episodes (default 40)")
    p.add_argument("--seed", type=int, help="default 0")
    p.add_argument("--step-limit", type=int)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_demos)

    p = sub.add_parser("train", help="fit a policy variant")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_policy_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained policy")
    p.add_argument("--policy", required=True, help="run directory or checkpoint file")
    p.add_argument("--instance", required=True)
    p.add_argument("--task")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed-base", type=int, default=1000)
    p.add_argument("--prompt")
    p.add_argument("--step-limit", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate several variants")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", nargs="+")
    p.add_argument("--instances", nargs="+", required=True)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed-base", type=int, default=1000)
    _add_policy_flags(p)
    p.set_defaults(func=cmd_ablate, variant=None)

    p = sub.add_parser("report", help="tabulate and plot evaluation results")
    p.add_argument("--results", nargs="+", required=True, help="EvalResult JSON files or directories")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("mock-perception", help="serve fixture perception over HTTP")
    p.add_argument("--fixture", help="fixture .npz; default renders one from the simulator")
    p.add_argument("--task", choices=sorted(sim.ENV_CLASSES), default="wiping")
    p.add_argument("--instance", default="red")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.set_defaults(func=cmd_mock_perception)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvalidArgument as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (S2Error, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
