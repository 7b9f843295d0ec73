"""Command-line entry points.

    successor-lab run <config.json> [--seeds 0..19] [--out DIR] [--parallel N]
    successor-lab env dump <spec>
    successor-lab oracle <env> --what M|V|spectrum

Environment and config arguments accept either inline JSON or a path to a
JSON file. ``env dump`` prints the constructed process as its JSON
definition; ``oracle`` prints exact quantities as CSV rows.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import envs
from .experiments import ExperimentConfig, run_experiment
from .flows import spectral_error
from .mrp import FiniteMrp, mdp_to_dict, mrp_to_dict, successor_exact, value_exact

__all__ = ["main"]


def _load_json_arg(arg: str) -> dict:
    text = arg
    if not arg.lstrip().startswith("{"):
        with open(arg) as f:
            text = f.read()
    return json.loads(text)


def _parse_seeds(spec: str) -> tuple[int, ...]:
    """Parse '0..19' (inclusive range) or a comma list like '0,3,7'."""
    if ".." in spec:
        lo, hi = spec.split("..")
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(x) for x in spec.split(",") if x != "")


def _cmd_run(args) -> int:
    config = ExperimentConfig.from_dict(_load_json_arg(args.config))
    if args.seeds:
        config = ExperimentConfig.from_dict({**config.to_dict(), "seeds": _parse_seeds(args.seeds)})
    if args.out:
        config = ExperimentConfig.from_dict({**config.to_dict(), "out_dir": args.out})
    manifest = run_experiment(config, parallel=args.parallel)
    print(json.dumps(manifest.to_dict(), indent=2, sort_keys=True))
    return 1 if manifest.failures else 0


def _cmd_env_dump(args) -> int:
    env = envs.build_env(_load_json_arg(args.spec))
    d = mrp_to_dict(env) if isinstance(env, FiniteMrp) else mdp_to_dict(env)
    print(json.dumps(d))
    return 0


def _cmd_oracle(args) -> int:
    env = envs.build_env(_load_json_arg(args.env))
    if not isinstance(env, FiniteMrp):
        print("oracle quantities are defined for MRP environments", file=sys.stderr)
        return 2
    if args.what == "M":
        M = successor_exact(env)
        print(",".join(f"s{j}" for j in range(env.num_states)))
        for row in M:
            print(",".join(repr(float(x)) for x in row))
    elif args.what == "V":
        print("s,value")
        for s, v in enumerate(value_exact(env)):
            print(f"{s},{float(v)!r}")
    elif args.what == "spectrum":
        dec = spectral_error("forward", env, np.zeros((env.num_states, env.num_states)))
        print("index,real,imag")
        order = np.argsort(dec.eigenvalues.real)
        for i, idx in enumerate(order):
            lam = dec.eigenvalues[idx]
            print(f"{i},{float(lam.real)!r},{float(lam.imag)!r}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="successor-lab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config", help="config JSON (inline or path)")
    p_run.add_argument("--seeds", default=None, help="e.g. 0..19 or 0,3,7")
    p_run.add_argument("--out", default=None, help="output directory override")
    p_run.add_argument("--parallel", type=int, default=1, help="concurrent seeds")
    p_run.set_defaults(func=_cmd_run)

    p_env = sub.add_parser("env", help="environment helpers")
    env_sub = p_env.add_subparsers(dest="env_command", required=True)
    p_dump = env_sub.add_parser("dump", help="print the process JSON for a spec")
    p_dump.add_argument("spec", help="environment spec JSON (inline or path)")
    p_dump.set_defaults(func=_cmd_env_dump)

    p_oracle = sub.add_parser("oracle", help="print exact quantities as CSV")
    p_oracle.add_argument("env", help="environment spec JSON (inline or path)")
    p_oracle.add_argument("--what", choices=["M", "V", "spectrum"], required=True)
    p_oracle.set_defaults(func=_cmd_oracle)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
