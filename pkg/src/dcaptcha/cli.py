"""``python -m dcaptcha <stage> --config exp.json --out runs/a``

Exit codes: 0 success, 2 config error, 3 missing artifact, 4 invariant
violation. ``DCAPTCHA_OUT`` supplies the output directory when ``--out``
is absent.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time

from .experiment import (
    STAGES,
    ConfigError,
    InvariantViolation,
    MissingArtifact,
    default_config,
    load_config,
    resolve_out,
    run_stage,
)

log = logging.getLogger("dcaptcha")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dcaptcha", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="stage", required=True)
    for stage in STAGES:
        s = sub.add_parser(stage)
        s.add_argument("--config", help="experiment JSON (defaults to the built-in desk config)")
        s.add_argument("--out", help="output directory")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--jobs", type=int, default=1, help="worker/thread cap")
    d = sub.add_parser("default-config", help="print the built-in config as JSON")
    d.add_argument("--out", help="write here instead of stdout")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.stage == "default-config":
        text = json.dumps(default_config().to_dict(), indent=2) + "\n"
        if args.out:
            open(args.out, "w").write(text)
        else:
            sys.stdout.write(text)
        return 0
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        config = load_config(args.config) if args.config else default_config()
        if args.seed is not None:
            config = dataclasses.replace(config, seed=args.seed)
        out = resolve_out(config, args.out)
        t0 = time.perf_counter()
        manifest = run_stage(args.stage, config, out, args.jobs)
        log.info("%s done in %.1f s -> %s (config %s)", args.stage, time.perf_counter() - t0,
                 out, manifest["config_hash"][:12])
        return 0
    except (ConfigError, MissingArtifact, InvariantViolation) as e:
        log.error("%s", e)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
