"""Command line interface.

    gcsim run <spec> [--report-dir DIR]
    gcsim sweep <spec> --axis PATH --values v1,v2,... [--report-dir DIR]
    gcsim validate <spec>
    gcsim list-params [--category C]
    gcsim serve <spec> [--realtime] [--host H] [--port P] [--speed X]

Exit codes: 0 run completed, 2 invalid configuration, 3 run stalled.
"""

from __future__ import annotations

import argparse
import sys

from .core import GcsimError
from .harness import ConfigInvalidError, Experiment, ExperimentSpec, sweep
from .manifest import all_descriptors
from .params import ControlCategory


def cmd_run(args) -> int:
    spec = ExperimentSpec.from_file(args.spec)
    if args.report_dir:
        spec.report_dir = args.report_dir
    report = Experiment(spec).run()
    from .report import human_table
    sys.stdout.write(human_table(report))
    if spec.report_dir:
        sys.stdout.write(f"report written to {spec.report_dir}\n")
    return 0 if report.status == "COMPLETED" else 3


def cmd_sweep(args) -> int:
    with open(args.spec, encoding="utf-8") as fh:
        base_text = fh.read()
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    results = sweep(base_text, args.axis, values)
    from .report import emit_sweep, sweep_table
    sys.stdout.write(sweep_table(args.axis, results))
    if args.report_dir:
        paths = emit_sweep(args.axis, results, args.report_dir)
        sys.stdout.write(f"sweep artifacts written to {args.report_dir} "
                         f"({len(paths)} files)\n")
    return 0


def cmd_validate(args) -> int:
    spec = ExperimentSpec.from_file(args.spec)
    Experiment(spec)  # builds the cluster, catching config errors
    sys.stdout.write("OK\n")
    return 0


def cmd_list_params(args) -> int:
    category = None
    if args.category:
        try:
            category = ControlCategory[args.category]
        except KeyError:
            sys.stderr.write(f"unknown category {args.category!r}; one of "
                             f"{[c.name for c in ControlCategory]}\n")
            return 2
    for desc in all_descriptors():
        if category is not None and desc.category != category:
            continue
        status = "" if desc.supported else "  [UNSUPPORTED]"
        sys.stdout.write(
            f"{desc.path:55} {desc.category.name:25} "
            f"{desc.mutability.value:18} default={desc.default!r}"
            f"{status}\n")
    return 0


def cmd_serve(args) -> int:
    from .control_api import serve_experiment
    spec = ExperimentSpec.from_file(args.spec)
    exp = Experiment(spec)
    tokens = {k: v for k, v in spec.api.items() if k.endswith("_token")}
    bridge, server = serve_experiment(
        exp, tokens=tokens, host=args.host, port=args.port,
        realtime=args.realtime, speed=args.speed)
    host, port = server.server_address[:2]
    sys.stdout.write(f"control api on http://{host}:{port} "
                     f"({'realtime' if args.realtime else 'fast'} mode, "
                     f"duration {spec.duration}s simulated)\n")
    try:
        bridge.join()
    except KeyboardInterrupt:
        bridge.stop_requested = True
        bridge.join(2.0)
    server.shutdown()
    if bridge.report is not None:
        from .report import human_table
        sys.stdout.write(human_table(bridge.report))
        return 0 if bridge.report.status == "COMPLETED" else 3
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gcsim",
        description="group communication / replication simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment")
    p.add_argument("spec")
    p.add_argument("--report-dir")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("sweep", help="run one experiment per axis value")
    p.add_argument("spec")
    p.add_argument("--axis", required=True)
    p.add_argument("--values", required=True)
    p.add_argument("--report-dir")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("validate", help="check a spec file")
    p.add_argument("spec")
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("list-params", help="print the parameter registry")
    p.add_argument("--category")
    p.set_defaults(fn=cmd_list_params)

    p = sub.add_parser("serve", help="run with the control API attached")
    p.add_argument("spec")
    p.add_argument("--realtime", action="store_true")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8600)
    p.add_argument("--speed", type=float, default=1.0)
    p.set_defaults(fn=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigInvalidError as exc:
        sys.stderr.write(f"CONFIG_INVALID: {exc}\n")
        return 2
    except GcsimError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
