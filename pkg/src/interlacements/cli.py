"""Command-line front end: capacity/green queries, sampling, sweeps.

Every command reads structured-text configs (see ``ExperimentConfig``),
honors explicit seeds, and emits JSON or JSON-lines records so runs are
auditable artifacts.  Exit codes: 0 on success (all criteria passing,
for ``selftest``), 1 on a failing selftest, 2 on usage or config errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from typing import Optional

import numpy as np


def _parse_sites(text: str) -> np.ndarray:
    pts = []
    for part in text.split(";"):
        part = part.strip()
        if part:
            pts.append([int(c) for c in part.split(",")])
    if not pts:
        raise ValueError("no sites given")
    return np.asarray(pts, dtype=np.int64)


def _load_config(path: str):
    from .harness import ExperimentConfig

    with open(path) as fh:
        return ExperimentConfig.from_ini(fh.read())


def _apply_overrides(config, args):
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        updates["out"] = args.out
    return dataclasses.replace(config, **updates) if updates else config


def _emit(obj, out: Optional[str]) -> None:
    text = json.dumps(obj, sort_keys=True)
    print(text)
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")


def _sample_window(config) -> np.ndarray:
    from .lattice import Box

    m = config.model
    if m["id"] == "torus":
        N, d = m["N"], m.get("d", 3)
        return Box((0,) * d, (N - 1,) * d).sites()
    return Box.ball(m["window_radius"], m.get("d", 3)).sites()


# ---------------------------------------------------------------------------
# subcommands


def _cmd_capacity(args) -> int:
    from .lattice import Box
    from .potential import equilibrium_measure

    if (args.radius is None) == (args.sites is None):
        raise ValueError("give exactly one of --radius or --sites")
    sites = (Box.ball(args.radius, args.d).sites() if args.radius is not None
             else _parse_sites(args.sites))
    eq = equilibrium_measure(sites, args.convention)
    _emit({"capacity": eq.capacity, "convention": args.convention,
           "sites": int(len(sites)), "condition": eq.condition}, args.out)
    return 0


def _cmd_green(args) -> int:
    from .engine import WalkKernel
    from .potential import green_value

    offset = tuple(int(c) for c in args.offset.split(","))
    kernel = WalkKernel(d=len(offset), lazy=(args.convention == "paper_lazy"))
    val = green_value(kernel, offset, method=args.method)
    _emit({"offset": list(offset), "value": val,
           "convention": args.convention, "method": args.method}, args.out)
    return 0


def _cmd_sample(args) -> int:
    from .cloud import OccupancyField
    from .harness import make_sampler

    config = _apply_overrides(_load_config(args.config), args)
    u = args.u if args.u is not None else config.model["u_grid"][0]
    sampler = make_sampler(config)
    mask = sampler(u, 1, config.seed)[0]          # vacant mask, (*shape)
    sites = _sample_window(config)
    field = OccupancyField(window=sites, occupied=~mask.reshape(-1),
                           d=sites.shape[1])
    dump_path = None
    if args.dump_field:
        base = args.out or "sample.json"
        dump_path = base + ".field"
        with open(dump_path, "wb") as fh:
            fh.write(field.to_bytes())
    _emit({"model": config.model["id"], "u": u, "seed": config.seed,
           "sites": int(len(sites)), "occupied": int(field.occupied.sum()),
           "vacant_fraction": float(mask.mean()), "field_dump": dump_path,
           "bias_notes": list(getattr(sampler, "bias_notes", ()))}, args.out)
    return 0


def _cmd_observe(args) -> int:
    from .harness import run_sweep

    config = _apply_overrides(_load_config(args.config), args)
    if args.u is not None:
        model = dict(config.model)
        model["u_grid"] = (float(args.u),)
        config = dataclasses.replace(config, model=model)
    elif len(config.model["u_grid"]) != 1:
        raise ValueError("observe runs a single level: pass --u or use a "
                         "one-point u_grid (sweep handles grids)")
    records = run_sweep(config, threads=args.threads)
    _emit(records[0].to_json_dict(), args.out)
    return 0


def _cmd_sweep(args) -> int:
    from .harness import run_sweep, write_records

    config = _apply_overrides(_load_config(args.config), args)
    records = run_sweep(config, threads=args.threads)
    for rec in records:
        print(json.dumps(rec.to_json_dict(), sort_keys=True))
    if config.out:
        write_records(records, config.out)
        print(f"# wrote {len(records)} records to {config.out}",
              file=sys.stderr)
    return 0


def _cmd_transition(args) -> int:
    from .harness import estimate_transition

    config = _apply_overrides(_load_config(args.config), args)
    result = estimate_transition(config, args.threshold,
                                 width_target=args.width,
                                 threads=args.threads)
    _emit(dataclasses.asdict(result), args.out)
    return 0


def _cmd_plotdata(args) -> int:
    from .harness import emit_plotdata, read_records

    records = read_records(args.records)
    sidecar = emit_plotdata(records, args.kind, args.out)
    print(f"# wrote {args.out} (+ {sidecar})", file=sys.stderr)
    return 0


def _cmd_selftest(args) -> int:
    from .acceptance import format_result, run_criteria

    indices = None
    if args.criteria:
        indices = [int(tok) for tok in args.criteria.split(",") if tok.strip()]
    lines = []
    failed = 0
    for res in run_criteria(indices):
        line = format_result(res)
        print(line, flush=True)
        lines.append(line)
        failed += 0 if res.passed else 1
    summary = f"{len(lines) - failed}/{len(lines)} criteria passed"
    print(summary)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("\n".join(lines + [summary]) + "\n")
    return 0 if failed == 0 else 1


# ---------------------------------------------------------------------------
# parser


def _u64(text: str) -> int:
    val = int(text, 0)
    if not 0 <= val < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in 64 bits")
    return val


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="interlace",
        description="Monte Carlo laboratory for random-walk cloud models")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("capacity", help="equilibrium capacity of a site set")
    p.add_argument("--radius", type=int, default=None,
                   help="use the centered box of this radius")
    p.add_argument("--sites", default=None,
                   help="explicit sites, 'x,y,z;x,y,z;...'")
    p.add_argument("--convention", default="paper_lazy",
                   choices=("paper_lazy", "simple_lawler"))
    p.add_argument("--d", type=int, default=3)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_capacity)

    p = sub.add_parser("green", help="Green-function value at an offset")
    p.add_argument("--offset", required=True, help="'x,y,z'")
    p.add_argument("--convention", default="paper_lazy",
                   choices=("paper_lazy", "simple_lawler"))
    p.add_argument("--method", default="quadrature",
                   choices=("quadrature", "monte_carlo"))
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_green)

    p = sub.add_parser("sample", help="draw one field of the config's model")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=_u64, default=None)
    p.add_argument("--u", type=float, default=None,
                   help="level (default: first grid point)")
    p.add_argument("--out", default=None)
    p.add_argument("--dump-field", action="store_true",
                   help="also write the binary field next to --out")
    p.set_defaults(fn=_cmd_sample)

    p = sub.add_parser("observe",
                       help="estimate the config's observable at one level")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=_u64, default=None)
    p.add_argument("--u", type=float, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_observe)

    p = sub.add_parser("sweep", help="run the config's full level grid")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=_u64, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default=None,
                   help="JSON-lines record file (overrides config)")
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("transition",
                       help="bracket where the proxy crosses a threshold")
    p.add_argument("--config", required=True)
    p.add_argument("--threshold", type=float, required=True)
    p.add_argument("--width", type=float, default=0.5,
                   help="target bracket width")
    p.add_argument("--seed", type=_u64, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_transition)

    p = sub.add_parser("plotdata", help="emit CSV plot data from records")
    p.add_argument("--records", required=True, help="JSON-lines record file")
    p.add_argument("--kind", required=True,
                   choices=("curve", "convergence", "loglog"))
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_plotdata)

    p = sub.add_parser("selftest", help="run the built-in acceptance suite")
    p.add_argument("--criteria", default=None,
                   help="comma-separated criterion numbers (default: all)")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_selftest)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
