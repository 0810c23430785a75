"""Seeded experiment runner: configs, sweeps, transition brackets, plot data.

An :class:`ExperimentConfig` names a model, an observable, and a run
budget; it round-trips losslessly through an INI-style text format with
strict (unknown-key-rejecting) schemas.  :func:`run_sweep` executes the
u-grid with replicate-level parallelism and block-structured streams, so
the records are bit-identical for any thread count;
:func:`estimate_transition` bisects a monotone proxy against a threshold
and reports a bracket (an explicitly finite-size proxy, never a critical
point); :func:`emit_plotdata` flattens records into CSV plus a metadata
sidecar.  Records serialize as JSON lines and always carry the config
hash and seed that reproduce them.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .engine import ResourceBudgetError
from .lattice import Box
from .percolation import connected_components, sites_connected
from .torus import wilson_interval
from .truncated import MixedModelConfig, TubeSpec

# ---------------------------------------------------------------------------
# configuration


_MODEL_KEYS = {
    "interlacement": {"id", "u_grid", "window_radius", "convention",
                      "truncation", "d"},
    "segment": {"id", "u_grid", "L", "window_radius", "d"},
    "homogeneous": {"id", "u_grid", "L", "window_radius", "gamma", "d"},
    "torus": {"id", "u_grid", "N", "d", "lazy"},
    "mixed": {"id", "u_grid", "window_radius"},
}

_OBSERVABLE_KEYS = {
    "theta_R": {"id", "R"},
    "crossing": {"id", "R"},
    "two_point": {"id", "x", "y"},
    "vacant_fraction": {"id"},
    "giant_fraction": {"id"},
}

_RUN_KEYS = {"replicates", "seed", "block", "out", "max_cells"}


def _parse_u_grid(text: str) -> tuple:
    text = text.strip()
    if not text:
        return ()
    return tuple(float(tok) for tok in text.split(","))


def _parse_point(text: str) -> tuple:
    return tuple(int(tok) for tok in text.strip().split(","))


@dataclass(frozen=True)
class ExperimentConfig:
    """One (model, observable, run-budget) experiment description.

    ``model`` and ``observable`` are the string-keyed parameter dicts of
    the corresponding config sections (values already typed); ``mixed``
    and ``tube`` carry the optional structured sections.  The config
    hash of the canonical text form stamps every result record.
    """

    model: dict
    observable: dict
    replicates: int
    seed: int
    block: int = 256
    out: Optional[str] = None
    max_cells: float = 2e9
    mixed: Optional[MixedModelConfig] = None
    tube: Optional[TubeSpec] = None

    def __post_init__(self):
        mid = self.model.get("id")
        if mid not in _MODEL_KEYS:
            raise ValueError(f"unknown model id {mid!r}")
        oid = self.observable.get("id")
        if oid not in _OBSERVABLE_KEYS:
            raise ValueError(f"unknown observable id {oid!r}")
        if mid == "mixed" and self.mixed is None:
            raise ValueError("model 'mixed' needs a [mixed] section")
        if self.replicates < 0:
            raise ValueError("replicates must be >= 0")
        if self.block < 1:
            raise ValueError("block must be >= 1")

    # -- text format ---------------------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp["model"] = {k: self._fmt(k, v) for k, v in self.model.items()}
        cp["observable"] = {k: self._fmt(k, v)
                            for k, v in self.observable.items()}
        run = {"replicates": str(self.replicates), "seed": str(self.seed),
               "block": str(self.block), "max_cells": repr(self.max_cells)}
        if self.out is not None:
            run["out"] = self.out
        cp["run"] = run
        if self.mixed is not None:
            cp["mixed"] = self.mixed.to_config_dict()
        if self.tube is not None:
            cp["tube"] = self.tube.to_config_dict()
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @staticmethod
    def _fmt(key: str, value) -> str:
        if key == "u_grid":
            return ",".join(repr(float(v)) for v in value)
        if key in ("x", "y"):
            return ",".join(str(int(c)) for c in value)
        if isinstance(value, bool):
            return "true" if value else "false"
        if isinstance(value, float):
            return repr(value)
        return str(value)

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp.read_string(text)
        known_sections = {"model", "observable", "run", "mixed", "tube"}
        unknown = set(cp.sections()) - known_sections
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        for need in ("model", "observable", "run"):
            if need not in cp:
                raise ValueError(f"missing [{need}] section")

        raw_m = dict(cp["model"])
        mid = raw_m.get("id")
        if mid not in _MODEL_KEYS:
            raise ValueError(f"unknown model id {mid!r}")
        bad = set(raw_m) - _MODEL_KEYS[mid]
        if bad:
            raise ValueError(f"unknown [model] keys for {mid}: {sorted(bad)}")
        model = cls._type_model(mid, raw_m)

        raw_o = dict(cp["observable"])
        oid = raw_o.get("id")
        if oid not in _OBSERVABLE_KEYS:
            raise ValueError(f"unknown observable id {oid!r}")
        bad = set(raw_o) - _OBSERVABLE_KEYS[oid]
        if bad:
            raise ValueError(
                f"unknown [observable] keys for {oid}: {sorted(bad)}")
        observable = cls._type_observable(oid, raw_o)

        raw_r = dict(cp["run"])
        bad = set(raw_r) - _RUN_KEYS
        if bad:
            raise ValueError(f"unknown [run] keys: {sorted(bad)}")
        kwargs = {"model": model, "observable": observable,
                  "replicates": int(raw_r["replicates"]),
                  "seed": int(raw_r["seed"])}
        if "block" in raw_r:
            kwargs["block"] = int(raw_r["block"])
        if "out" in raw_r:
            kwargs["out"] = raw_r["out"]
        if "max_cells" in raw_r:
            kwargs["max_cells"] = float(raw_r["max_cells"])
        if "mixed" in cp:
            kwargs["mixed"] = MixedModelConfig.from_config_dict(
                dict(cp["mixed"]))
        if "tube" in cp:
            kwargs["tube"] = TubeSpec.from_config_dict(dict(cp["tube"]))
        return cls(**kwargs)

    @staticmethod
    def _type_model(mid: str, raw: dict) -> dict:
        out: dict = {"id": mid, "u_grid": _parse_u_grid(raw.get("u_grid",
                                                                ""))}
        ints = {"window_radius", "L", "N", "d", "truncation"}
        floats = {"gamma"}
        for k, v in raw.items():
            if k in ("id", "u_grid"):
                continue
            if k in ints:
                out[k] = int(v)
            elif k in floats:
                out[k] = float(v)
            elif k == "lazy":
                out[k] = v.strip().lower() in ("1", "true", "yes")
            elif k == "convention":
                out[k] = v.strip()
            else:  # pragma: no cover - schema already filtered
                raise ValueError(f"unhandled model key {k}")
        return out

    @staticmethod
    def _type_observable(oid: str, raw: dict) -> dict:
        out: dict = {"id": oid}
        for k, v in raw.items():
            if k == "id":
                continue
            if k == "R":
                out[k] = int(v)
            elif k in ("x", "y"):
                out[k] = _parse_point(v)
            else:  # pragma: no cover - schema already filtered
                raise ValueError(f"unhandled observable key {k}")
        return out

    # -- identity -------------------------------------------------------------

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_ini())

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_ini(fh.read())


# ---------------------------------------------------------------------------
# result records


@dataclass
class ResultRecord:
    """One estimated observable value with everything needed to redo it."""

    observable: str
    model: str
    params: dict
    estimate: float
    ci_lo: float
    ci_hi: float
    replicates: int
    seed: int
    config_hash: str
    wall_time: float = 0.0
    bias_notes: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json_dict(cls, data: dict) -> "ResultRecord":
        return cls(**data)


def write_records(records, path: str) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json_dict(), sort_keys=True) + "\n")


def read_records(path: str) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(ResultRecord.from_json_dict(json.loads(line)))
    return out


# ---------------------------------------------------------------------------
# samplers (vacant-mask factories with replicate offsets)


def _window_box(radius: int, d: int) -> Box:
    return Box.ball(radius, d)


def make_sampler(config: ExperimentConfig) -> Callable:
    """Vacant-mask sampler ``f(u, n, seed, rep_offset) -> (n, *shape) bool``
    for the config's model, plus ``f.cells`` (sites per replicate),
    ``f.torus`` (connectivity wrap flag), and ``f.bias_notes``."""
    m = config.model
    mid = m["id"]
    d = m.get("d", 3)
    if mid == "torus":
        from .percolation import make_torus_sampler
        f = make_torus_sampler(m["N"], d=d, lazy=m.get("lazy", False))
        f.cells = m["N"] ** d
        f.torus = True
        return f
    if mid == "interlacement":
        from .percolation import make_interlacement_sampler
        box = _window_box(m.get("window_radius", 6), d)
        f = make_interlacement_sampler(box, m.get("convention",
                                                  "paper_lazy"),
                                       truncation=m.get("truncation"))
    elif mid == "segment":
        from .percolation import make_segment_sampler
        box = _window_box(m.get("window_radius", 6), d)
        f = make_segment_sampler(m["L"], box)
    elif mid == "homogeneous":
        from .truncated import sample_homogeneous_fields
        box = _window_box(m.get("window_radius", 4), d)
        shape = box.shape
        gamma = m.get("gamma", 20.0)
        length = m["L"]

        def f(u, n, seed, rep_offset=0):
            sample = sample_homogeneous_fields(
                u, length, box.sites(), seed, gamma=gamma, replicates=n,
                rep_offset=rep_offset)
            f.bias_notes = [f"{k}={v}" for k, v in
                            sorted(sample.bias_notes.items())]
            return ~sample.fields.reshape((n,) + shape)

        f.bias_notes = []
        f.window = box
    else:  # mixed
        from .truncated import sample_mixed_fields
        box = _window_box(m.get("window_radius", 4), config.mixed.d)
        shape = box.shape
        base = config.mixed

        def f(u, n, seed, rep_offset=0):
            cfg_u = dataclasses.replace(base, u=u)
            sample = sample_mixed_fields(cfg_u, box.sites(), seed,
                                         replicates=n,
                                         rep_offset=rep_offset)
            f.bias_notes = [f"{k}={v}" for k, v in
                            sorted(sample.bias_notes.items())]
            return ~sample.fields.reshape((n,) + shape)

        f.bias_notes = []
        f.window = box
    f.cells = int(np.prod(f.window.shape)) if hasattr(f, "window") \
        else int(np.prod(box.shape))
    f.torus = False
    return f


# ---------------------------------------------------------------------------
# per-block observable statistics


def _shell_sites(shape, center, radius) -> np.ndarray:
    grid = np.indices(shape).reshape(len(shape), -1).T
    dist = np.abs(grid - np.asarray(center)).max(axis=1)
    return grid[dist == radius]


def _ball_sites_grid(shape, center, radius) -> np.ndarray:
    grid = np.indices(shape).reshape(len(shape), -1).T
    dist = np.abs(grid - np.asarray(center)).max(axis=1)
    return grid[dist <= radius]


def _block_stats(masks: np.ndarray, observable: dict, torus: bool) -> tuple:
    """(count-or-sum, sum-of-squares or None) of the observable over one
    block of vacant masks.  Counting observables return integer counts
    and None; continuous ones return (sum, sum of squares)."""
    oid = observable["id"]
    shape = masks.shape[1:]
    center = tuple(s // 2 for s in shape)
    if oid == "theta_R":
        shell = _shell_sites(shape, center, observable["R"])
        if shell.size == 0:
            raise ValueError("radius R exceeds the window")
        hits = 0
        for m in masks:
            if not m[center]:
                continue
            lab = connected_components(m, torus=torus)
            if sites_connected(lab, [center], shell):
                hits += 1
        return float(hits), None
    if oid == "crossing":
        R = observable["R"]
        inner = _ball_sites_grid(shape, center, R)
        outer = _shell_sites(shape, center, 2 * R)
        if outer.size == 0:
            raise ValueError("window too small for the 2R sphere")
        hits = 0
        for m in masks:
            lab = connected_components(m, torus=torus)
            if sites_connected(lab, inner, outer):
                hits += 1
        return float(hits), None
    if oid == "two_point":
        x = np.asarray(observable["x"]) + np.asarray(center)
        y = np.asarray(observable["y"]) + np.asarray(center)
        for p in (x, y):
            if not ((p >= 0).all() and (p < np.asarray(shape)).all()):
                raise ValueError("two_point sites fall outside the window")
        hits = 0
        for m in masks:
            if not (m[tuple(x)] and m[tuple(y)]):
                continue
            lab = connected_components(m, torus=torus)
            if sites_connected(lab, [tuple(x)], [tuple(y)]):
                hits += 1
        return float(hits), None
    if oid == "vacant_fraction":
        fr = masks.reshape(len(masks), -1).mean(axis=1)
        return float(fr.sum()), float((fr * fr).sum())
    if oid == "giant_fraction":
        total = float(np.prod(shape))
        fr = np.empty(len(masks))
        for i, m in enumerate(masks):
            lab = connected_components(m, torus=torus)
            fr[i] = (lab.sizes.max() / total) if lab.sizes.size else 0.0
        return float(fr.sum()), float((fr * fr).sum())
    raise ValueError(f"unknown observable {oid!r}")   # pragma: no cover


_COUNTING = {"theta_R", "crossing", "two_point"}


def _summarize(observable_id: str, total: float, sumsq: Optional[float],
               n: int) -> tuple:
    """(estimate, ci_lo, ci_hi) from merged block statistics."""
    if observable_id in _COUNTING:
        lo, hi = wilson_interval(int(round(total)), n)
        return total / n, lo, hi
    mean = total / n
    var = max(0.0, sumsq / n - mean * mean)
    half = 2.576 * math.sqrt(var / n)
    return mean, max(0.0, mean - half), min(1.0, mean + half)


# ---------------------------------------------------------------------------
# sweep runner


def _cell_blocks(replicates: int, block: int):
    offset = 0
    while offset < replicates:
        yield offset, min(block, replicates - offset)
        offset += block


def run_sweep(config: ExperimentConfig, threads: int = 1) -> list:
    """Execute the config's u-grid and return one record per grid point.

    Replicates are split into fixed ``config.block``-sized blocks keyed
    by replicate offset; blocks run on a thread pool but are reduced in
    fixed order, so any thread count yields bit-identical records
    (wall time aside).  The resource budget is enforced before any block
    runs.
    """
    u_grid = config.model["u_grid"]
    if len(u_grid) == 0:
        return []
    sampler = make_sampler(config)
    total_cells = float(sampler.cells) * config.replicates * len(u_grid)
    if total_cells > config.max_cells:
        raise ResourceBudgetError(
            f"sweep would touch {total_cells:.3g} site-replicates, over "
            f"the configured budget {config.max_cells:.3g}")
    chash = config.config_hash()
    records = []
    for u in u_grid:
        t0 = time.perf_counter()
        tasks = list(_cell_blocks(config.replicates, config.block))

        def run_block(task, _u=u):
            offset, n = task
            masks = sampler(_u, n, config.seed, rep_offset=offset)
            return _block_stats(masks, config.observable, sampler.torus)

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(run_block, tasks))
        else:
            parts = [run_block(t) for t in tasks]
        total = 0.0
        sumsq: Optional[float] = None
        for tot, sq in parts:            # fixed (block-index) order
            total += tot
            if sq is not None:
                sumsq = (sumsq or 0.0) + sq
        est, lo, hi = _summarize(config.observable["id"], total, sumsq,
                                 config.replicates)
        params = {k: v for k, v in config.observable.items() if k != "id"}
        params["u"] = u
        params.update({k: v for k, v in config.model.items()
                       if k not in ("id", "u_grid")})
        records.append(ResultRecord(
            observable=config.observable["id"], model=config.model["id"],
            params=params, estimate=est, ci_lo=lo, ci_hi=hi,
            replicates=config.replicates, seed=config.seed,
            config_hash=chash, wall_time=time.perf_counter() - t0,
            bias_notes=list(getattr(sampler, "bias_notes", []))))
    return records


# ---------------------------------------------------------------------------
# transition bracketing


@dataclass
class TransitionResult:
    """Bracket for the level where a monotone proxy crosses a threshold.

    A finite-size proxy estimate only — never the critical level itself.
    """

    status: str                  # "bracketed" | "inconclusive" | "degenerate"
    u_low: float
    u_high: float
    threshold: float
    proxy: str
    evaluations: list
    note: str = ("finite-size proxy bracket, not the critical level")


def estimate_transition(config: ExperimentConfig, threshold: float,
                        width_target: float = 0.5,
                        max_rounds: int = 12,
                        max_replicates: Optional[int] = None,
                        threads: int = 1) -> TransitionResult:
    """Bisect the u-axis until the proxy's CI separates from ``threshold``.

    The proxy is the config's observable (``giant_fraction`` or
    ``crossing``), monotone nonincreasing in u.  The initial bracket is
    the config's u-grid extremes.  A midpoint whose CI straddles the
    threshold gets its replicates doubled (extending the same replicate
    streams) up to ``max_replicates``; if it still straddles, the search
    stops with status "inconclusive".  A grid without two distinct
    points, or one whose ends do not sit on opposite sides, returns
    status "degenerate" at the offending edge.
    """
    proxy = config.observable["id"]
    if proxy not in ("giant_fraction", "crossing"):
        raise ValueError("transition proxy must be giant_fraction or "
                         "crossing")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    if max_replicates is None:
        max_replicates = 8 * config.replicates
    u_grid = config.model["u_grid"]
    if len(u_grid) == 0:
        raise ValueError("transition needs a nonempty u grid")
    sampler = make_sampler(config)
    evaluations: list = []

    def evaluate(u: float) -> tuple:
        """(estimate, lo, hi) at u, growing replicates until the CI
        clears the threshold or the budget runs out."""
        n_done, total, sumsq = 0, 0.0, None
        n_next = config.replicates
        while True:
            for offset, n in _cell_blocks(n_next, config.block):
                masks = sampler(u, n, config.seed,
                                rep_offset=n_done + offset)
                tot, sq = _block_stats(masks, config.observable,
                                       sampler.torus)
                total += tot
                if sq is not None:
                    sumsq = (sumsq or 0.0) + sq
            n_done += n_next
            est, lo, hi = _summarize(proxy, total, sumsq, n_done)
            if lo > threshold or hi < threshold or n_done >= max_replicates:
                evaluations.append({"u": u, "estimate": est, "ci_lo": lo,
                                    "ci_hi": hi, "replicates": n_done})
                return est, lo, hi
            n_next = min(n_done, max_replicates - n_done)

    lo_u, hi_u = min(u_grid), max(u_grid)
    if lo_u == hi_u:
        evaluate(lo_u)
        return TransitionResult("degenerate", lo_u, hi_u, threshold, proxy,
                                evaluations,
                                note="single-point grid; no bracket")
    _, llo, lhi = evaluate(lo_u)
    _, hlo, hhi = evaluate(hi_u)
    if not llo > threshold:
        return TransitionResult("degenerate", lo_u, lo_u, threshold, proxy,
                                evaluations,
                                note="low edge not above the threshold")
    if not hhi < threshold:
        return TransitionResult("degenerate", hi_u, hi_u, threshold, proxy,
                                evaluations,
                                note="high edge not below the threshold")
    for _ in range(max_rounds):
        if hi_u - lo_u <= width_target:
            break
        mid = 0.5 * (lo_u + hi_u)
        _, mlo, mhi = evaluate(mid)
        if mlo > threshold:
            lo_u = mid
        elif mhi < threshold:
            hi_u = mid
        else:
            return TransitionResult("inconclusive", lo_u, hi_u, threshold,
                                    proxy, evaluations,
                                    note="CI straddles the threshold at "
                                         f"u={mid} after max replicates")
    return TransitionResult("bracketed", lo_u, hi_u, threshold, proxy,
                            evaluations)


# ---------------------------------------------------------------------------
# plot data emission


_PLOT_KINDS = {
    "curve": ("u", lambda r: r.params.get("u")),
    "convergence": ("scale",
                    lambda r: r.params.get("L", r.params.get("N"))),
    "loglog": ("distance",
               lambda r: float(np.linalg.norm(
                   np.asarray(r.params["x"], dtype=float)
                   - np.asarray(r.params["y"], dtype=float)))
               if "x" in r.params and "y" in r.params else None),
}


def emit_plotdata(records, kind: str, path: str) -> str:
    """Write records as a CSV curve plus a JSON metadata sidecar.

    Kinds: ``curve`` (observable vs u), ``convergence`` (vs L or N),
    ``loglog`` (vs site distance).  All records must share one
    observable and model; rows are sorted by the x column.  Returns the
    sidecar path.
    """
    records = list(records)
    if not records:
        raise ValueError("no records to plot")
    if kind not in _PLOT_KINDS:
        raise ValueError(f"unknown plot kind {kind!r}")
    obs = {r.observable for r in records}
    models = {r.model for r in records}
    if len(obs) > 1 or len(models) > 1:
        raise ValueError(
            f"mixed records in one plot: observables {sorted(obs)}, "
            f"models {sorted(models)}")
    xname, xfun = _PLOT_KINDS[kind]
    rows = []
    for r in records:
        x = xfun(r)
        if x is None:
            raise ValueError(
                f"record lacks the {xname!r} coordinate for kind {kind!r}")
        rows.append((float(x), r.estimate, r.ci_lo, r.ci_hi))
    rows.sort(key=lambda t: t[0])
    with open(path, "w") as fh:
        fh.write(f"{xname},estimate,ci_lo,ci_hi\n")
        for x, est, lo, hi in rows:
            fh.write(f"{x!r},{est!r},{lo!r},{hi!r}\n")
    meta = {"kind": kind, "observable": obs.pop(), "model": models.pop(),
            "n_records": len(records),
            "config_hashes": sorted({r.config_hash for r in records}),
            "seeds": sorted({r.seed for r in records}),
            "bias_notes": sorted({note for r in records
                                  for note in r.bias_notes})}
    side = path + ".meta.json"
    with open(side, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return side
