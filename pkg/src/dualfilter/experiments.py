"""Experiment harness: dataset simulation, scenario orchestration, CSV output.

Four benchmark scenarios compare the inference procedures at desk scale:

* ``cir_predictive``: one-step predictive approximation quality for the
  CIR model (grid-L1 against the exact predictive), starting from a
  filtering mixture whose last Poisson observation equals 4;
* ``cir_filtering``: filtering error along a simulated CIR dataset for
  the pure-death/birth-death dual particle filters and the bootstrap
  baseline;
* ``wf_predictive``: one-step predictive approximation quality for a
  4-type Wright-Fisher model starting from a filtering mixture whose last
  multinomial observation equals (4, 0, 9, 2);
* ``wf_filtering``: filtering error for a 3-type WF model with 20
  categorical observations per time.

Every cell (replicate x method x particle count) derives its RNG stream
from ``(seed, scenario, cell_index, replicate)`` through a SeedSequence,
so results are byte-identical across re-runs at any thread count; rows are
flushed in cell order after all cells complete.
"""

from __future__ import annotations

import csv
import json
import logging
import sys
import time as time_mod
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import __version__
from .cir import CIRModel, CIRParams
from .errors import ConfigError
from .filtering import (FilterConfig, ParticleCloud, error_metrics, grid_l1,
                        metric_edges, run_filter)
from .mixtures import (ObservationRecord, dual_particle_propagate,
                       mixture_moments, propagate, sample_mixture)
from .wf import WFModel, WFParams

__all__ = [
    "ExperimentSpec",
    "PRESETS",
    "CSV_HEADER",
    "build_spec",
    "simulate_dataset",
    "run_scenario",
]

logger = logging.getLogger(__name__)

CSV_HEADER = ("scenario", "method", "dual", "N", "replicate",
              "time_index", "metric", "value")

#: map from method labels used in presets/CSV to (filter method, dual kind)
METHOD_TABLE = {
    "exact": ("exact", ""),
    "pd": ("dual_particle", "pure_death"),
    "bd": ("dual_particle", "bd"),
    "moran": ("dual_particle", "moran"),
    "wf_chain": ("dual_particle", "wf_chain"),
    "wf_diffusion": ("dual_particle", "wf_diffusion"),
    "bootstrap": ("bootstrap", ""),
}

#: pruning threshold of the reference filter in filtering scenarios; the
#: induced mean error is orders of magnitude below the particle errors
REFERENCE_PRUNE_EPS = 1e-10
#: typed-kernel tail truncation used only by the WF reference filter
REFERENCE_KERNEL_TAIL = 1e-14


@dataclass(frozen=True)
class ExperimentSpec:
    """Fully resolved description of one scenario run."""

    scenario: str
    flavor: str                 # "predictive" | "filtering"
    model: str                  # "cir" | "wf"
    params: tuple               # (delta, gamma, sigma, tau) or WF alpha vector
    n_times: int
    delta_t: float
    batch_size: int
    methods: tuple
    particle_counts: tuple
    replicates: int
    seed: int
    horizon: float | None = None
    forced_last: tuple | None = None
    resampling: str = "systematic"

    def __post_init__(self):
        if self.flavor not in ("predictive", "filtering"):
            raise ConfigError(f"unknown flavor {self.flavor!r}")
        if self.model not in ("cir", "wf"):
            raise ConfigError(f"unknown model {self.model!r}")
        for label in self.methods:
            if label not in METHOD_TABLE:
                raise ConfigError(f"unknown method label {label!r}")
        if min(self.particle_counts, default=1) < 1 or self.replicates < 1:
            raise ConfigError("particle counts and replicates must be positive")
        if self.flavor == "predictive" and self.horizon is None:
            raise ConfigError("predictive scenarios need a horizon")

    def build_model(self, kernel_tail_eps: float = 0.0):
        if self.model == "cir":
            return CIRModel(CIRParams(*self.params))
        return WFModel(WFParams(tuple(self.params)), kernel_tail_eps)


PRESETS: dict = {
    "cir_predictive": dict(
        # 30 history observations reach the filter's equilibrium support,
        # history long enough for the filter support to equilibrate
        flavor="predictive", model="cir", params=(11.0, 1.1, 1.0, 1.0),
        n_times=30, delta_t=0.1, batch_size=1, horizon=0.05,
        forced_last=(4,), methods=("exact", "pd", "bd", "bootstrap"),
        particle_counts=(50, 100, 500, 1000, 1500), replicates=20,
        full=dict(replicates=50, n_times=200)),
    "cir_filtering": dict(
        flavor="filtering", model="cir", params=(11.0, 1.1, 1.0, 1.0),
        n_times=50, delta_t=0.1, batch_size=1,
        methods=("pd", "bd", "bootstrap"),
        particle_counts=(50, 200, 800), replicates=20,
        full=dict(n_times=200, replicates=50,
                  particle_counts=(50, 100, 500, 1000, 1500))),
    "wf_predictive": dict(
        flavor="predictive", model="wf", params=(3.0, 3.0, 3.0, 3.0),
        n_times=2, delta_t=0.1, batch_size=15, horizon=0.1,
        forced_last=(4, 0, 9, 2),
        methods=("exact", "pd", "moran", "wf_chain", "wf_diffusion", "bootstrap"),
        particle_counts=(50, 100, 500), replicates=20,
        full=dict(particle_counts=(50, 100, 500, 1000, 1500), replicates=100)),
    "wf_filtering": dict(
        flavor="filtering", model="wf", params=(1.1, 1.1, 1.1),
        n_times=10, delta_t=1.0, batch_size=20,
        methods=("pd", "moran", "wf_chain", "wf_diffusion", "bootstrap"),
        particle_counts=(50, 200, 800), replicates=20,
        full=dict(replicates=100)),
}

_SPEC_FIELDS = ("scenario", "flavor", "model", "params", "n_times", "delta_t",
                "batch_size", "methods", "particle_counts", "replicates",
                "seed", "horizon", "forced_last", "resampling")


def build_spec(scenario: str, config: dict | None = None, *, seed: int = 1234,
               particles=None, replicates=None, full: bool = False) -> ExperimentSpec:
    """Resolve a preset plus config-file and CLI overrides into a spec."""
    if scenario not in PRESETS:
        raise ConfigError(f"unknown scenario {scenario!r}; "
                          f"choose one of {sorted(PRESETS)}")
    base = dict(PRESETS[scenario])
    full_overrides = base.pop("full", {})
    if full:
        base.update(full_overrides)
    base["scenario"] = scenario
    base["seed"] = seed
    for key, value in (config or {}).items():
        if key not in _SPEC_FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        base[key] = tuple(value) if isinstance(value, list) else value
    if particles is not None:
        base["particle_counts"] = tuple(int(v) for v in particles)
    if replicates is not None:
        base["replicates"] = int(replicates)
    for key in ("params", "methods", "particle_counts", "forced_last"):
        if base.get(key) is not None:
            base[key] = tuple(base[key])
    try:
        return ExperimentSpec(**base)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _scenario_id(name: str) -> int:
    return zlib.crc32(name.encode())


def _derive_rng(seed: int, scenario: str, *path) -> np.random.Generator:
    entropy = [seed, _scenario_id(scenario)] + [int(v) for v in path]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _derive_int_seed(seed: int, scenario: str, *path) -> int:
    entropy = [seed, _scenario_id(scenario)] + [int(v) for v in path]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def simulate_dataset(spec: ExperimentSpec, rng: np.random.Generator):
    """Simulate a (signal path, observation list) pair for a spec.

    The signal starts from the reversible law and steps through the exact
    transition sampler; emissions are Poisson batches (CIR) or multinomial
    count vectors (WF).  ``forced_last`` overwrites the final observation
    values after simulation, leaving the RNG stream untouched.
    """
    model = spec.build_model()
    records: list[ObservationRecord] = []
    if spec.n_times == 0:
        k = 1 if spec.model == "cir" else model.signal_dim
        return np.zeros((0, k)), records
    x = model.sample_prior(rng, 1)[0]
    path = []
    for i in range(spec.n_times):
        if i > 0:
            x = model.signal_sample_many(np.atleast_1d(x) if spec.model == "cir"
                                         else x[None, :], spec.delta_t, rng)[0]
        path.append(np.atleast_1d(x).astype(float))
        values = model.sample_emission(float(x) if spec.model == "cir" else x,
                                       spec.batch_size, rng)
        records.append(ObservationRecord(time=i * spec.delta_t, values=values))
    if spec.forced_last is not None and records:
        last = records[-1]
        records[-1] = ObservationRecord(time=last.time, values=spec.forced_last)
    return np.array(path), records


# ---------------------------------------------------------------------------
# Per-replicate contexts and per-cell work
# ---------------------------------------------------------------------------

def _predictive_context(spec: ExperimentSpec, rep: int) -> dict:
    model = spec.build_model()
    rng = _derive_rng(spec.seed, spec.scenario, 0xDA7A, rep)
    _, records = simulate_dataset(spec, rng)
    cfg = FilterConfig(model=spec.model, method="exact", delta_t=spec.delta_t)
    trace = run_filter(records, cfg, model)
    start = trace.filtering[-1]
    ref_pred = propagate(start, model.pd_kernel, model.theta_flow, spec.horizon)
    edges = metric_edges(ref_pred)
    ref_mean, ref_sd = mixture_moments(ref_pred)
    return dict(model=model, start=start, ref_pred=ref_pred, edges=edges,
                ref_mean=ref_mean, ref_sd=ref_sd)


def _filtering_context(spec: ExperimentSpec, rep: int) -> dict:
    tail = REFERENCE_KERNEL_TAIL if spec.model == "wf" else 0.0
    ref_model = spec.build_model(kernel_tail_eps=tail)
    rng = _derive_rng(spec.seed, spec.scenario, 0xDA7A, rep)
    signal, records = simulate_dataset(spec, rng)
    ref_cfg = FilterConfig(model=spec.model, method="pruned",
                           delta_t=spec.delta_t, prune_eps=REFERENCE_PRUNE_EPS)
    ref_trace = run_filter(records, ref_cfg, ref_model)
    return dict(model=spec.build_model(), records=records, signal=signal,
                ref_trace=ref_trace)


def _predictive_cell(spec: ExperimentSpec, ctx: dict, cell_idx: int,
                     rep: int, label: str, n: int) -> list[tuple]:
    model = ctx["model"]
    method, dual = METHOD_TABLE[label]
    rng = np.random.default_rng(np.random.SeedSequence(
        [spec.seed, _scenario_id(spec.scenario), cell_idx, rep]))
    if method == "exact":
        approx = ctx["ref_pred"]
    elif method == "dual_particle":
        approx = dual_particle_propagate(
            ctx["start"], model.dual_sampler(dual), n, spec.horizon, rng,
            select=spec.resampling, theta_evolve=model.theta_evolve_for(dual))
    else:
        particles = sample_mixture(ctx["start"], rng, n)
        particles = model.signal_sample_many(particles, spec.horizon, rng)
        approx = ParticleCloud(particles, np.full(n, 1.0 / n))
    l1 = grid_l1(approx, ctx["ref_pred"], ctx["edges"])
    if isinstance(approx, ParticleCloud):
        mean, sd = approx.moments()
    else:
        mean, sd = mixture_moments(approx)
    base = (spec.scenario, method, dual, n, rep, "")
    return [base + ("l1_pred", l1),
            base + ("err_mean", float(np.abs(mean - ctx["ref_mean"]).mean())),
            base + ("err_sd", float(np.abs(sd - ctx["ref_sd"]).mean()))]


def _filtering_cell(spec: ExperimentSpec, ctx: dict, cell_idx: int,
                    rep: int, label: str, n: int) -> list[tuple]:
    method, dual = METHOD_TABLE[label]
    cfg = FilterConfig(
        model=spec.model, method=method, delta_t=spec.delta_t,
        seed=_derive_int_seed(spec.seed, spec.scenario, cell_idx, rep),
        n_particles=n, dual_kind=dual or None, resampling=spec.resampling)
    trace = run_filter(ctx["records"], cfg, ctx["model"])
    metrics = error_metrics(trace, ctx["ref_trace"], signal=ctx["signal"])
    base = (spec.scenario, method, dual, n, rep, "")
    return [base + (name, value) for name, value in sorted(metrics["summary"].items())]


def run_scenario(spec: ExperimentSpec, out_dir, threads: int = 1) -> int:
    """Run every cell of a scenario and write results.csv plus manifest.json.

    Returns the CLI exit code: 0 on success, 2 if any cell failed (failures
    are recorded as ``metric="error"`` rows and the run continues).
    """
    from pathlib import Path
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    build_ctx = (_predictive_context if spec.flavor == "predictive"
                 else _filtering_context)
    contexts = []
    for rep in range(spec.replicates):
        t0 = time_mod.perf_counter()
        contexts.append(build_ctx(spec, rep))
        logger.info("%s replicate %d context ready (%.2fs)",
                    spec.scenario, rep, time_mod.perf_counter() - t0)

    cell_fn = (_predictive_cell if spec.flavor == "predictive"
               else _filtering_cell)
    cells = [(idx, rep, label, n)
             for idx, (rep, label, n) in enumerate(
                 (rep, label, n)
                 for rep in range(spec.replicates)
                 for label in spec.methods
                 for n in spec.particle_counts)]

    rows: dict[int, list[tuple]] = {}
    wall: dict[str, float] = {}
    errors: dict[str, str] = {}

    def work(cell):
        idx, rep, label, n = cell
        t0 = time_mod.perf_counter()
        try:
            result = cell_fn(spec, contexts[rep], idx, rep, label, n)
        except Exception as exc:  # noqa: BLE001 - per-cell failures are recorded
            method, dual = METHOD_TABLE[label]
            result = [(spec.scenario, method, dual, n, rep, "", "error", float("nan"))]
            errors[str(idx)] = f"{type(exc).__name__}: {exc}"
            logger.exception("cell %d (%s N=%d rep=%d) failed", idx, label, n, rep)
        wall[str(idx)] = time_mod.perf_counter() - t0
        logger.info("%s cell %d/%d method=%s N=%d rep=%d done (%.2fs)",
                    spec.scenario, idx + 1, len(cells), label, n, rep, wall[str(idx)])
        return idx, result

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for idx, result in pool.map(work, cells):
                rows[idx] = result
    else:
        for cell in cells:
            idx, result = work(cell)
            rows[idx] = result

    csv_path = out / f"{spec.scenario}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for idx in sorted(rows):
            for row in rows[idx]:
                writer.writerow([_fmt(v) for v in row])

    manifest = {
        "spec": {k: list(v) if isinstance(v, tuple) else v
                 for k, v in asdict(spec).items()},
        "version": __version__,
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "scipy": __import__("scipy").__version__,
        "reference": {"prune_eps": REFERENCE_PRUNE_EPS,
                      "kernel_tail_eps": REFERENCE_KERNEL_TAIL}
        if spec.flavor == "filtering" else {"method": "exact"},
        "seed_table": {str(idx): _derive_int_seed(spec.seed, spec.scenario, idx, rep)
                       for idx, rep, _, _ in cells},
        "wall_times_s": wall,
        "errors": errors,
    }
    with open(out / f"{spec.scenario}_manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)

    return 2 if errors else 0


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.12g}"
    return str(value)
