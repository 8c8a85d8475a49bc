"""Command-line pipeline: simulate -> summarize -> fit -> infer -> report.

Exit codes: 0 success, 2 validation error, 3 numerical failure.  Errors are
printed to stderr as a single ``error: kind=<kind> message=<text>`` line.
"""

from __future__ import annotations

import argparse
import csv
import glob
import hashlib
import json
import logging
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import read_keyvalue_file
from .draws import export_beta_pi_csv, read_draws, write_draws
from .errors import BlocrError, NumericalError, ValidationError
from .gibbs import PriorConfig, Schedule, map_estimate, run_chain
from .inference import delta_vs_A_report, permuted_correlation, sensitivity_report
from .partition import read_partition_file, write_partition_file
from .simharness import SimTruth, generate_dataset, read_sim_config, run_study
from .sumstats import (compute_summary, read_summary_file, read_timeseries, stack_summaries,
                       write_summary_file, write_timeseries_binary)

log = logging.getLogger("blocr")

MANIFEST = "manifest.json"


# -- manifest -----------------------------------------------------------------

def _file_digest(path: Path, h):
    h.update(str(path.name).encode())
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)


def input_hash(inputs: list, args: dict) -> str:
    """sha256 over every input file's bytes plus the effective arguments."""
    h = hashlib.sha256()
    for path in inputs:
        path = Path(path)
        if path.is_dir():
            for child in sorted(p for p in path.rglob("*") if p.is_file() and p.name != MANIFEST):
                _file_digest(child, h)
        elif path.is_file():
            _file_digest(path, h)
    h.update(json.dumps(args, sort_keys=True, default=str).encode())
    return h.hexdigest()


def write_manifest(out: Path, command: str, args: dict, inputs: list, outputs: list, seed=None, extra=None):
    started = args.pop("_started", None)
    rec = {
        "command": command,
        "config_hash": input_hash(inputs, args),
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": sorted(str(p) for p in outputs),
        "arguments": args,
        "versions": {"blocr": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    if extra:
        rec.update(extra)
    (out / MANIFEST).write_text(json.dumps(rec, sort_keys=True, indent=1, default=str) + "\n")


def _prepare_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise ValidationError(f"output directory {out} is not writable: {exc}") from exc
    return out


def _args_record(ns: argparse.Namespace) -> dict:
    rec = {k: v for k, v in vars(ns).items() if k not in ("func", "threads", "verbose")}
    rec["_started"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return rec


# -- covariates ---------------------------------------------------------------

def write_covariates(path: Path, ids, X: np.ndarray):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["participant_id", *(f"x{q + 1}" for q in range(X.shape[1]))])
        for pid, row in zip(ids, X):
            w.writerow([pid, *(repr(float(v)) for v in row)])


def read_covariates(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ValidationError(f"cannot read covariates {path}: {exc}") from exc
    if len(rows) < 2 or rows[0][0] != "participant_id":
        raise ValidationError(f"{path}: expected header 'participant_id,x1,...' and at least one row")
    p = len(rows[0]) - 1
    ids, X = [], []
    for k, row in enumerate(rows[1:], 2):
        if len(row) != p + 1:
            raise ValidationError(f"{path}:{k}: expected {p + 1} fields, got {len(row)}")
        try:
            X.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise ValidationError(f"{path}:{k}: {exc}") from exc
        ids.append(row[0])
    X = np.array(X)
    if not np.all(np.isfinite(X)):
        raise ValidationError(f"{path}: non-finite covariate value")
    return ids, X


def _load_summaries(directory):
    directory = Path(directory)
    files = sorted(directory.glob("*.bsum"))
    if not files:
        raise ValidationError(f"no .bsum files in {directory}")
    summaries = [read_summary_file(f) for f in files]
    ids = [f.stem for f in files]
    return ids, stack_summaries(summaries, ids), files


def _align_covariates(ids, cov_ids, X):
    lookup = {pid: k for k, pid in enumerate(cov_ids)}
    missing = [pid for pid in ids if pid not in lookup]
    if missing or len(cov_ids) != len(ids):
        raise ValidationError(
            f"covariate rows ({len(cov_ids)}) do not match summaries ({len(ids)}); "
            f"missing ids: {', '.join(missing[:5]) or 'none'}"
        )
    return X[[lookup[pid] for pid in ids]]


# -- commands -----------------------------------------------------------------

def cmd_simulate(ns) -> int:
    config = read_sim_config(ns.config)
    out = _prepare_out(ns.out)
    rec = _args_record(ns)
    ds = generate_dataset(config, keep_timeseries=ns.write_timeseries, threads=ns.threads)
    ids = list(ds.batch.ids)
    outputs = []
    sdir = out / "summaries"
    sdir.mkdir(exist_ok=True)
    for pid, summary in zip(ids, ds.summaries):
        path = sdir / f"{pid}.bsum"
        write_summary_file(path, summary)
        outputs.append(path)
    if ns.write_timeseries:
        tdir, pdir = out / "timeseries", out / "partitions"
        tdir.mkdir(exist_ok=True)
        pdir.mkdir(exist_ok=True)
        for pid, summary, Y in zip(ids, ds.summaries, ds.timeseries):
            write_timeseries_binary(tdir / f"{pid}.btsr", Y)
            write_partition_file(pdir / f"{pid}.json", summary.partition, pid, T=summary.T)
            outputs += [tdir / f"{pid}.btsr", pdir / f"{pid}.json"]
    write_covariates(out / "covariates.csv", ids, ds.X)
    (out / "truth.json").write_text(ds.truth.to_json())
    (out / "summaries.json").write_text(json.dumps(
        {"ids": ids, "J": config.J, "T": config.T, "files": [f"summaries/{pid}.bsum" for pid in ids]},
        sort_keys=True, indent=1) + "\n")
    outputs += [out / "covariates.csv", out / "truth.json", out / "summaries.json"]
    write_manifest(out, "simulate", rec, [ns.config], outputs, seed=config.seed,
                   extra={"config": config.to_mapping(), "truth_meta": ds.truth.meta})
    log.info("simulated %d participants into %s", config.n, out)
    return 0


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def cmd_summarize(ns) -> int:
    files = sorted(Path(p) for p in glob.glob(ns.timeseries))
    if not files:
        raise ValidationError(f"no time series match {ns.timeseries!r}")
    out = _prepare_out(ns.out)
    rec = _args_record(ns)
    part_path = Path(ns.partition)
    shared = None
    if part_path.is_file():
        shared = read_partition_file(part_path)[0]
    elif not part_path.is_dir():
        raise ValidationError(f"partition path {part_path} does not exist")

    def one(path: Path):
        if shared is not None:
            part = shared
        else:
            ppath = part_path / f"{path.stem}.json"
            if not ppath.exists():
                raise ValidationError(f"no partition file {ppath} for {path.name}")
            part = read_partition_file(ppath)[0]
        Y, kind = read_timeseries(path)
        center = (kind == "csv") if ns.center is None else ns.center
        try:
            summary = compute_summary(Y, part, center=center, scale=ns.scale, thin=ns.thin)
        except ValidationError as exc:
            raise ValidationError(f"{path}: {exc}") from exc
        target = out / f"{path.stem}.bsum"
        write_summary_file(target, summary)
        return target

    if ns.threads > 1:
        with ThreadPoolExecutor(ns.threads) as pool:
            outputs = list(pool.map(one, files))
    else:
        outputs = [one(f) for f in files]
    write_manifest(out, "summarize", rec, [*files, part_path], outputs)
    log.info("wrote %d summaries to %s", len(outputs), out)
    return 0


def _write_map(path: Path, snap, draws):
    rec = {
        "iteration": snap.iteration, "logpost": snap.logpost, "p": draws.p, "J": draws.J,
        "ids": list(draws.ids), "eta": snap.eta.tolist(), "lam": snap.lam.tolist(),
        "beta": snap.coeffs.flat.tolist(), "pi": [int(v) for v in snap.pi],
    }
    path.write_text(json.dumps(rec, sort_keys=True, indent=1) + "\n")


def cmd_fit(ns) -> int:
    ids, batch, files = _load_summaries(ns.summaries)
    cov_ids, X = read_covariates(ns.covariates)
    X = _align_covariates(ids, cov_ids, X)
    priors = PriorConfig.from_mapping(read_keyvalue_file(ns.priors)) if ns.priors else PriorConfig()
    schedule = Schedule(ns.iters, ns.burnin, ns.stride, ns.seed)
    out = _prepare_out(ns.out)
    rec = _args_record(ns)
    trace = np.empty(schedule.iters)
    every = max(1, schedule.iters // 20)

    def progress(t, lp):
        trace[t - 1] = lp
        log.debug("sweep %d log posterior %.6f", t, lp)
        if t % every == 0 or t == schedule.iters:
            log.info("sweep %d/%d log posterior %.6f", t, schedule.iters, lp)

    draws = run_chain(batch, X, priors, schedule, callback=progress)
    write_draws(out / "draws.bdrw", draws)
    _write_map(out / "map.json", map_estimate(draws), draws)
    export_beta_pi_csv(out / "beta_pi_draws.csv", draws)
    with open(out / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "log_posterior", "retained"])
        for t, lp in enumerate(trace, 1):
            kept = t > schedule.burnin and (t - schedule.burnin) % schedule.stride == 0
            w.writerow([t, repr(float(lp)), int(kept)])
    outputs = [out / n for n in ("draws.bdrw", "map.json", "beta_pi_draws.csv", "trace.csv")]
    write_manifest(out, "fit", rec, [*files, ns.covariates] + ([ns.priors] if ns.priors else []), outputs,
                   seed=ns.seed, extra={"prior_hash": priors.digest(), "retained_draws": draws.S})
    return 0


def _true_effect_blocks(truth: SimTruth, q: int) -> set[tuple[int, int]]:
    """Blocks whose true effect of covariate ``q`` is nonzero for some participant."""
    sens = truth.sensitivity(q)
    J = sens.shape[-1]
    return {(j, l) for j in range(J) for l in range(j + 1) if np.any(np.abs(sens[:, j, l]) > 1e-12)}


def cmd_infer(ns) -> int:
    draws = read_draws(ns.draws)
    q = draws.p if ns.covariate_index is None else ns.covariate_index
    if not 1 <= q <= draws.p:
        raise ValidationError(f"covariate index {q} out of range 1..{draws.p}")
    out = _prepare_out(ns.out)
    rec = _args_record(ns)
    report = sensitivity_report(draws, q - 1, level=ns.level, binary=ns.binary,
                                threshold=ns.threshold, contrast=ns.contrast)
    if ns.truth:
        truth = SimTruth.from_json(Path(ns.truth).read_text())
        true_set = _true_effect_blocks(truth, q - 1)
        chosen = report.selected
        union = chosen | true_set
        report.meta["true_blocks"] = [[j + 1, l + 1] for j, l in sorted(true_set)]
        report.meta["jaccard"] = len(chosen & true_set) / len(union) if union else 1.0
    summary = report.write(out)
    outputs = [out / n for n in ("intervals.csv", "aggregate.csv", "heatmap.csv", "significant_blocks.json")]
    write_manifest(out, "infer", rec, [ns.draws] + ([ns.truth] if ns.truth else []), outputs,
                   seed=draws.meta.get("seed"))
    log.info("%d blocks selected", len(summary["significant_blocks"]))
    return 0


def cmd_report(ns) -> int:
    fit = Path(ns.fit)
    map_path = fit / "map.json"
    if not map_path.exists():
        raise ValidationError(f"missing MAP estimate {map_path}")
    draws = read_draws(fit / "draws.bdrw")
    ids, batch, files = _load_summaries(ns.summaries)
    if list(ids) != list(draws.ids):
        raise ValidationError("summaries do not match the participants of the fit")
    snap = map_estimate(draws)
    out = _prepare_out(ns.out)
    rec = _args_record(ns)
    report = delta_vs_A_report(snap, draws.X, batch.A, ids)
    perm = permuted_correlation(report, np.random.default_rng(ns.seed))
    report.write(out, permuted_correlation=perm, low_fit=ns.low_fit)
    write_manifest(out, "report", rec, [map_path, fit / "draws.bdrw", *files],
                   [out / "fit_report.csv", out / "fit_matrices.csv"], seed=ns.seed,
                   extra={"median_correlation": float(np.median(report.correlation))})
    log.info("median scaled correlation %.4f", float(np.median(report.correlation)))
    return 0


def cmd_coverage(ns) -> int:
    config = read_sim_config(ns.config)
    if config.replicates < 2:
        raise ValidationError("coverage needs replicates >= 2")
    out = _prepare_out(ns.out)
    rec = _args_record(ns)
    table = run_study(config, workers=ns.workers)
    table.to_csv(out / "coverage.csv")
    with open(out / "replicates.csv", "w", newline="") as fh:
        keys = list(table.per_replicate[0])
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(table.per_replicate)
    write_manifest(out, "coverage", rec, [ns.config], [out / "coverage.csv", out / "replicates.csv"],
                   seed=config.seed)
    print(table.format())
    return 0


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blocr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for every sweep")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--config", required=True, help="key=value simulation config")
    p.add_argument("--out", required=True)
    p.add_argument("--write-timeseries", action="store_true", help="also write raw BTSR series and partitions")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("summarize", help="reduce raw time series to BSUM summaries")
    p.add_argument("--timeseries", required=True, help="glob of CSV or BTSR files")
    p.add_argument("--partition", required=True, help="partition JSON, or a directory of <stem>.json files")
    p.add_argument("--thin", type=int, default=1)
    p.add_argument("--center", type=_parse_bool, default=None,
                   help="center columns (default: on for CSV input, off for BTSR)")
    p.add_argument("--scale", action="store_true", help="scale columns to unit variance")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("fit", help="run the Gibbs sampler")
    p.add_argument("--summaries", required=True)
    p.add_argument("--covariates", required=True)
    p.add_argument("--iters", type=int, default=6000)
    p.add_argument("--burnin", type=int, default=1000)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--priors", default=None, help="key=value hyperparameter file")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("infer", help="credible intervals and block selection for one covariate")
    p.add_argument("--draws", required=True)
    p.add_argument("--covariate-index", type=int, default=None, help="1-based covariate (default: last)")
    p.add_argument("--binary", type=_parse_bool, nargs="?", const=True, default=False)
    p.add_argument("--contrast", choices=("zero_to_one", "one_to_zero"), default="zero_to_one")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--threshold", type=float, default=0.95)
    p.add_argument("--truth", default=None, help="truth.json from simulate, to score the selected set")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("report", help="compare scaled MAP Delta with scaled A")
    p.add_argument("--fit", required=True)
    p.add_argument("--summaries", required=True)
    p.add_argument("--seed", type=int, default=0, help="seed of the permutation control")
    p.add_argument("--low-fit", type=float, default=0.9, help="flag participants below this correlation")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("coverage", help="replicated simulation study")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_coverage)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(ns.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if getattr(ns, "threads", 1) < 1:
        parser.error("--threads must be >= 1")
    try:
        return ns.func(ns)
    except BlocrError as exc:
        print(f"error: kind={exc.kind} message={exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: kind=io message={exc}", file=sys.stderr)
        return ValidationError.exit_code
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"error: kind=numerical message={exc}", file=sys.stderr)
        return NumericalError.exit_code


if __name__ == "__main__":
    sys.exit(main())
