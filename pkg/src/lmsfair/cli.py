"""Command-line pipeline: generate, featurize, audit and report.

Every stage reads a YAML config. Inputs come either from event and location
CSVs or from a synthetic cohort description; all randomness derives from the single
config seed through named sub-streams.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from ._seeding import derive_seed
from .errors import ConfigError, DataError
from .eventlog import (
    SchemaError,
    build_timelines,
    format_id,
    parse_id,
    parse_event_log,
    read_location_log,
    write_errors,
)
from .evaluation import CVResult, FoldAssignment, FoldResult, auc_roc, stratified_group_kfold, weighted_f1
from .evaluation.cv import F1_THRESHOLD, cross_validate
from .evaluation.metrics import UndefinedMetricError
from .fairness import (
    DEFAULT_BIN_WIDTH,
    fairness_report,
    grade_distribution_stats,
    resolve_groups,
    write_grade_stats,
)
from .features import Dataset, featurize
from .models import DEFAULT_GRIDS, FAMILIES, Family, expand_grid
from .models.base import validate_hyperparameters
from .regions import parse_cluster
from .synth import CohortConfig, emit_cohort, generate_cohort

log = logging.getLogger("lmsfair")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_METRIC = 4


class MetricUndefinedError(RuntimeError):
    pass


def _parse_families(value) -> tuple[Family, ...]:
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    try:
        fams = tuple(Family(str(v).strip()) for v in value)
    except ValueError as exc:
        raise ConfigError(f"unknown model family: {exc}") from None
    if not fams:
        raise ConfigError("at least one model family is required")
    if len(set(fams)) != len(fams):
        raise ConfigError("model families must not repeat")
    return fams


@dataclass(frozen=True)
class PipelineConfig:
    """Validated pipeline settings; exactly one of ``input`` or ``synth``."""

    events: Path | None = None
    locations: Path | None = None
    synth: dict | None = None
    session_gap_minutes: float = 30.0
    window_hours: float = 168.0
    families: tuple[Family, ...] = FAMILIES
    grids: dict = field(default_factory=lambda: dict(DEFAULT_GRIDS))
    k: int = 10
    seed: int = 0
    madd_bin_width: float = DEFAULT_BIN_WIDTH
    out: Path = Path("out")

    def __post_init__(self):
        if (self.events is None) == (self.synth is None):
            raise ConfigError("config needs exactly one of 'input' or 'synth'")
        if self.synth is not None and self.locations is not None:
            raise ConfigError("'input.locations' cannot be combined with 'synth'")
        if not isinstance(self.k, int) or self.k < 2:
            raise ConfigError("k must be an integer >= 2")
        if not 0 < self.madd_bin_width <= 1:
            raise ConfigError("madd_bin_width must be in (0, 1]")
        if self.session_gap_minutes <= 0 or self.window_hours <= 0:
            raise ConfigError("session gap and window length must be positive")
        for fam, grid in self.grids.items():
            points = expand_grid(grid)
            if not points:
                raise ConfigError(f"empty grid for {fam.value}")
            for p in points:
                try:
                    validate_hyperparameters(fam, p)
                except ValueError as exc:
                    raise ConfigError(f"{fam.value} grid: {exc}") from None
        if self.synth is not None:
            self.cohort_config()

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path = Path(".")) -> "PipelineConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        known = {"input", "synth", "features", "families", "grids", "k", "seed", "madd_bin_width", "out"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw: dict = {}
        inp = d.get("input")
        if inp is not None:
            if not isinstance(inp, dict) or "events" not in inp:
                raise ConfigError("'input' needs an 'events' path")
            extra = set(inp) - {"events", "locations"}
            if extra:
                raise ConfigError(f"unknown input keys: {sorted(extra)}")
            kw["events"] = base_dir / inp["events"]
            if inp.get("locations") is not None:
                kw["locations"] = base_dir / inp["locations"]
        if d.get("synth") is not None:
            if not isinstance(d["synth"], dict):
                raise ConfigError("'synth' must be a mapping")
            kw["synth"] = dict(d["synth"])
        feats = d.get("features") or {}
        extra = set(feats) - {"session_gap_minutes", "window_hours"}
        if extra:
            raise ConfigError(f"unknown feature options: {sorted(extra)}")
        for name in ("session_gap_minutes", "window_hours"):
            if name in feats:
                kw[name] = _number(feats[name], name)
        if "families" in d:
            kw["families"] = _parse_families(d["families"])
        grids = dict(DEFAULT_GRIDS)
        for name, grid in (d.get("grids") or {}).items():
            fam = _parse_families([name])[0]
            if not isinstance(grid, dict):
                raise ConfigError(f"grid for {name} must be a mapping")
            grids[fam] = {p: (v if isinstance(v, list) else [v]) for p, v in grid.items()}
        kw["grids"] = grids
        for name in ("k", "seed"):
            if name in d:
                if not isinstance(d[name], int) or isinstance(d[name], bool):
                    raise ConfigError(f"{name} must be an integer")
                kw[name] = d[name]
        if "madd_bin_width" in d:
            kw["madd_bin_width"] = _number(d["madd_bin_width"], "madd_bin_width")
        if "out" in d:
            kw["out"] = base_dir / d["out"]
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "input": None if self.events is None else {
                "events": str(self.events),
                "locations": None if self.locations is None else str(self.locations),
            },
            "synth": self.synth,
            "features": {"session_gap_minutes": self.session_gap_minutes, "window_hours": self.window_hours},
            "families": [f.value for f in self.families],
            "grids": {f.value: self.grids[f] for f in self.families},
            "k": self.k,
            "seed": self.seed,
            "madd_bin_width": self.madd_bin_width,
        }

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()

    def cohort_config(self) -> CohortConfig:
        d = dict(self.synth)
        if "seed" in d:
            raise ConfigError("synth.seed is not allowed; the cohort seed derives from the top-level seed")
        d["seed"] = derive_seed(self.seed, "synth")
        return CohortConfig.from_dict(d)


def _number(v, name):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{name} must be a number")
    return float(v)


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from None
    return PipelineConfig.from_dict(doc or {}, path.parent)


def _utcnow() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config_hash: str
    version: str = __version__
    started_at: str = field(default_factory=_utcnow)
    finished_at: str | None = None
    status: str = "running"
    exit_code: int | None = None
    workers: int = 1
    stage_seconds: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    error: str | None = None

    def stage(self, name):
        return _Stage(self, name)

    def warn(self, msg):
        log.warning(msg)
        self.warnings.append(msg)

    def finish(self, code, error=None):
        self.exit_code = code
        self.status = "ok" if code == EXIT_OK else "error"
        self.error = error
        self.finished_at = _utcnow()

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.__dict__, fh, indent=2, sort_keys=True)
            fh.write("\n")


class _Stage:
    def __init__(self, manifest, name):
        self.manifest, self.name = manifest, name

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.manifest.stage_seconds[self.name] = round(time.perf_counter() - self.t0, 3)
        return False


def _load_inputs(cfg: PipelineConfig, manifest: RunManifest, workers: int, need_locations: bool):
    """Timelines and location records from files or a generated cohort."""
    if cfg.synth is not None:
        with manifest.stage("generate"):
            cohort = generate_cohort(cfg.cohort_config(), workers=workers)
        manifest.counts["events"] = len(cohort.events)
        manifest.counts["location_rows"] = len(cohort.locations)
        with manifest.stage("timelines"):
            timelines = build_timelines(cohort.events)
        return timelines, cohort.locations

    errors: list = []
    with manifest.stage("parse"):
        try:
            with open(cfg.events, "rb") as fh:
                timelines = build_timelines(parse_event_log(fh, errors=errors))
        except OSError as exc:
            raise DataError(f"cannot read events: {exc}") from None
        except SchemaError as exc:
            raise DataError(f"event log: {exc}") from None
    manifest.counts["events"] = sum(len(t) for t in timelines.values())
    manifest.counts["event_row_errors"] = len(errors)
    if errors:
        manifest.warn(f"{len(errors)} malformed event rows skipped (see event_errors.csv)")
        with open(cfg.out / "event_errors.csv", "w", newline="", encoding="utf-8") as fh:
            write_errors(errors, fh)

    locations = []
    if cfg.locations is None:
        if need_locations:
            raise DataError("audit needs 'input.locations'")
    else:
        loc_errors: list = []
        try:
            locations = list(read_location_log(cfg.locations, errors=loc_errors))
        except OSError as exc:
            raise DataError(f"cannot read locations: {exc}") from None
        manifest.counts["location_rows"] = len(locations)
        if loc_errors:
            manifest.warn(f"{len(loc_errors)} malformed location rows skipped (see location_errors.csv)")
            with open(cfg.out / "location_errors.csv", "w", newline="", encoding="utf-8") as fh:
                write_errors(loc_errors, fh)
    return timelines, locations


def _featurize(cfg, timelines, manifest) -> Dataset:
    with manifest.stage("featurize"):
        ds = featurize(timelines, cfg.session_gap_minutes, cfg.window_hours)
    manifest.counts["students"] = len(timelines)
    manifest.counts["samples"] = len(ds)
    if len(ds) == 0:
        manifest.warn("no GradeReceived events; the dataset is empty")
    else:
        manifest.counts["average_grade"] = ds.average_grade
        manifest.counts["positive_rate"] = ds.positive_rate
    return ds


def _summary_lines(ds: Dataset) -> list[str]:
    if len(ds) == 0:
        return ["samples: 0"]
    return [
        f"average grade: {ds.average_grade:.4f}",
        f"samples: {len(ds)}",
        f"positive rate: {ds.positive_rate:.4f} ({int(ds.y.sum())} below average)",
    ]


def cmd_generate(cfg: PipelineConfig, manifest: RunManifest, workers: int = 1) -> None:
    if cfg.synth is None:
        raise ConfigError("generate needs a 'synth' section")
    with manifest.stage("generate"):
        cohort = generate_cohort(cfg.cohort_config(), workers=workers)
    with manifest.stage("write"):
        paths = emit_cohort(cohort, cfg.out)
    manifest.counts.update(
        students=len(cohort.truth.students), events=len(cohort.events), location_rows=len(cohort.locations)
    )
    for name, path in paths.items():
        print(f"{name}: {path}")
    print(f"students: {len(cohort.truth.students)}  events: {len(cohort.events)}  location rows: {len(cohort.locations)}")


def cmd_featurize(cfg: PipelineConfig, manifest: RunManifest, workers: int = 1) -> Dataset:
    timelines, _ = _load_inputs(cfg, manifest, workers, need_locations=False)
    ds = _featurize(cfg, timelines, manifest)
    path = cfg.out / "dataset.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        ds.write_csv(fh)
    print(f"dataset: {path}")
    for line in _summary_lines(ds):
        print(line)
    return ds


def _write_groups(groups, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["student_id", "cluster"])
        for s, g in groups.items():
            w.writerow([format_id(s), "" if g is None else g.value])


def _read_groups(path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        return {parse_id(r["student_id"]): (parse_cluster(r["cluster"]) if r["cluster"] else None)
                for r in csv.DictReader(fh)}


def _write_outputs(cfg, results, groups, ds, manifest):
    report = fairness_report(results, groups, cfg.madd_bin_width)
    for w in report.warnings:
        if w not in manifest.warnings:
            manifest.warnings.append(w)
    manifest.counts["students_modeling"] = report.n_students_modeling
    manifest.counts["students_fairness"] = report.n_students_fairness
    manifest.counts["group_sizes"] = {g.value: n for g, n in report.group_sizes.items()}
    with open(cfg.out / "report.csv", "w", newline="", encoding="utf-8") as fh:
        report.write_csv(fh)
    with open(cfg.out / "report.json", "w", encoding="utf-8") as fh:
        report.write_json(fh)
    if ds is not None:
        stats = grade_distribution_stats(ds.grade, ds.student, groups)
        with open(cfg.out / "grade_stats.csv", "w", newline="", encoding="utf-8") as fh:
            write_grade_stats(stats, fh)
    return report


def _check_defined(results):
    for cv in results:
        if math.isnan(cv.aggregate("auc")[0]):
            raise MetricUndefinedError(f"{cv.family.value}: AUC undefined in every fold")


def cmd_audit(cfg: PipelineConfig, manifest: RunManifest, workers: int = 1):
    timelines, locations = _load_inputs(cfg, manifest, workers, need_locations=True)
    ds = _featurize(cfg, timelines, manifest)
    if len(ds) == 0:
        raise DataError("no samples to model")
    students = np.unique(ds.student)
    groups = resolve_groups(locations, students.tolist())
    # students with location rows but no samples play no part
    groups = {s: groups[s] for s in students.tolist()}
    _write_groups(groups, cfg.out / "groups.csv")

    assignment = stratified_group_kfold(ds.student, ds.y, cfg.k, derive_seed(cfg.seed, "folds"))
    results = []
    for fam in cfg.families:
        with manifest.stage(f"cv_{fam.value}"):
            cv = cross_validate(fam, cfg.grids[fam], ds, cfg.k, derive_seed(cfg.seed, "models", fam.value),
                                workers, assignment)
        for w in cv.warnings:
            manifest.warn(w)
        results.append(cv)
        auc_m, auc_s = cv.aggregate("auc")
        log.info("%s AUC %.4f (%.4f)", fam.value, auc_m, auc_s)

    with open(cfg.out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        for i, cv in enumerate(results):
            cv.write_predictions(fh, header=(i == 0), with_family=True)
    with open(cfg.out / "cv.json", "w", encoding="utf-8") as fh:
        json.dump([cv.to_dict() for cv in results], fh, indent=2, sort_keys=True)
        fh.write("\n")
    with manifest.stage("fairness"):
        report = _write_outputs(cfg, results, groups, ds, manifest)
    _check_defined(results)
    print(f"report: {cfg.out / 'report.csv'}")
    for line in _summary_lines(ds):
        print(line)
    return results, report


def _results_from_predictions(path) -> list[CVResult]:
    """Rebuild per-family CV results from an audit's predictions.csv."""
    rows: dict[str, list] = {}
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            for r in csv.DictReader(fh):
                rows.setdefault(r["family"], []).append(
                    (int(r["sample_id"]), parse_id(r["student_id"]), int(r["label"]), float(r["probability"]),
                     int(r["fold"]))
                )
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read predictions: {exc}") from None
    out = []
    for fam, items in rows.items():
        items.sort()
        n = items[-1][0] + 1
        labels = np.zeros(n, dtype=np.int64)
        students = np.zeros(n, dtype=np.int64)
        proba = np.zeros(n)
        fold = np.zeros(n, dtype=np.int64)
        for sid, student, label, p, f in items:
            labels[sid], students[sid], proba[sid], fold[sid] = label, student, p, f
        k = int(fold.max()) + 1
        folds = []
        for f in range(k):
            idx = np.flatnonzero(fold == f)
            try:
                auc = auc_roc(proba[idx], labels[idx])
            except UndefinedMetricError:
                auc = float("nan")
            f1 = weighted_f1((proba[idx] >= F1_THRESHOLD).astype(np.int64), labels[idx])
            folds.append(FoldResult(f, idx, proba[idx], {}, None, auc, f1))
        assignment = FoldAssignment(k, {int(s): int(f) for s, f in zip(students, fold)})
        out.append(CVResult(Family(fam), k, 0, assignment, folds, labels, students))
    return out


def cmd_report(cfg: PipelineConfig, manifest: RunManifest, workers: int = 1):
    results = _results_from_predictions(cfg.out / "predictions.csv")
    try:
        groups = _read_groups(cfg.out / "groups.csv")
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read groups: {exc}") from None
    with manifest.stage("fairness"):
        report = _write_outputs(cfg, results, groups, None, manifest)
    _check_defined(results)
    print(f"report: {cfg.out / 'report.csv'}")
    return report


COMMANDS = {
    "generate": cmd_generate,
    "featurize": cmd_featurize,
    "audit": cmd_audit,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lmsfair", description="Fairness audit of LMS grade prediction.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "generate": "write a synthetic cohort (events.csv, locations.csv, truth.json)",
        "featurize": "turn an event log into one labelled sample per grade (dataset.csv)",
        "audit": "cross-validate every family and write the fairness report bundle",
        "report": "re-render report files from an audit's predictions.csv and groups.csv",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", required=True, type=Path, help="YAML pipeline config")
        p.add_argument("--workers", type=int, default=1, help="threads for within-stage parallelism")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", type=Path, help="override the output directory")
        p.add_argument("--families", help="comma-separated model families, e.g. RF,LR,Dummy")
        p.add_argument("--madd-bin-width", type=float, help="MADD histogram bin width")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    if args.families is not None:
        overrides["families"] = _parse_families(args.families)
    if args.madd_bin_width is not None:
        overrides["madd_bin_width"] = args.madd_bin_width
    return replace(cfg, **overrides) if overrides else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.workers < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = resolve_config(args)
        cfg.out.mkdir(parents=True, exist_ok=True)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: cannot create output directory: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    manifest = RunManifest(args.command, cfg.hash(), workers=args.workers)
    code, error = EXIT_OK, None
    try:
        COMMANDS[args.command](cfg, manifest, args.workers)
    except ConfigError as exc:
        code, error = EXIT_CONFIG, f"config error: {exc}"
    except DataError as exc:
        code, error = EXIT_DATA, f"data error: {exc}"
    except MetricUndefinedError as exc:
        code, error = EXIT_METRIC, f"metric undefined: {exc}"
    manifest.finish(code, error)
    manifest.write(cfg.out / "manifest.json")
    if error:
        print(error, file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
