"""Experiment grid: incentive scenarios swept over per-client training sizes and seeds.

Each grid point (train size, seed) is an isolated deterministic simulation
with its own ledger. Results go to ``results.csv``; each ledger is exported
next to it so a run can be audited from the log alone.
"""
from __future__ import annotations

import configparser
import contextlib
import csv
import dataclasses
import enum
import functools
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .contribution import federated_contribution, relative_contributions, to_fixed_point
from .crypto import decrypt_model, derive_entropy, generate_round_keypair
from .data import (CLASS_COUNT, Dataset, PartitionPlan, add_gaussian_noise, load_mnist_dir,
                   partition, subsample, synth_dataset)
from .errors import ConfigError, EmptyInput
from .ledger import CONTRIB_NOTICE, GLOBAL_MODEL, INIT_ROUND, LOCAL_MODEL, read_log
from .model import TrainConfig, evaluate_accuracy
from .protocol import RoundResult, build_simulation, decode_init, ContributionNotice
from .wire import deserialize_model

log = logging.getLogger(__name__)


class Scenario(enum.Enum):
    EQUAL = "equal"
    UNDER_PERFORMER = "underperformer"
    OVER_PERFORMER = "overperformer"
    NOISY_CLIENT = "noisyclient"


class DatasetKind(enum.Enum):
    SYNTHETIC = "synthetic"
    MNIST = "mnist"
    FASHION_MNIST = "fashionmnist"


def _enum_value(enum_cls, value):
    if isinstance(value, enum_cls):
        return value
    key = str(value).lower().replace("_", "").replace("-", "").replace(" ", "")
    for member in enum_cls:
        if member.value == key:
            return member
    raise ConfigError(f"unknown {enum_cls.__name__} {value!r}")


@dataclass
class ScenarioConfig:
    scenario: Scenario = Scenario.EQUAL
    dataset: DatasetKind = DatasetKind.SYNTHETIC
    split: str = "iid"
    client_count: int = 5
    special_client: int = 3
    train_sizes: tuple[int, ...] = (100, 300, 1000)
    rounds: int = 3
    seeds: tuple[int, ...] = (1, 2, 3)
    architecture: Optional[tuple[int, ...]] = None
    sigma: float = 0.5
    genesis_size: int = 1000
    test_size: int = 1000
    synthetic_dim: int = 20
    spread: float = 0.1
    separation: float = 4.0
    data_dir: Optional[str] = None
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 0.001
    importance: str = "samples"
    server_rate: float = 1.0
    deadline_ticks: int = 10

    def __post_init__(self):
        self.scenario = _enum_value(Scenario, self.scenario)
        self.dataset = _enum_value(DatasetKind, self.dataset)
        self.split = self.split.lower().replace("-", "").replace("_", "")
        self.train_sizes = tuple(int(s) for s in self.train_sizes)
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.architecture is not None:
            self.architecture = tuple(int(d) for d in self.architecture)
        self.validate()

    def validate(self) -> None:
        if self.split not in ("iid", "noniid"):
            raise ConfigError(f"split must be iid or noniid, not {self.split!r}")
        if self.client_count < 1:
            raise ConfigError("client_count must be positive")
        if not 0 <= self.special_client < self.client_count:
            raise ConfigError(f"special_client {self.special_client} not below K={self.client_count}")
        if not self.train_sizes or min(self.train_sizes) < 1:
            raise ConfigError("train sizes must be >= 1")
        if self.scenario is Scenario.UNDER_PERFORMER and min(self.train_sizes) < 10:
            raise ConfigError("under-performer needs base train size >= 10 (client gets 10%)")
        if self.rounds < 1 or not self.seeds:
            raise ConfigError("need at least one round and one seed")
        if self.sigma < 0:
            raise ConfigError("sigma must be non-negative")
        if self.importance not in ("samples", "uniform"):
            raise ConfigError("importance must be 'samples' or 'uniform'")
        if self.dataset is not DatasetKind.SYNTHETIC and not self.data_dir:
            raise ConfigError(f"{self.dataset.value} needs data_dir pointing at IDX files")
        dims = self.dims
        if len(dims) < 2 or dims[-1] != CLASS_COUNT or dims[0] != self.input_dim:
            raise ConfigError(f"architecture {dims} must map {self.input_dim} inputs to {CLASS_COUNT} classes")
        TrainConfig(self.epochs, self.batch_size, self.learning_rate)

    @property
    def input_dim(self) -> int:
        return self.synthetic_dim if self.dataset is DatasetKind.SYNTHETIC else 784

    @property
    def dims(self) -> tuple[int, ...]:
        if self.architecture:
            return self.architecture
        if self.dataset is DatasetKind.SYNTHETIC:
            return (self.synthetic_dim, 16, CLASS_COUNT)
        return (784, 32, CLASS_COUNT)

    def client_sizes(self, base: int) -> list[int]:
        sizes = [base] * self.client_count
        if self.scenario is Scenario.UNDER_PERFORMER:
            sizes[self.special_client] = base // 10
        elif self.scenario is Scenario.OVER_PERFORMER:
            sizes[self.special_client] = base * 10
        return sizes

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, enum.Enum):
                v = v.value
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    def to_text(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            if value is None:
                continue
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_text(cls, text: str) -> "ScenarioConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
        parser.optionxform = str
        try:
            parser.read_string("[scenario]\n" + text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config: {exc}") from exc
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in parser["scenario"].items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, raw.strip())
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "ScenarioConfig":
        return cls.from_text(Path(path).read_text())


_INT_KEYS = {"client_count", "special_client", "rounds", "genesis_size", "test_size",
             "synthetic_dim", "epochs", "batch_size", "deadline_ticks"}
_FLOAT_KEYS = {"sigma", "spread", "separation", "learning_rate", "server_rate"}
_LIST_KEYS = {"train_sizes", "seeds", "architecture"}


def _coerce(key: str, raw: str):
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in _LIST_KEYS:
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


RESULT_FIELDS = ("scenario", "dataset", "split", "seed", "round", "train_size", "client_id",
                 "gamma_abs", "gamma_rel_bp", "global_accuracy")


@dataclass(frozen=True)
class ResultRow:
    scenario: str
    dataset: str
    split: str
    seed: int
    round: int
    train_size: int
    client_id: int
    gamma_abs: float
    gamma_rel_bp: int
    global_accuracy: float

    def as_csv(self) -> list[str]:
        return [self.scenario, self.dataset, self.split, str(self.seed), str(self.round),
                str(self.train_size), str(self.client_id), repr(float(self.gamma_abs)),
                str(self.gamma_rel_bp), repr(float(self.global_accuracy))]

    @classmethod
    def from_csv(cls, record: dict) -> "ResultRow":
        return cls(record["scenario"], record["dataset"], record["split"], int(record["seed"]),
                   int(record["round"]), int(record["train_size"]), int(record["client_id"]),
                   float(record["gamma_abs"]), int(record["gamma_rel_bp"]),
                   float(record["global_accuracy"]))


@dataclass
class GridPoint:
    base_size: int
    seed: int
    client_sizes: list[int]
    results: list[RoundResult]
    rows: list[ResultRow]
    log_text: str
    genesis_accuracy: float
    aborted: list[int] = field(default_factory=list)

    @property
    def ledger_name(self) -> str:
        return f"n{self.base_size}-s{self.seed}.jsonl"


@dataclass
class ScenarioRun:
    config: ScenarioConfig
    points: list[GridPoint]

    @property
    def rows(self) -> list[ResultRow]:
        return [row for p in self.points for row in p.rows]

    def point(self, base_size: int, seed: int) -> GridPoint:
        return next(p for p in self.points if p.base_size == base_size and p.seed == seed)


@functools.lru_cache(maxsize=4)
def _idx_split(data_dir: str, train: bool) -> Dataset:
    return load_mnist_dir(data_dir, train)


def _pool_size(plan: PartitionPlan, class_count: int) -> int:
    need = np.zeros(class_count, dtype=np.int64)
    need += [plan.genesis_size // class_count + (1 if c < plan.genesis_size % class_count else 0)
             for c in range(class_count)]
    if plan.mode == "iid":
        return int(need.sum()) + sum(plan.client_sizes)
    for k, size in enumerate(plan.client_sizes):
        classes = plan.client_classes(k, class_count)
        base, extra = divmod(size, len(classes))
        for j, c in enumerate(classes):
            need[c] += base + (1 if j < extra else 0)
    return int(need.max()) * class_count


def build_datasets(cfg: ScenarioConfig, base: int, seed: int
                   ) -> tuple[Dataset, list[Dataset], Dataset]:
    """Genesis split, per-client splits (scenario applied) and the test set."""
    plan = PartitionPlan(cfg.split, cfg.genesis_size, cfg.client_sizes(base), seed=seed)
    if cfg.dataset is DatasetKind.SYNTHETIC:
        data_seed = int(np.random.SeedSequence([seed, 0]).generate_state(1)[0])
        test_seed = int(np.random.SeedSequence([seed, 1]).generate_state(1)[0])
        pool = synth_dataset(_pool_size(plan, CLASS_COUNT), CLASS_COUNT, cfg.synthetic_dim,
                             data_seed, spread=cfg.spread, separation=cfg.separation)
        test = synth_dataset(cfg.test_size, CLASS_COUNT, cfg.synthetic_dim, test_seed,
                             spread=cfg.spread, separation=cfg.separation)
    else:
        pool = _idx_split(str(Path(cfg.data_dir).resolve()), True)
        test = _idx_split(str(Path(cfg.data_dir).resolve()), False)
        if cfg.test_size and cfg.test_size < len(test):
            test = subsample(test, cfg.test_size, seed)
    genesis, clients = partition(pool, plan)
    if cfg.scenario is Scenario.NOISY_CLIENT:
        k = cfg.special_client
        clients[k] = add_gaussian_noise(clients[k], cfg.sigma, seed)
    return genesis, clients, test


def run_point(cfg: ScenarioConfig, base: int, seed: int) -> GridPoint:
    genesis, clients, test = build_datasets(cfg, base, seed)
    train_cfg = cfg.train_config()
    sim = build_simulation(clients, train_cfg, seed=seed, importance=cfg.importance,
                           server_rate=cfg.server_rate, deadline_ticks=cfg.deadline_ticks,
                           evaluate=lambda m: evaluate_accuracy(m, test))
    genesis_model = sim.server.bootstrap_genesis(genesis, cfg.dims, train_cfg.with_seed(seed), seed)
    genesis_acc = evaluate_accuracy(genesis_model, test)
    results = sim.run(cfg.rounds)
    sizes = [len(c) for c in clients]
    rows = []
    for res in results:
        for k in range(cfg.client_count):
            rep = res.report_for(k)
            rows.append(ResultRow(cfg.scenario.value, cfg.dataset.value, cfg.split, seed,
                                  res.round_id, sizes[k], k, rep.gamma_abs if rep else 0.0,
                                  res.basis_points[k], float(res.accuracy)))
    buf = io.StringIO()
    sim.ledger.export_log(buf)
    return GridPoint(base, seed, sizes, results, rows, buf.getvalue(), genesis_acc,
                     list(sim.server.aborted))


def _run_point_args(args):
    return run_point(*args)


def run_scenario(cfg: ScenarioConfig, out_dir=None, jobs: int = 1) -> ScenarioRun:
    """Run every (train size, seed) point; write CSV, ledgers and a manifest if ``out_dir``."""
    cfg.validate()
    grid = [(cfg, base, seed) for base in cfg.train_sizes for seed in cfg.seeds]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "ledgers").mkdir(parents=True, exist_ok=True)
    points = []
    with contextlib.ExitStack() as stack:
        if jobs > 1:
            produced = stack.enter_context(ProcessPoolExecutor(jobs)).map(_run_point_args, grid)
        else:
            produced = map(_run_point_args, grid)
        if out is not None:
            csv_fh = stack.enter_context(open(out / "results.csv", "w", newline=""))
            writer = csv.writer(csv_fh, lineterminator="\n")
            writer.writerow(RESULT_FIELDS)
        for point in produced:
            points.append(point)
            log.info("%s n=%d seed=%d done", cfg.scenario.value, point.base_size, point.seed)
            if out is not None:
                for row in point.rows:
                    writer.writerow(row.as_csv())
                csv_fh.flush()
                (out / "ledgers" / point.ledger_name).write_text(point.log_text)
    if out is not None:
        manifest = {
            "config": cfg.to_dict(),
            "config_hash": cfg.digest(),
            "results": "results.csv",
            "ledgers": [{"train_size": p.base_size, "seed": p.seed, "client_sizes": p.client_sizes,
                         "file": f"ledgers/{p.ledger_name}", "rows": len(p.rows),
                         "config_hash": cfg.digest()}
                        for p in points],
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        (out / "config.txt").write_text(cfg.to_text())
    return ScenarioRun(cfg, points)


def read_results(path) -> list[ResultRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RESULT_FIELDS:
            if tuple(reader.fieldnames or ()) == SUMMARY_FIELDS:
                raise ConfigError(f"{path} is already a summary; summarize the raw results.csv")
            raise ConfigError(f"{path}: unexpected header {reader.fieldnames}")
        return [ResultRow.from_csv(r) for r in reader]


# summaries

SUMMARY_FIELDS = ("scenario", "dataset", "split", "train_size", "client_id", "samples",
                  "gamma_abs_mean", "gamma_abs_std", "gamma_rel_mean", "gamma_rel_std",
                  "final_accuracy_mean")


@dataclass(frozen=True)
class SummaryRow:
    scenario: str
    dataset: str
    split: str
    train_size: int
    client_id: int
    samples: int
    gamma_abs_mean: float
    gamma_abs_std: float
    gamma_rel_mean: float
    gamma_rel_std: float
    final_accuracy_mean: float

    def as_csv(self) -> list[str]:
        return [str(getattr(self, name)) if not isinstance(getattr(self, name), float)
                else repr(getattr(self, name)) for name in SUMMARY_FIELDS]


def emit_summary(rows: Sequence[ResultRow]) -> list[SummaryRow]:
    """Mean/std of contributions per (scenario, train_size, client) across seeds and rounds.

    Accuracy is the mean over seeds of the last round's global accuracy.
    """
    rows = list(rows)
    if not rows:
        raise EmptyInput("no result rows to summarise")
    if any(isinstance(r, SummaryRow) for r in rows):
        raise ConfigError("input is already a summary; summarize raw ResultRows")
    if not all(isinstance(r, ResultRow) for r in rows):
        raise ConfigError("emit_summary expects ResultRow records")
    groups: dict[tuple, list[ResultRow]] = {}
    for r in rows:
        groups.setdefault((r.scenario, r.dataset, r.split, r.train_size, r.client_id), []).append(r)
    out = []
    for key in sorted(groups):
        grp = groups[key]
        g_abs = np.array([r.gamma_abs for r in grp])
        g_rel = np.array([r.gamma_rel_bp / 10_000 for r in grp])
        last = {}
        for r in grp:
            if r.round >= last.get(r.seed, (-1, 0.0))[0]:
                last[r.seed] = (r.round, r.global_accuracy)
        acc = float(np.mean([a for _, a in last.values()]))
        out.append(SummaryRow(*key, len(grp), float(g_abs.mean()), float(g_abs.std()),
                              float(g_rel.mean()), float(g_rel.std()), acc))
    return out


def write_summary(summary: Iterable[SummaryRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        for row in summary:
            w.writerow(row.as_csv())


def accuracy_trend_fraction(summary: Sequence[SummaryRow]) -> float:
    """Share of adjacent train-size pairs (per scenario and client) where accuracy does not drop."""
    series: dict[tuple, list[tuple[int, float]]] = {}
    for s in summary:
        series.setdefault((s.scenario, s.dataset, s.split, s.client_id), []).append(
            (s.train_size, s.final_accuracy_mean))
    ok = total = 0
    for points in series.values():
        points.sort()
        for (_, a), (_, b) in zip(points, points[1:]):
            total += 1
            ok += b >= a
    return ok / total if total else 1.0


# replay audit

def audit_point(cfg: ScenarioConfig, base: int, seed: int, log_lines: Iterable[str],
                rows: Sequence[ResultRow]) -> list[str]:
    """Recompute every row of one grid point from its ledger log and diff against ``rows``.

    Round keys are re-derived from the seed, so this only works for seeded runs.
    """
    records = read_log(log_lines)
    _, _, test = build_datasets(cfg, base, seed)
    diffs = []
    expected: dict[tuple[int, int], ResultRow] = {(r.round, r.client_id): r for r in rows}
    sizes = cfg.client_sizes(base)
    node_index = {f"client-{k}": k for k in range(cfg.client_count)}
    current = None
    for rec in records:
        if rec.event_type == INIT_ROUND:
            round_id, der, global_model = decode_init(rec.body)
            keypair = generate_round_keypair(round_id, derive_entropy(seed, "round-key", round_id))
            if keypair.public_der != der:
                diffs.append(f"round {round_id}: re-derived round key does not match the ledger")
            current = {"round": round_id, "global": global_model, "key": keypair, "locals": {}}
        elif rec.event_type == LOCAL_MODEL and current is not None:
            k = node_index.get(rec.sender)
            if k is not None and k not in current["locals"]:
                try:
                    current["locals"][k] = decrypt_model(rec.body, current["key"].private_key)[0]
                except Exception as exc:  # excluded clients are expected to fail here
                    log.info("audit: client %s payload unreadable (%s)", k, exc)
        elif rec.event_type == CONTRIB_NOTICE and current is not None:
            notice = ContributionNotice.decode(rec.body)
            ids = sorted(current["locals"])
            gammas = {k: federated_contribution(current["global"], current["locals"][k])[0] for k in ids}
            bps = [0] * cfg.client_count
            if any(gammas.values()):
                for k, rel in zip(ids, relative_contributions([gammas[k] for k in ids])):
                    bps[k] = to_fixed_point(rel)
            if tuple(bps) != notice.basis_points:
                diffs.append(f"round {notice.round_id}: notice {notice.basis_points} != recomputed {bps}")
            current["gammas"], current["bps"] = gammas, bps
        elif rec.event_type == GLOBAL_MODEL and current is not None:
            model, meta = deserialize_model(rec.body)
            acc = evaluate_accuracy(model, test)
            for k in range(cfg.client_count):
                row = expected.pop((meta.round_id, k), None)
                if row is None:
                    diffs.append(f"round {meta.round_id} client {k}: row missing")
                    continue
                want = (current["gammas"].get(k, 0.0), current["bps"][k], acc, sizes[k])
                got = (row.gamma_abs, row.gamma_rel_bp, row.global_accuracy, row.train_size)
                if want != got:
                    diffs.append(f"round {meta.round_id} client {k}: row {got} != replay {want}")
            current = None
    for key in sorted(expected):
        diffs.append(f"round {key[0]} client {key[1]}: row has no ledger counterpart")
    return diffs


def audit_run(out_dir) -> list[str]:
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    cfg = ScenarioConfig(**manifest["config"])
    if cfg.digest() != manifest["config_hash"]:
        return ["config hash in manifest does not match the embedded config"]
    rows = read_results(out / manifest["results"])
    diffs = []
    start = 0
    for entry in manifest["ledgers"]:
        point_rows = rows[start:start + entry["rows"]]
        start += entry["rows"]
        lines = (out / entry["file"]).read_text().splitlines()
        diffs += [f"{entry['file']}: {d}" for d in
                  audit_point(cfg, entry["train_size"], entry["seed"], lines, point_rows)]
    if start != len(rows):
        diffs.append(f"results.csv has {len(rows) - start} rows not covered by any ledger")
    return diffs
