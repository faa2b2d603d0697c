"""Experiment manifests, stream runs, multi-seed orchestration and CSV artifacts.

A manifest is a JSON object. Top-level keys:

``dataset``
    ``"synthetic:classes=20,per_class=100,..."`` or ``{"train": path, "test": path}``.
``stream``
    ``T``, ``b_s``, ``val_fraction``, ``boundaries_visible``.
``preset``
    ``low_cbp``, ``high_cbp`` or ``custom``; fills ``n_p`` and ``b_r`` per strategy.
``strategies``
    list of strategy objects (``name`` plus any :class:`StrategyConfig` field
    except ``seed`` and ``b_s``).
``probe``, ``augment``
    :class:`ProbeConfig` and :class:`AugmentationPolicy` fields.
``seeds``, ``output_dir``, ``workers``, ``timing``
    run control; ``output_dir`` is resolved against ``$OCSSL_OUTPUT_ROOT``.
``iid_baseline``
    ``null`` or ``{"b", "learning_rate", "ssl_objective"}``: a budget-matched
    i.i.d. run per seed.
``continue_iid``
    ``{"extra_cbp", "b", "learning_rate", "probe_every", "compare_scratch"}``
    for ``continue-iid``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .budget import BudgetLedger, BudgetSpec, assert_parity, cbp, ledger_check, parity_report, stream_slack
from .errors import ParityViolation
from .evaluation import ProbeConfig, final_and_average_accuracy, probe_accuracy
from .strategies import N_VIEWS, REGISTRY, Strategy, StrategyConfig, make_strategy, train_iid
from .stream import (
    AugmentationPolicy,
    Dataset,
    StreamPlan,
    load_dataset,
    make_synthetic_benchmark,
    parse_descriptor,
    split_class_incremental,
)

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "OCSSL_OUTPUT_ROOT"
DEFAULT_DATASET = "synthetic:classes=20,per_class=100,d=32,sep=6,seed=0,test_per_class=50"

RUN_COLUMNS = ["run_id", "seed", "strategy", "ssl_objective", "experience_idx", "step", "cbp_so_far",
               "loss_total", "loss_ssl", "loss_reg", "probe_acc_after_experience", "wall_ms"]
SUMMARY_COLUMNS = ["strategy", "ssl_objective", "n_seeds", "final_acc_mean", "final_acc_std",
                   "avg_acc_mean", "avg_acc_std", "cbp_declared"]
PLOT_COLUMNS = ["strategy", "ssl_objective", "seed", "experience_idx", "cbp_so_far", "probe_acc"]
PARITY_COLUMNS = ["run_id", "strategy", "composition", "n_v", "b", "n_p", "cbp_declared", "cbp_counted",
                  "cbp_accounted", "ledger_ok"]

# preset -> (extending-minibatch (n_p, b_r), limited-minibatch n_p)
PRESETS = {
    "high_cbp": ((3, 128), 3),
    "low_cbp": ((1, 20), 3),
}


class UsageError(ValueError):
    """Malformed manifest or command line; maps to exit code 2."""


@dataclass
class StreamSettings:
    T: int = 10
    b_s: int = 10
    val_fraction: float = 0.1
    boundaries_visible: bool = False


@dataclass
class IidSettings:
    b: int | None = None
    learning_rate: float = 0.05
    ssl_objective: str = "simsiam"


@dataclass
class ContinueSettings:
    extra_cbp: int = 0
    b: int | None = None
    learning_rate: float | None = None
    probe_every: int | None = None
    compare_scratch: bool = False


@dataclass
class Manifest:
    dataset: str | dict = DEFAULT_DATASET
    stream: StreamSettings = field(default_factory=StreamSettings)
    preset: str = "custom"
    strategies: list[StrategyConfig] = field(default_factory=list)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    augment: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "ocssl_runs"
    workers: int = 1
    timing: bool = False
    iid_baseline: IidSettings | None = None
    continue_iid: ContinueSettings = field(default_factory=ContinueSettings)

    def to_dict(self) -> dict:
        d = {
            "dataset": self.dataset,
            "stream": asdict(self.stream),
            "preset": self.preset,
            "strategies": [{k: v for k, v in s.to_dict().items() if k != "seed"} for s in self.strategies],
            "probe": self.probe.to_dict(),
            "augment": self.augment.to_dict(),
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
            "workers": self.workers,
            "timing": self.timing,
            "iid_baseline": None if self.iid_baseline is None else asdict(self.iid_baseline),
            "continue_iid": asdict(self.continue_iid),
        }
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def budget_specs(self, N: int) -> list[BudgetSpec]:
        return [s.budget_spec(N) for s in self.strategies]

    def output_path(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        out = Path(self.output_dir)
        return out if out.is_absolute() or not root else Path(root) / out


# -- parsing ---------------------------------------------------------------------------------

_TOP_KEYS = {f.name for f in fields(Manifest)}


def _check_type(key: str, value, expected):
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is int and isinstance(value, bool):
        raise UsageError(f"{key}: expected int, got bool")
    if not isinstance(value, expected):
        name = expected.__name__ if isinstance(expected, type) else "/".join(t.__name__ for t in expected)
        raise UsageError(f"{key}: expected {name}, got {type(value).__name__}")
    return value


def _fill(cls, key: str, raw, types: dict):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise UsageError(f"{key}: expected an object")
    unknown = set(raw) - set(types)
    if unknown:
        raise UsageError(f"unknown key {key}.{sorted(unknown)[0]}")
    values = {}
    for k, v in raw.items():
        if v is None:
            values[k] = None
            continue
        values[k] = _check_type(f"{key}.{k}", v, types[k])
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{key}: {exc}") from exc


_STREAM_TYPES = {"T": int, "b_s": int, "val_fraction": float, "boundaries_visible": bool}
_PROBE_TYPES = {"batch": int, "lr_init": float, "lr_decay_factor": float, "max_epochs": int, "lr_min": float,
                "patience": int, "momentum": float}
_AUG_TYPES = {"noise_sigma": float, "mask_fraction": float, "scale_jitter": list}
_IID_TYPES = {"b": int, "learning_rate": float, "ssl_objective": str}
_CONT_TYPES = {"extra_cbp": int, "b": int, "learning_rate": float, "probe_every": int, "compare_scratch": bool}
_STRATEGY_TYPES = {
    "name": str, "ssl_objective": str, "omega": float, "buffer_policy": str, "buffer_capacity": int,
    "b_r": int, "b_s": int, "n_p": int, "tau": float, "learning_rate": float, "momentum": float,
    "weight_decay": float, "temperature": float, "lump_alpha": float, "lump_lambda": float, "label": str,
}


def _strategy(raw, i: int, b_s: int, preset: str) -> StrategyConfig:
    key = f"strategies[{i}]"
    if isinstance(raw, str):
        raw = {"name": raw}
    if not isinstance(raw, dict) or "name" not in raw:
        raise UsageError(f"{key}: expected an object with a name")
    unknown = set(raw) - set(_STRATEGY_TYPES)
    if unknown:
        raise UsageError(f"unknown key {key}.{sorted(unknown)[0]}")
    values = {k: (None if v is None else _check_type(f"{key}.{k}", v, _STRATEGY_TYPES[k])) for k, v in raw.items()}
    if values.get("name") not in REGISTRY:
        raise UsageError(f"{key}.name: unknown strategy {values.get('name')!r}")
    if values.setdefault("b_s", b_s) != b_s:
        raise UsageError(f"{key}.b_s: must equal stream.b_s ({b_s})")
    if preset in PRESETS:
        (ext_np, ext_br), lim_np = PRESETS[preset]
        if REGISTRY[values["name"]][0] == "b_s+b_r":
            values.setdefault("n_p", ext_np)
            values.setdefault("b_r", ext_br)
        else:
            values.setdefault("n_p", lim_np)
    try:
        return StrategyConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{key}: {exc}") from exc


def parse_config(source) -> Manifest:
    """Validate a manifest given as a dict, JSON text or a path to a JSON file.

    Raises:
        UsageError: unknown key, wrong type, empty seed list, or CBP parity violation.
    """
    if isinstance(source, dict):
        raw = source
    else:
        text = source if isinstance(source, str) and source.lstrip().startswith("{") else None
        if text is None:
            try:
                text = Path(source).read_text()
            except OSError as exc:
                raise UsageError(f"cannot read config {source}: {exc}") from exc
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise UsageError(f"unknown key {sorted(unknown)[0]}")

    m = Manifest()
    if "dataset" in raw:
        ds = raw["dataset"]
        if isinstance(ds, str):
            try:
                parse_descriptor(ds)
            except ValueError as exc:
                raise UsageError(f"dataset: {exc}") from exc
        elif not (isinstance(ds, dict) and set(ds) == {"train", "test"}):
            raise UsageError("dataset: expected a synthetic descriptor or {train, test} paths")
        m.dataset = ds
    m.stream = _fill(StreamSettings, "stream", raw.get("stream"), _STREAM_TYPES)
    m.preset = _check_type("preset", raw.get("preset", "custom"), str)
    if m.preset not in (*PRESETS, "custom"):
        raise UsageError(f"preset: unknown preset {m.preset!r}")
    strategies = raw.get("strategies")
    if not isinstance(strategies, list) or not strategies:
        raise UsageError("strategies: expected a non-empty list")
    m.strategies = [_strategy(s, i, m.stream.b_s, m.preset) for i, s in enumerate(strategies)]
    labels = [(s.label, s.ssl_objective) for s in m.strategies]
    if len(set(labels)) != len(labels):
        raise UsageError("strategies: duplicate label; set distinct 'label' values")
    m.probe = _fill(ProbeConfig, "probe", raw.get("probe"), _PROBE_TYPES)
    aug = _fill(dict, "augment", raw.get("augment"), _AUG_TYPES) if raw.get("augment") is not None else {}
    try:
        m.augment = AugmentationPolicy(**{**AugmentationPolicy().to_dict(), **aug})
        m.augment.scale_jitter = tuple(float(v) for v in m.augment.scale_jitter)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"augment: {exc}") from exc
    seeds = raw.get("seeds", [0])
    ints = isinstance(seeds, list) and all(isinstance(s, int) and not isinstance(s, bool) for s in seeds)
    if not seeds or not ints:
        raise UsageError("seeds: expected a non-empty list of integers")
    if len(set(seeds)) != len(seeds):
        raise UsageError("seeds: duplicate seed")
    m.seeds = seeds
    m.output_dir = _check_type("output_dir", raw.get("output_dir", m.output_dir), str)
    m.workers = _check_type("workers", raw.get("workers", 1), int)
    if m.workers < 1:
        raise UsageError("workers: must be positive")
    m.timing = _check_type("timing", raw.get("timing", False), bool)
    if raw.get("iid_baseline") is not None:
        m.iid_baseline = _fill(IidSettings, "iid_baseline", raw["iid_baseline"], _IID_TYPES)
    m.continue_iid = _fill(ContinueSettings, "continue_iid", raw.get("continue_iid"), _CONT_TYPES)
    if any(s.variant in ("cassle", "cassle_r") for s in m.strategies) and not m.stream.boundaries_visible:
        raise UsageError("strategies: CaSSLe variants need stream.boundaries_visible = true")
    check_parity(m)
    return m


def check_parity(m: Manifest, N: int | None = None):
    """Raise :class:`UsageError` when the manifest's strategies differ in CBP."""
    if N is None:
        N = load_benchmark(m)[2].N
    if len(m.strategies) > 1:
        try:
            assert_parity(m.budget_specs(N))
        except ParityViolation as exc:
            raise UsageError(f"parity violation: {exc}; offenders: {', '.join(exc.offenders)}") from exc


# -- data ------------------------------------------------------------------------------------


def load_benchmark(m: Manifest, seed: int = 0) -> tuple[Dataset, Dataset, StreamPlan]:
    """Train set, test set and the stream plan for ``seed``."""
    if isinstance(m.dataset, str):
        d = parse_descriptor(m.dataset)
        train, test = make_synthetic_benchmark(d.classes, d.per_class, d.d, d.sep, d.seed, d.test_per_class)
    else:
        train, test = load_dataset(m.dataset["train"]), load_dataset(m.dataset["test"])
        if train.dim != test.dim or train.class_count != test.class_count:
            raise UsageError("train and test datasets disagree on dimension or class count")
    s = m.stream
    plan = split_class_incremental(train, s.T, seed, b_s=s.b_s, boundaries_visible=s.boundaries_visible,
                                   val_fraction=s.val_fraction)
    return train, test, plan


def probe_splits(plan: StreamPlan) -> tuple[Dataset, Dataset]:
    """All-class probe training split (the stream data) and the held-out validation split."""
    return plan.dataset.subset(plan.train_indices()), plan.dataset.subset(plan.validation)


# -- single runs ------------------------------------------------------------------------------


@dataclass
class RunResult:
    run_id: str
    config: StrategyConfig | None
    rows: list[dict]
    accuracies: list[float]
    ledger: BudgetLedger
    spec: BudgetSpec | None
    strategy: Strategy | None = None

    @property
    def final_acc(self) -> float:
        return final_and_average_accuracy(self.accuracies)[0]

    @property
    def avg_acc(self) -> float:
        return final_and_average_accuracy(self.accuracies)[1]


def run_id_for(label: str, objective: str, seed: int) -> str:
    return f"{label}-{objective}-s{seed}"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def run_experiment(plan: StreamPlan, config: StrategyConfig, test: Dataset, probe: ProbeConfig | None = None,
                   augment: AugmentationPolicy | None = None, timing: bool = False,
                   checkpoint: Path | None = None, on_minibatch=None) -> RunResult:
    """One pass over the stream, probing after each experience.

    The strategy only sees raw minibatches. Boundary events are delivered
    only to boundary-aware strategies, and only when the plan exposes them.
    """
    probe = probe or ProbeConfig()
    spec = config.budget_spec(plan.N)
    ledger = BudgetLedger(target_cbp=cbp(spec), slack=stream_slack(spec, max(plan.short_minibatches(), 1)))
    strategy = make_strategy(config, plan.dataset.dim, augment, ledger)
    boundaries = None
    if strategy.needs_boundaries:
        boundaries = np.cumsum(plan.boundary_info())
    probe_train, probe_val = probe_splits(plan)
    rid = run_id_for(config.label, config.ssl_objective, config.seed)
    rows, accs = [], []
    minibatches = list(plan.minibatches())
    for i, (x, exp) in enumerate(minibatches):
        if boundaries is not None and i in boundaries[:-1]:
            strategy.on_boundary()
        t0 = time.perf_counter()
        traces = strategy.observe(x)
        ms = (time.perf_counter() - t0) * 1000.0 / len(traces) if timing else None
        for tr in traces:
            tr.experience = exp
            rows.append({"run_id": rid, "seed": config.seed, "strategy": config.label,
                         "ssl_objective": config.ssl_objective, "experience_idx": exp, "step": tr.step,
                         "cbp_so_far": tr.cbp_so_far, "loss_total": tr.loss_total, "loss_ssl": tr.loss_ssl,
                         "loss_reg": tr.loss_reg, "probe_acc_after_experience": None,
                         "wall_ms": None if ms is None else round(ms, 3)})
            if not tr.finite():
                raise FloatingPointError(f"{rid}: non-finite loss at step {tr.step}")
        if on_minibatch is not None:
            on_minibatch(i, strategy)
        last_of_exp = i + 1 == len(minibatches) or minibatches[i + 1][1] != exp
        if last_of_exp:
            acc = probe_accuracy(strategy.nets.theta, probe_train, probe_val, test, probe, config.seed)
            accs.append(acc)
            rows[-1]["probe_acc_after_experience"] = acc
    if checkpoint is not None:
        strategy.save(checkpoint, {"run_id": rid, "accuracies": accs, "plan_seed": plan.seed,
                                   "cbp": ledger.backward_examples})
    return RunResult(rid, config, rows, accs, ledger, spec, strategy)


def run_iid(plan: StreamPlan, settings: IidSettings, target_cbp: int, test: Dataset, seed: int,
            probe: ProbeConfig | None = None, augment: AugmentationPolicy | None = None,
            timing: bool = False) -> RunResult:
    """Budget-matched offline baseline: plain SSL on shuffled stream data, probed once at the end."""
    b = settings.b or plan.b_s
    config = StrategyConfig("finetune", settings.ssl_objective, b_s=b, learning_rate=settings.learning_rate,
                            seed=seed, label="iid")
    ledger = BudgetLedger(target_cbp=target_cbp)
    strategy = make_strategy(config, plan.dataset.dim, augment, ledger)
    inputs = plan.dataset.inputs[plan.train_indices()]
    rng = np.random.default_rng([seed, 21])
    rid = run_id_for("iid", settings.ssl_objective, seed)
    t0 = time.perf_counter()
    res = train_iid(strategy, inputs, b, target_cbp, rng)
    ms = (time.perf_counter() - t0) * 1000.0 / max(len(res.traces), 1) if timing else None
    rows = [{"run_id": rid, "seed": seed, "strategy": "iid", "ssl_objective": settings.ssl_objective,
             "experience_idx": None, "step": tr.step, "cbp_so_far": tr.cbp_so_far, "loss_total": tr.loss_total,
             "loss_ssl": tr.loss_ssl, "loss_reg": tr.loss_reg, "probe_acc_after_experience": None,
             "wall_ms": None if ms is None else round(ms, 3)} for tr in res.traces]
    probe_train, probe_val = probe_splits(plan)
    acc = probe_accuracy(strategy.nets.theta, probe_train, probe_val, test, probe, seed)
    if rows:
        rows[-1]["probe_acc_after_experience"] = acc
    return RunResult(rid, None, rows, [acc], ledger, None, strategy)


# -- CSV artifacts ------------------------------------------------------------------------------


def csv_text(columns: list[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def accuracies_from_rows(rows: list[dict]) -> list[float]:
    return [float(r["probe_acc_after_experience"]) for r in rows if r["probe_acc_after_experience"] != ""]


def summarize(run_rows: dict[str, list[dict]], declared: dict[str, int]) -> list[dict]:
    """Mean and population standard deviation of Final / Average Accuracy per (strategy, objective).

    Works on rows read back from run CSVs, so it can be recomputed offline.
    """
    groups: dict[tuple[str, str], list[list[float]]] = {}
    for rows in run_rows.values():
        if not rows:
            continue
        key = (rows[0]["strategy"], rows[0]["ssl_objective"])
        groups.setdefault(key, []).append(accuracies_from_rows(rows))
    out = []
    for (strategy, objective), acc_lists in groups.items():
        finals = np.array([a[-1] for a in acc_lists])
        avgs = np.array([np.mean(a) for a in acc_lists])
        is_iid = strategy == "iid"
        out.append({
            "strategy": strategy, "ssl_objective": objective, "n_seeds": len(acc_lists),
            "final_acc_mean": float(finals.mean()), "final_acc_std": float(finals.std()),
            "avg_acc_mean": None if is_iid else float(avgs.mean()),
            "avg_acc_std": None if is_iid else float(avgs.std()),
            "cbp_declared": declared.get(strategy),
        })
    return out


def plot_rows(run_rows: dict[str, list[dict]]) -> list[dict]:
    out = []
    for rows in run_rows.values():
        for r in rows:
            if r["probe_acc_after_experience"] != "":
                out.append({"strategy": r["strategy"], "ssl_objective": r["ssl_objective"], "seed": r["seed"],
                            "experience_idx": r["experience_idx"], "cbp_so_far": r["cbp_so_far"],
                            "probe_acc": r["probe_acc_after_experience"]})
    return out


# -- orchestration --------------------------------------------------------------------------------


@dataclass
class CellOutcome:
    run_id: str
    ok: bool
    parity: dict | None = None
    error: str | None = None


def _cell(args) -> CellOutcome:
    manifest_dict, kind, index, seed, out = args
    m = parse_config(manifest_dict)
    out = Path(out)
    if kind == "iid":
        rid = run_id_for("iid", m.iid_baseline.ssl_objective, seed)
    else:
        cfg = m.strategies[index]
        rid = run_id_for(cfg.label, cfg.ssl_objective, seed)
    try:
        _, test, plan = load_benchmark(m, seed)
        if kind == "iid":
            target = cbp(m.strategies[0].budget_spec(plan.N))
            settings = m.iid_baseline
            if settings.b is None:
                settings.b = m.strategies[0].b
            res = run_iid(plan, settings, target, test, seed, m.probe, m.augment, m.timing)
            parity = {"run_id": rid, "strategy": "iid", "composition": "-", "n_v": N_VIEWS, "b": settings.b,
                      "n_p": "", "cbp_declared": target, "cbp_counted": res.ledger.backward_examples,
                      "cbp_accounted": res.ledger.accounted,
                      "ledger_ok": target - res.ledger.backward_examples < N_VIEWS * settings.b}
        else:
            cfg = StrategyConfig(**{**cfg.to_dict(), "seed": seed})
            res = run_experiment(plan, cfg, test, m.probe, m.augment, m.timing,
                                 checkpoint=out / "checkpoints" / f"{rid}.ckpt")
            verdict = ledger_check(res.ledger, res.spec, short_minibatches=plan.short_minibatches())
            parity = {"run_id": rid, "strategy": cfg.label, "composition": cfg.composition, "n_v": N_VIEWS,
                      "b": cfg.b, "n_p": cfg.n_p, "cbp_declared": verdict.declared, "cbp_counted": verdict.counted,
                      "cbp_accounted": verdict.accounted, "ledger_ok": verdict.ok}
        (out / "runs" / f"{rid}.csv").write_text(csv_text(RUN_COLUMNS, res.rows))
        return CellOutcome(rid, True, parity)
    except Exception as exc:  # a failed cell must not take the others down
        logger.error("cell %s failed: %s", rid, exc)
        return CellOutcome(rid, False, None, "".join(traceback.format_exception_only(type(exc), exc)).strip())


def run(m: Manifest) -> tuple[int, Path]:
    """Execute every (strategy x seed) cell and write the artifact directory.

    Returns ``(exit_code, output_dir)``; exit code 1 if any cell failed, in
    which case the artifacts of successful cells are kept and the failures
    are listed in ``failures.json``.
    """
    out = m.output_path()
    (out / "runs").mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    (out / "manifest.json").write_text(m.dumps())
    md = m.to_dict()
    cells = [(md, "stream", i, seed, str(out)) for i in range(len(m.strategies)) for seed in m.seeds]
    if m.iid_baseline is not None:
        cells += [(md, "iid", 0, seed, str(out)) for seed in m.seeds]
    if m.workers > 1:
        with ProcessPoolExecutor(max_workers=m.workers) as pool:
            outcomes = list(pool.map(_cell, cells))
    else:
        outcomes = [_cell(c) for c in cells]

    run_rows = {o.run_id: read_csv(out / "runs" / f"{o.run_id}.csv") for o in outcomes if o.ok}
    N = load_benchmark(m)[2].N
    declared = {s.label: cbp(s.budget_spec(N)) for s in m.strategies}
    if m.iid_baseline is not None:
        declared["iid"] = cbp(m.strategies[0].budget_spec(N))
    (out / "summary.csv").write_text(csv_text(SUMMARY_COLUMNS, summarize(run_rows, declared)))
    (out / "plot_data.csv").write_text(csv_text(PLOT_COLUMNS, plot_rows(run_rows)))
    (out / "parity.csv").write_text(csv_text(PARITY_COLUMNS, [o.parity for o in outcomes if o.ok]))
    failures = [{"run_id": o.run_id, "error": o.error} for o in outcomes if not o.ok]
    failures += [{"run_id": o.parity["run_id"], "error": "ledger mismatch"}
                 for o in outcomes if o.ok and not o.parity["ledger_ok"]]
    fpath = out / "failures.json"
    if failures:
        fpath.write_text(json.dumps(failures, indent=2) + "\n")
        return 1, out
    if fpath.exists():
        fpath.unlink()
    return 0, out


def parity_table(m: Manifest) -> str:
    N = load_benchmark(m)[2].N
    return str(parity_report(m.budget_specs(N)))


# -- continue with i.i.d. data -------------------------------------------------------------------


CURVE_COLUMNS = ["phase", "cbp_total", "probe_acc"]


def _iid_curve(strategy: Strategy, inputs: np.ndarray, b: int, budget: int, every: int, rng, acc, phase: str,
               curve: list[dict]):
    """Train ``strategy`` on i.i.d. minibatches for ``budget`` more examples, probing every ``every``."""
    next_probe = strategy.ledger.backward_examples + every

    def on_step(trace):
        nonlocal next_probe
        if every and trace.cbp_so_far >= next_probe:
            curve.append({"phase": phase, "cbp_total": trace.cbp_so_far, "probe_acc": acc(strategy)})
            next_probe += every

    if budget >= N_VIEWS * b:
        train_iid(strategy, inputs, b, budget, rng, on_step=on_step)
        if curve[-1]["cbp_total"] != strategy.ledger.backward_examples:
            curve.append({"phase": phase, "cbp_total": strategy.ledger.backward_examples, "probe_acc": acc(strategy)})


def continue_iid(checkpoint, m: Manifest) -> tuple[list[dict], Path]:
    """Resume a stream-trained learner on i.i.d. minibatches and probe along the way.

    The curve starts with the checkpoint's own probe accuracy (phase
    ``stream``), then adds a point every ``probe_every`` backward examples
    and at the end of the extra budget (phase ``iid``). With
    ``compare_scratch`` a freshly initialized learner is trained on i.i.d.
    data for the same total budget and probed on the same schedule (phase
    ``scratch``), giving the matching all-i.i.d. curve.
    """
    strategy = Strategy.load(checkpoint)
    meta = getattr(strategy, "user_meta", {})
    seed = strategy.config.seed
    _, test, plan = load_benchmark(m, meta.get("plan_seed", seed))
    d = strategy.nets.theta.encoder.spec.in_width
    if plan.dataset.dim != d:
        raise UsageError(f"checkpoint expects {d}-dimensional inputs, dataset has {plan.dataset.dim}")
    s = m.continue_iid
    if s.extra_cbp < 0:
        raise UsageError("continue_iid.extra_cbp must be non-negative")
    if s.learning_rate is not None:
        strategy.sgd.learning_rate = s.learning_rate
    b = s.b or strategy.config.b
    strategy.ledger.target_cbp = None
    probe_train, probe_val = probe_splits(plan)
    inputs = plan.dataset.inputs[plan.train_indices()]

    def acc(learner: Strategy) -> float:
        return probe_accuracy(learner.nets.theta, probe_train, probe_val, test, m.probe, seed)

    start = strategy.ledger.backward_examples
    every = s.probe_every or 0
    curve = [{"phase": "stream", "cbp_total": start, "probe_acc": acc(strategy)}]
    _iid_curve(strategy, inputs, b, s.extra_cbp, every, np.random.default_rng([seed, 31]), acc, "iid", curve)
    if s.compare_scratch:
        cfg = StrategyConfig("finetune", strategy.config.ssl_objective, b_s=b,
                             learning_rate=strategy.sgd.learning_rate, seed=seed, label="scratch")
        scratch = make_strategy(cfg, d, strategy.augment)
        curve.append({"phase": "scratch", "cbp_total": 0, "probe_acc": acc(scratch)})
        _iid_curve(scratch, inputs, b, start + s.extra_cbp, every, np.random.default_rng([seed, 32]), acc,
                   "scratch", curve)
    out = m.output_path()
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(m.dumps())
    name = Path(checkpoint).stem
    (out / f"continue_iid_{name}.csv").write_text(csv_text(CURVE_COLUMNS, curve))
    return curve, out


__all__ = [
    "Manifest", "UsageError", "parse_config", "run", "run_experiment", "run_iid", "continue_iid",
    "load_benchmark", "summarize", "parity_table",
]
