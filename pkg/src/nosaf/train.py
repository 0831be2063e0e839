"""Full-batch transductive training, evaluation and multi-seed experiments."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import AdamState, SparseCsr, Tape, adam_step, masked_softmax_cross_entropy
from .errors import ArgumentError, DivergenceError, NosafError
from .graph import Graph, SplitMasks, make_split, normalize_adjacency
from .model import ModelConfig, ModelParams, forward, init_params

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6
SUMMARY_COLUMNS = ["variant", "L", "seed", "test_acc", "best_val_epoch", "final_Davg",
                   "test_acc_std"]


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 500
    lr: float = 0.01
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seeds: list = field(default_factory=lambda: list(range(10)))
    split_seed: int = 0
    record_smoothness_every: int = 50  # 0 turns periodic smoothness records off

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        self.seeds = [int(s) for s in self.seeds]
        if self.epochs < 1:
            raise ArgumentError(f"epochs must be >= 1, got {self.epochs}")
        if not self.seeds:
            raise ArgumentError("need at least one seed")
        if self.record_smoothness_every < 0:
            raise ArgumentError("record_smoothness_every must be >= 0")


class RunError(NosafError, RuntimeError):
    def __init__(self, seed, cause):
        super().__init__(f"seed {seed}: {cause}")
        self.seed = seed
        self.cause = cause


@dataclass
class RunRecord:
    seed: int
    variant: str
    layers: int
    epochs: list  # one dict per epoch: epoch, loss, train_acc, val_acc, test_acc
    best_val_epoch: int
    best_val_acc: float
    test_accuracy_at_best_val: float
    layer_davg: list  # per stage, eval-mode pass with the best-validation weights
    davg_series: list  # [{"epoch": e, "davg": [...]}, ...]
    gamma_stats: list  # per stage {"mean","min","max"} or None, at the best epoch
    label_leaking: bool = False
    invariant_violations: list = field(default_factory=list)
    gamma_saturation: list = field(default_factory=list)  # filter weights rounded to 1.0
    params: ModelParams | None = field(default=None, repr=False, compare=False)

    @property
    def final_davg(self) -> float:
        return self.layer_davg[-1] if self.layer_davg else math.nan

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("params")
        return d


@dataclass
class ExperimentSummary:
    mean: float
    std: float
    records: list  # RunRecord, ordered by seed

    @classmethod
    def from_records(cls, records) -> "ExperimentSummary":
        records = sorted(records, key=lambda r: r.seed)
        accs = [r.test_accuracy_at_best_val for r in records]
        std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
        return cls(float(np.mean(accs)), std, records)

    @property
    def mean_final_davg(self) -> float:
        return float(np.mean([r.final_davg for r in self.records]))


def accuracy(logits: np.ndarray, labels: np.ndarray, idx) -> float:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        return math.nan
    return float(np.mean(np.argmax(logits[idx], axis=1) == labels[idx]))


def evaluate(graph: Graph, masks: SplitMasks, cfg: ModelConfig, params: ModelParams,
             adj: SparseCsr | None = None) -> tuple[float, float, float]:
    """Eval-mode accuracy on the train, validation and test nodes."""
    adj = normalize_adjacency(graph) if adj is None else adj
    logits = forward(graph, adj, cfg, params, training=False).logits.data
    return tuple(accuracy(logits, graph.labels, m) for m in (masks.train, masks.val, masks.test))


def _check_invariants(trace, epoch) -> list:
    problems = []
    if trace.codebank is not None:
        total = sum(st.filtered.data for st in trace.stages)
        err = float(np.max(np.abs(trace.codebank.data - total)))
        if err > 1e-10:
            problems.append(f"epoch {epoch}: codebank telescoping error {err:.3g}")
    for l, st in enumerate(trace.stages):
        if st.gamma is not None:
            g = st.gamma.data
            # exactly 1.0 is float rounding of a saturated sigmoid, counted separately
            if not (np.all(g > 0) and np.all(g <= 1)):
                problems.append(f"epoch {epoch}: stage {l} filter weight outside (0, 1)")
    return problems


def _saturation(trace, epoch) -> list:
    notes = []
    for l, st in enumerate(trace.stages):
        if st.gamma is not None:
            count = int(np.sum(st.gamma.data == 1.0))
            if count:
                notes.append({"epoch": epoch, "stage": l, "nodes": count})
    return notes


def train_once(graph: Graph, masks: SplitMasks, cfg: TrainConfig, seed: int,
               adj: SparseCsr | None = None) -> RunRecord:
    """Train one model from ``seed`` and keep the best-validation epoch (earliest on ties)."""
    masks.validate(graph.n)
    adj = normalize_adjacency(graph) if adj is None else adj
    mcfg = cfg.model
    params = init_params(mcfg, graph.feature_dim, graph.num_classes, seed)
    rng = np.random.default_rng([seed, 1])
    opt = AdamState()
    labels = graph.labels
    every = cfg.record_smoothness_every

    history, series, violations, saturation = [], [], [], []
    best_val, best_epoch, best_test, best_params = -1.0, 0, math.nan, params.copy()
    for epoch in range(1, cfg.epochs + 1):
        tape = Tape()
        trace = forward(graph, adj, mcfg, params, training=True, tape=tape, rng=rng)
        loss = masked_softmax_cross_entropy(trace.logits, labels, masks.train)
        value = float(loss.data[0, 0])
        if not math.isfinite(value) or value > DIVERGENCE_LIMIT:
            raise DivergenceError(epoch, value)
        grads = tape.backward(loss)
        named = {}
        for name, var in trace.variables.items():
            g = grads.get(var)
            if g is not None:
                named[name] = g
        adam_step(params.weights, named, opt, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps,
                  cfg.weight_decay)

        probe = every > 0 and epoch % every == 0
        ev = forward(graph, adj, mcfg, params, training=False, smoothness=probe)
        logits = ev.logits.data
        tr, va, te = (accuracy(logits, labels, m) for m in (masks.train, masks.val, masks.test))
        history.append({"epoch": epoch, "loss": value, "train_acc": tr, "val_acc": va,
                        "test_acc": te})
        if probe:
            series.append({"epoch": epoch, "davg": ev.davg()})
            violations += _check_invariants(ev, epoch)
            saturation += _saturation(ev, epoch)
        if va > best_val:
            best_val, best_epoch, best_test = va, epoch, te
            best_params = params.copy()

    final = forward(graph, adj, mcfg, best_params, training=False, smoothness=True)
    return RunRecord(
        seed=seed, variant=mcfg.canonical().variant, layers=mcfg.layers, epochs=history,
        best_val_epoch=best_epoch, best_val_acc=best_val, test_accuracy_at_best_val=best_test,
        layer_davg=final.davg(), davg_series=series, gamma_stats=final.gamma_stats(),
        label_leaking=mcfg.label_leaking, invariant_violations=violations,
        gamma_saturation=saturation, params=best_params,
    )


def _train_seed(args):
    graph, masks, cfg, seed = args
    try:
        return train_once(graph, masks, cfg, seed)
    except Exception as exc:  # re-raised with the seed attached
        raise RunError(seed, exc) from exc


def run_experiment(graph: Graph, cfg: TrainConfig, masks: SplitMasks | None = None,
                   jobs: int = 1, on_record=None) -> ExperimentSummary:
    """One training run per seed; mean and sample std of best-validation test accuracy.

    ``on_record`` is called with each finished RunRecord as soon as it is available,
    so callers can persist partial results before a later seed fails.
    """
    masks = make_split(graph, seed=cfg.split_seed) if masks is None else masks
    seeds = sorted(cfg.seeds)
    work = [(graph, masks, cfg, s) for s in seeds]
    records = []

    def done(record):
        records.append(record)
        log.info("seed %d: test_acc=%.4f (best val epoch %d)", record.seed,
                 record.test_accuracy_at_best_val, record.best_val_epoch)
        if on_record is not None:
            on_record(record)

    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_train_seed, item) for item in work]
            failure = None
            for fut in as_completed(futures):
                try:
                    done(fut.result())
                except RunError as exc:
                    if failure is None or exc.seed < failure.seed:
                        failure = exc
            if failure is not None:
                raise failure
    else:
        for item in work:
            done(_train_seed(item))
    return ExperimentSummary.from_records(records)


def depth_sweep(graph: Graph, base: TrainConfig, depths, masks: SplitMasks | None = None,
                jobs: int = 1) -> dict:
    """``run_experiment`` at each depth; returns ``{L: ExperimentSummary}``."""
    depths = list(depths)
    if not depths:
        raise ArgumentError("depth sweep needs at least one depth")
    out = {}
    for L in depths:
        cfg = TrainConfig(**{**asdict(base), "model": {**asdict(base.model), "layers": int(L)}})
        out[int(L)] = run_experiment(graph, cfg, masks, jobs)
    return out


def depth_curves(results: dict) -> list:
    """Accuracy-vs-depth and final-layer smoothness-vs-depth rows."""
    return [{"L": L, "test_acc": s.mean, "test_acc_std": s.std, "final_Davg": s.mean_final_davg}
            for L, s in sorted(results.items())]


# ----------------------------------------------------------------------------
# output files


def _atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_run_log(path, record: RunRecord, config: dict) -> Path:
    doc = {
        "version": __version__,
        "config": config,
        "epochs": record.epochs,
        "summary": {k: v for k, v in record.to_dict().items() if k != "epochs"},
    }
    _atomic_write(Path(path), json.dumps(doc, indent=1) + "\n")
    return Path(path)


def summary_rows(summary: ExperimentSummary, variant: str, layers: int) -> list:
    rows = [{"variant": variant, "L": layers, "seed": r.seed,
             "test_acc": r.test_accuracy_at_best_val, "best_val_epoch": r.best_val_epoch,
             "final_Davg": r.final_davg, "test_acc_std": ""} for r in summary.records]
    rows.append({"variant": variant, "L": layers, "seed": "aggregate", "test_acc": summary.mean,
                 "best_val_epoch": "", "final_Davg": summary.mean_final_davg,
                 "test_acc_std": summary.std})
    return rows


def format_csv(rows, columns) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\r\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row.get(k, "") for k in columns})
    return buf.getvalue()


def write_summary_csv(path, summary: ExperimentSummary, variant: str, layers: int) -> Path:
    _atomic_write(Path(path), format_csv(summary_rows(summary, variant, layers), SUMMARY_COLUMNS))
    return Path(path)
