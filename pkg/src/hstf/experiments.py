"""Evaluation harness: precision/recall/F-beta, the 70/30 proportioned split,
the statistics ablation, packet/flow size sweeps and the imbalance study.

Every run is deterministic under its seed.  Tables are emitted as CSV with
four decimal places so the outputs land plot-ready.
"""

from __future__ import annotations

import io
import csv
import time
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .features import EncodedFlow
from .http_flow import Flow, LABEL_MALICIOUS
from .model import HstfConfig, HstfModel, TrainHistory, predict_scores, train


class LengthMismatch(ValueError):
    pass


class InsufficientData(ValueError):
    pass


@dataclass
class Metrics:
    tp: int
    fp: int
    tn: int
    fn: int
    precision: float
    recall: float
    f_beta: float
    beta: float = 1.0
    precision_defined: bool = True
    recall_defined: bool = True
    f_defined: bool = True


def f_beta(precision: float, recall: float, beta: float = 1.0) -> float:
    """Weighted harmonic mean of precision and recall; F1 at beta=1.

    The undefined P=R=0 corner comes back as 0.0 (flagged in Metrics when it
    arises from a confusion matrix).
    """
    if not (0.0 <= precision <= 1.0 and 0.0 <= recall <= 1.0):
        raise ValueError("precision and recall must lie in [0,1]")
    denom = beta * beta * precision + recall
    if denom == 0.0:
        return 0.0
    return (1.0 + beta * beta) * precision * recall / denom


def compute_metrics(predictions: Sequence, labels: Sequence, beta: float = 1.0) -> Metrics:
    """Confusion counts and derived scores; positives are the malicious class."""
    if len(predictions) != len(labels):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(labels)} labels")
    if len(labels) == 0:
        raise LengthMismatch("empty inputs")
    pred = np.asarray([bool(p) for p in predictions])
    truth = np.asarray([bool(l) for l in labels])
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    tn = int(np.sum(~pred & ~truth))
    fn = int(np.sum(~pred & truth))
    p_def, r_def = tp + fp > 0, tp + fn > 0
    precision = tp / (tp + fp) if p_def else 0.0
    recall = tp / (tp + fn) if r_def else 0.0
    f_def = precision + recall > 0
    return Metrics(tp, fp, tn, fn, precision, recall,
                   f_beta(precision, recall, beta), beta,
                   precision_defined=p_def, recall_defined=r_def, f_defined=f_def)


@dataclass(frozen=True)
class ProportionSpec:
    """malicious:benign training ratio, e.g. ProportionSpec(3, 10)."""

    malicious: int
    benign: int
    seed: int | None = None

    def __post_init__(self):
        if self.malicious < 1 or self.benign < 1:
            raise ValueError("ratio parts must be >= 1")

    @classmethod
    def parse(cls, text: str, seed: int | None = None) -> "ProportionSpec":
        m, _, b = text.partition(":")
        return cls(int(m), int(b), seed)

    def __str__(self) -> str:
        return f"{self.malicious}:{self.benign}"


def _is_malicious(item) -> bool:
    if isinstance(item, Flow):
        return item.label == LABEL_MALICIOUS
    if isinstance(item, EncodedFlow):
        return bool(item.label)
    raise TypeError(f"expected Flow or EncodedFlow, got {type(item).__name__}")


def make_split(dataset: Sequence, spec: ProportionSpec, seed: int | None = None,
               test_benign: int | None = None):
    """70% of malicious plus ratio-matched benign for training; the remaining
    30% malicious plus a disjoint benign block for testing.

    test_benign defaults to min(50000, 40% of the benign pool).  Raises
    InsufficientData when the pool cannot honor the ratio.
    """
    if seed is None:
        seed = spec.seed if spec.seed is not None else 0
    rng = np.random.default_rng(seed)
    malicious = [x for x in dataset if _is_malicious(x)]
    benign = [x for x in dataset if not _is_malicious(x)]
    if not malicious or not benign:
        raise InsufficientData("need both classes to split")
    rng.shuffle(malicious)
    rng.shuffle(benign)

    m_train = round(0.7 * len(malicious))
    if m_train == 0 or m_train == len(malicious):
        raise InsufficientData(f"{len(malicious)} malicious flows cannot split 70/30")
    b_train = round(m_train * spec.benign / spec.malicious)
    if test_benign is None:
        test_benign = min(50_000, int(0.4 * len(benign)))
    if b_train + test_benign > len(benign):
        raise InsufficientData(
            f"ratio {spec} needs {b_train}+{test_benign} benign, pool has {len(benign)}")
    if test_benign == 0:
        raise InsufficientData("benign pool too small to form a test set")

    train_set = malicious[:m_train] + benign[:b_train]
    test_set = malicious[m_train:] + benign[len(benign) - test_benign:]
    rng.shuffle(train_set)
    rng.shuffle(test_set)
    return train_set, test_set


@dataclass
class EvalResult:
    metrics: Metrics
    train_time_s: float
    test_time_s: float
    history: TrainHistory
    stat_path_evals: int
    model: HstfModel | None = None


def train_eval(train_set, test_set, cfg: HstfConfig, threshold: float = 0.5,
               val_dataset=None, early_stop_f1: float | None = None,
               keep_model: bool = False, verbose: bool = False) -> EvalResult:
    """Train on one split and score the held-out set."""
    t0 = time.perf_counter()
    model, history = train(train_set, cfg, val_dataset=val_dataset,
                           early_stop_f1=early_stop_f1, verbose=verbose)
    train_time = time.perf_counter() - t0
    t0 = time.perf_counter()
    scores = predict_scores(model, test_set)
    test_time = time.perf_counter() - t0
    labels = [_is_malicious(x) for x in test_set]
    metrics = compute_metrics(scores >= threshold, labels)
    return EvalResult(metrics, train_time, test_time, history,
                      model.stat_path_evals, model if keep_model else None)


@dataclass
class AblationRun:
    seed: int
    enabled: EvalResult
    disabled: EvalResult


def run_ablation(dataset: Sequence, cfg: HstfConfig, repeats: int = 3,
                 spec: ProportionSpec = ProportionSpec(3, 10),
                 verbose: bool = False) -> list[AblationRun]:
    """Train twice per seed -- statistics gated off, then on -- on identical
    splits, and report both with wall-clock."""
    runs = []
    for r in range(repeats):
        seed = cfg.seed + r
        train_set, test_set = make_split(dataset, spec, seed=seed)
        disabled = train_eval(train_set, test_set,
                              replace(cfg, stat_gate=0.0, seed=seed), verbose=verbose)
        gate = cfg.stat_gate if cfg.stat_gate != 0.0 else 1.0
        enabled = train_eval(train_set, test_set,
                             replace(cfg, stat_gate=gate, seed=seed), verbose=verbose)
        runs.append(AblationRun(seed, enabled, disabled))
    return runs


def run_sweep(dataset: Sequence, axis: str, values: Sequence, cfg: HstfConfig,
              repeats: int = 1, spec: ProportionSpec = ProportionSpec(3, 10),
              verbose: bool = False) -> list[dict]:
    """One train/eval per axis value, the other knobs held fixed."""
    if axis not in ("packet_size", "flow_size"):
        raise ValueError(f"unknown sweep axis {axis!r}")
    if not values:
        raise ValueError("sweep needs at least one value")
    rows = []
    for value in values:
        results = []
        for r in range(repeats):
            seed = cfg.seed + r
            run_cfg = replace(cfg, seed=seed, **{axis: int(value)})
            train_set, test_set = make_split(dataset, spec, seed=seed)
            results.append(train_eval(train_set, test_set, run_cfg, verbose=verbose))
        rows.append(_mean_row(axis, value, results))
    return rows


def run_imbalance(dataset: Sequence, specs: Sequence[ProportionSpec],
                  cfg: HstfConfig, repeats: int = 1,
                  verbose: bool = False) -> tuple[list[dict], list[dict]]:
    """Metrics per training proportion plus per-epoch recall curves.

    Curves track recall on the held-out test set after every epoch, averaged
    over repeats.
    """
    rows, curves = [], []
    for spec in specs:
        results = []
        for r in range(repeats):
            seed = cfg.seed + r
            train_set, test_set = make_split(dataset, spec, seed=seed)
            results.append(train_eval(train_set, test_set, replace(cfg, seed=seed),
                                      val_dataset=test_set, verbose=verbose))
        rows.append(_mean_row("proportion", str(spec), results))
        epochs = max(len(res.history) for res in results)
        for epoch in range(epochs):
            recalls = [res.history.recalls[epoch] for res in results
                       if epoch < len(res.history)]
            curves.append({"proportion": str(spec), "epoch": epoch + 1,
                           "recall": float(np.mean(recalls))})
    return rows, curves


def _mean_row(axis: str, value, results: list[EvalResult]) -> dict:
    return {axis: value,
            "precision": float(np.mean([r.metrics.precision for r in results])),
            "recall": float(np.mean([r.metrics.recall for r in results])),
            "f1": float(np.mean([r.metrics.f_beta for r in results])),
            "train_time_s": float(np.mean([r.train_time_s for r in results])),
            "test_time_s": float(np.mean([r.test_time_s for r in results]))}


def metrics_table_csv(rows: list[dict]) -> str:
    """CSV with the first column named after the swept axis; floats at 4dp."""
    if not rows:
        return ""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    keys = list(rows[0].keys())
    writer.writerow(keys)
    for row in rows:
        writer.writerow([_fmt(row[k]) for k in keys])
    return out.getvalue()


def curves_csv(curves: list[dict]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["proportion", "epoch", "recall"])
    for c in curves:
        writer.writerow([c["proportion"], c["epoch"], _fmt(c["recall"])])
    return out.getvalue()


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.4f}"
    return value
