"""Orchestration shared by the CLI and the acceptance suite.

Run directory layout (``runs_dir``)::

    <dataset>/<model>-s<seed>/checkpoint.npz   model = standard | jr<lambda> | uat<eps>
    <dataset>/<model>-s<seed>/metrics.csv      per-epoch training log
    <dataset>/<model>-s<seed>/config.txt       key = value echo of the training config
    cache.json                                 memoised evaluation results
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import AttackConfig, evaluate_uer, sgd_uap_untargeted, targeted_tsrs
from .config import config_hash, write_kv
from .data import Dataset, balanced_subset, load_dataset
from .jacobian import pairwise_similarity
from .linalg import RngStream
from .net import Network, load_checkpoint, save_checkpoint
from .training import TrainConfig, UATConfig, evaluate_clean, train

log = logging.getLogger(__name__)

TABLE1_EPS = {"mnist": 0.2, "fashion-mnist": 0.15}
JR_LAMBDA = 0.05
# Reproduction protocol: perturbed inputs are not clipped to [0, 1], for the
# UAT adversary during training as well as for crafting and evaluation.
TABLE1_CLAMP = False
# reference values for the Table 1 grid, in percent
REFERENCE_TABLE1 = {
    "mnist": {
        "standard": {"test_error": 0.92, "uer": 85.88, "tsr": 85.94},
        "uat": {"test_error": 1.81, "uer": 27.49, "tsr": 24.05},
        "jr": {"test_error": 0.90, "uer": 20.47, "tsr": 21.57},
    },
    "fashion-mnist": {
        "standard": {"test_error": 9.16, "uer": 86.63, "tsr": 86.33},
        "uat": {"test_error": 16.66, "uer": 34.10, "tsr": 26.64},
        "jr": {"test_error": 9.15, "uer": 29.96, "tsr": 30.59},
    },
}
REFERENCE_SIMILARITY_MEDIANS = {"mnist": {"standard": 0.58, "jr": 0.18},
                            "fashion-mnist": {"standard": 0.46, "jr": 0.11}}


@dataclass(frozen=True)
class ModelSpec:
    dataset: str
    seed: int = 0
    lambda_jr: float = 0.0
    uat_eps: float | None = None
    uat_clamp: bool = TABLE1_CLAMP

    @classmethod
    def table1(cls, dataset: str, kind: str, seed: int) -> "ModelSpec":
        if kind == "standard":
            return cls(dataset, seed)
        if kind == "jr":
            return cls(dataset, seed, lambda_jr=JR_LAMBDA)
        if kind == "uat":
            return cls(dataset, seed, uat_eps=TABLE1_EPS[dataset])
        raise ValueError(f"unknown model kind {kind!r}")

    @property
    def name(self) -> str:
        if self.uat_eps is not None:
            return f"uat{self.uat_eps:g}" + (f"-jr{self.lambda_jr:g}" if self.lambda_jr else "")
        return f"jr{self.lambda_jr:g}" if self.lambda_jr else "standard"

    def train_config(self, epochs: int = 20, **overrides) -> TrainConfig:
        uat = UATConfig(self.uat_eps) if self.uat_eps is not None else None
        overrides.setdefault("clamp_inputs", self.uat_clamp)
        return TrainConfig(epochs=epochs, lambda_jr=self.lambda_jr, seed=self.seed, uat=uat, **overrides)

    def train_command(self, runs_dir) -> str:
        cmd = f"uapjr train --dataset {self.dataset} --seed {self.seed}"
        if self.lambda_jr:
            cmd += f" --lambda-jr {self.lambda_jr:g}"
        if self.uat_eps is not None:
            cmd += f" --uat-eps {self.uat_eps:g}" + ("" if self.uat_clamp else " --no-clamp")
        return cmd + f" --out {model_dir(runs_dir, self)}"


def model_dir(runs_dir, spec: ModelSpec) -> Path:
    return Path(runs_dir) / spec.dataset / f"{spec.name}-s{spec.seed}"


def provenance_line(hash_: str) -> str:
    return f"# uapjr {__version__} config_hash={hash_}"


def write_csv(path, columns: list[str], rows: list[dict], hash_: str) -> Path:
    """CSV with a leading ``# ...`` provenance line; floats use repr for byte-stable reruns."""
    buf = io.StringIO()
    buf.write(provenance_line(hash_) + "\n")
    w = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())
    return path


def read_csv(path) -> tuple[dict, list[dict]]:
    """Rows of a CSV written by :func:`write_csv`, plus its ``# key=value`` header fields."""
    meta, lines = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            for tok in line[1:].split():
                if "=" in tok:
                    k, v = tok.split("=", 1)
                    meta[k] = v
        else:
            lines.append(line)
    return meta, list(csv.DictReader(lines))


TRAIN_COLUMNS = ["epoch", "train_loss", "ce_loss", "jr_term", "clean_acc"]


def train_and_save(spec: ModelSpec, out_dir, train_set: Dataset, test_set: Dataset,
                   config: TrainConfig | None = None) -> tuple[Network, dict]:
    config = config if config is not None else spec.train_config()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    chash = config.hash
    write_kv(out_dir / "config.txt", {**_flatten(config.to_dict()), "dataset": spec.dataset,
                                      "config_hash": chash, "tool_version": __version__})
    rows = []

    def on_epoch(row):
        rows.append(row)
        write_csv(out_dir / "metrics.csv", TRAIN_COLUMNS, rows, chash)

    model = train(config, train_set, test_set, on_epoch=on_epoch)
    write_csv(out_dir / "metrics.csv", TRAIN_COLUMNS, model.history, chash)
    save_checkpoint(out_dir / "checkpoint.npz", model.network, chash,
                    extra={"dataset": spec.dataset, "train_config": config.to_dict(),
                           "clean_accuracy": model.clean_accuracy})
    return model.network, {"config_hash": chash, "clean_accuracy": model.clean_accuracy}


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[prefix + k] = v
    return out


class MissingCheckpoint(FileNotFoundError):
    pass


def ensure_model(spec: ModelSpec, runs_dir, data_dir=None, train_missing: bool = False,
                 epochs: int = 20) -> Network:
    ckpt = model_dir(runs_dir, spec) / "checkpoint.npz"
    if ckpt.exists():
        return load_checkpoint(ckpt)[0]
    if not train_missing:
        raise MissingCheckpoint(f"missing {ckpt}; create it with:\n  {spec.train_command(runs_dir)}")
    log.info("training %s", model_dir(runs_dir, spec))
    net, _ = train_and_save(spec, model_dir(runs_dir, spec), load_dataset(spec.dataset, "train", data_dir),
                            load_dataset(spec.dataset, "test", data_dir), spec.train_config(epochs))
    return net


class ResultCache:
    """JSON memo of evaluation results keyed by model parameters and evaluation settings."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.data = {}
        if self.path is not None and self.path.exists():
            self.data = json.loads(self.path.read_text())

    def key(self, net: Network, what: str, settings: dict) -> str:
        return config_hash({"params": net.parameter_hash(), "what": what, "settings": settings,
                            "version": __version__})

    def get_or_compute(self, net: Network, what: str, settings: dict, fn):
        k = self.key(net, what, settings)
        if k not in self.data:
            self.data[k] = fn()
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                self.path.write_text(json.dumps(self.data, indent=1, sort_keys=True))
        return self.data[k]


def table1_metrics(net: Network, craft: Dataset, test_set: Dataset, epsilon: float, seed: int = 0,
                   cache: ResultCache | None = None, clamp: bool = True) -> dict:
    """Test error, untargeted UER and mean/sd per-class TSR, all in percent."""
    cache = cache if cache is not None else ResultCache()
    base = AttackConfig(epsilon=epsilon, seed=seed, clamp_inputs=clamp)
    settings = {"dataset": test_set.name, "epsilon": epsilon, "seed": seed, "clamp": clamp,
                "attack": {k: v for k, v in vars(base).items()}}

    def compute():
        acc = evaluate_clean(net, test_set)
        pert = sgd_uap_untargeted(net, craft, base)
        uer = evaluate_uer(net, test_set, pert.delta, clamp)
        tsrs = targeted_tsrs(net, craft, test_set, base)
        return {"test_error": 100 * (1 - acc), "uer": 100 * uer, "tsr": 100 * float(np.mean(tsrs)),
                "tsr_sd": 100 * float(np.std(tsrs)), "tsr_per_class": [100 * t for t in tsrs]}

    return cache.get_or_compute(net, "table1", settings, compute)


def uer_at(net: Network, craft: Dataset, test_set: Dataset, epsilon: float, seed: int = 0,
           cache: ResultCache | None = None, clamp: bool = True) -> float:
    cache = cache if cache is not None else ResultCache()
    cfg = AttackConfig(epsilon=epsilon, seed=seed, clamp_inputs=clamp)

    def compute():
        return evaluate_uer(net, test_set, sgd_uap_untargeted(net, craft, cfg).delta, clamp)

    return cache.get_or_compute(net, "uer", {"dataset": test_set.name, **vars(cfg)}, compute)


def similarity_summary(net: Network, test_set: Dataset, seed: int = 0, per_class: int = 100,
                       mode: str = "ordered", cache: ResultCache | None = None) -> dict:
    cache = cache if cache is not None else ResultCache()

    def compute():
        sub = balanced_subset(test_set, per_class, RngStream(seed).child("similarity"))
        return pairwise_similarity(net, sub.images, mode=mode).summary()

    return cache.get_or_compute(net, "similarity", {"dataset": test_set.name, "seed": seed,
                                                     "per_class": per_class, "mode": mode}, compute)


def median(values) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))


TABLE1_KINDS = ("standard", "uat", "jr")
TABLE1_METRICS = ("test_error", "uer", "tsr")
TABLE1_COLUMNS = ["dataset", "model", "metric", "value", "reference", "per_seed", "criteria", "status"]


def collect_table1(datasets, seeds, runs_dir, data_dir=None, cache: ResultCache | None = None,
                   train_missing: bool = False, epochs: int = 20) -> dict:
    """``{dataset: {kind: [per-seed table1_metrics]}}`` under the reproduction protocol."""
    results = {}
    for ds in datasets:
        nets = {(kind, seed): ensure_model(ModelSpec.table1(ds, kind, seed), runs_dir, data_dir,
                                           train_missing, epochs)
                for kind in TABLE1_KINDS for seed in seeds}
        craft, test_set = load_dataset(ds, "train", data_dir), load_dataset(ds, "test", data_dir)
        results[ds] = {kind: [table1_metrics(nets[kind, s], craft, test_set, TABLE1_EPS[ds], s, cache,
                                             clamp=TABLE1_CLAMP) for s in seeds]
                       for kind in TABLE1_KINDS}
    return results


def table1_checks(med: dict) -> list[dict]:
    """Quantitative thresholds on the seed-median grid ``med[dataset][kind][metric]``."""
    checks = []

    def add(cid, desc, cells, ok):
        checks.append({"id": cid, "description": desc, "cells": cells, "passed": bool(ok)})

    for ds, max_err in (("mnist", 100 - 98.6), ("fashion-mnist", 100 - 89.5)):
        if ds not in med:
            continue
        m = med[ds]
        add("1", f"{ds} standard clean accuracy >= {100 - max_err:.1f}%", [(ds, "standard", "test_error")],
            m["standard"]["test_error"] <= max_err)
        add("2", f"{ds} JR clean accuracy within 0.5 points of standard",
            [(ds, "jr", "test_error")], abs(m["jr"]["test_error"] - m["standard"]["test_error"]) <= 0.5)
        std_err = m["standard"]["test_error"]
        factor = m["uat"]["test_error"] / std_err if std_err > 0 else float("inf")
        add("6", f"{ds} UAT test error / standard in [1.5, 3] (got {factor:.2f})",
            [(ds, "uat", "test_error")], 1.5 <= factor <= 3.0)
    if "mnist" in med:
        m = med["mnist"]
        add("3", "mnist standard UER >= 70", [("mnist", "standard", "uer")], m["standard"]["uer"] >= 70)
        add("3", "mnist JR UER <= 35", [("mnist", "jr", "uer")], m["jr"]["uer"] <= 35)
        ratio = m["standard"]["uer"] / m["jr"]["uer"] if m["jr"]["uer"] > 0 else float("inf")
        add("3", f"mnist standard/JR UER ratio >= 2 (got {ratio:.2f})",
            [("mnist", "standard", "uer"), ("mnist", "jr", "uer")], ratio >= 2)
        add("5", "mnist standard TSR >= 70", [("mnist", "standard", "tsr")], m["standard"]["tsr"] >= 70)
        add("5", "mnist JR TSR <= 35", [("mnist", "jr", "tsr")], m["jr"]["tsr"] <= 35)
        add("6", "mnist JR UER <= UAT UER + 5", [("mnist", "jr", "uer"), ("mnist", "uat", "uer")],
            m["jr"]["uer"] <= m["uat"]["uer"] + 5)
    if "fashion-mnist" in med:
        m = med["fashion-mnist"]
        add("4", "fashion-mnist standard UER >= 75", [("fashion-mnist", "standard", "uer")],
            m["standard"]["uer"] >= 75)
        add("4", "fashion-mnist JR UER <= 45", [("fashion-mnist", "jr", "uer")], m["jr"]["uer"] <= 45)
    return checks


def table1_medians(results: dict) -> dict:
    return {ds: {kind: {m: median([r[m] for r in runs]) for m in TABLE1_METRICS}
                 for kind, runs in by_kind.items()} for ds, by_kind in results.items()}


def table1_report(results: dict) -> tuple[list[dict], list[dict]]:
    """Grid rows (seed medians next to reference values) and the threshold checks."""
    med = table1_medians(results)
    checks = table1_checks(med)
    rows = []
    for ds, by_kind in results.items():
        for kind in TABLE1_KINDS:
            for metric in TABLE1_METRICS:
                cell = (ds, kind, metric)
                mine = [c for c in checks if cell in c["cells"]]
                status = "" if not mine else ("pass" if all(c["passed"] for c in mine) else "FAIL")
                rows.append({"dataset": ds, "model": kind, "metric": metric, "value": med[ds][kind][metric],
                             "reference": REFERENCE_TABLE1[ds][kind][metric],
                             "per_seed": ";".join(f"{r[metric]:.2f}" for r in by_kind[kind]),
                             "criteria": ";".join(sorted({c["id"] for c in mine})), "status": status})
    return rows, checks


def render_table1(rows: list[dict], checks: list[dict]) -> str:
    """Aligned text: one line per grid cell, then one line per check."""
    head = f"{'dataset':<14} {'model':<9} {'metric':<11} {'ours':>7} {'ref':>7}  status"
    lines = ["Table 1 reproduction (percent, median over seeds)", head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['dataset']:<14} {r['model']:<9} {r['metric']:<11} {r['value']:7.2f} "
                     f"{r['reference']:7.2f}  {r['status']}")
    lines.append("")
    for c in checks:
        lines.append(f"[{'PASS' if c['passed'] else 'FAIL'}] criterion {c['id']}: {c['description']}")
    return "\n".join(lines) + "\n"
