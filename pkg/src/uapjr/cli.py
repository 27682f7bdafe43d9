"""``uapjr`` command line: train / attack / eval / jacsim / sweep / reproduce."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import __version__
from . import experiments as ex
from .attacks import (AttackConfig, Perturbation, epsilon_sweep, evaluate_tsr, evaluate_uer,
                      sgd_uap_targeted, sgd_uap_untargeted, svd_uap)
from .config import ExperimentConfig, read_kv
from .data import balanced_subset, load_dataset
from .errors import DivergenceError
from .jacobian import pairwise_similarity
from .linalg import RngStream
from .net import load_checkpoint
from .training import TrainConfig, UATConfig, evaluate_clean

log = logging.getLogger("uapjr")


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    text = text.strip()
    return [float(t) for t in text.split(",") if t.strip()] if text else []


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common")
    g.add_argument("--config", help="key = value file; CLI flags override it")
    g.add_argument("--dataset", choices=["mnist", "fashion-mnist"])
    g.add_argument("--data-dir", help="dataset root (falls back to $UAP_DATA_DIR)")
    g.add_argument("--seed", type=int)
    g.add_argument("--threads", type=int, help="torch intra-op threads; 1 = deterministic")
    g.add_argument("--out", help="output directory")
    g.add_argument("--json", action="store_true", default=None, help="write JSON instead of CSV")
    g.add_argument("--checkpoint")
    g.add_argument("--runs-dir")

    train_opts = argparse.ArgumentParser(add_help=False)
    t = train_opts.add_argument_group("training")
    t.add_argument("--lambda-jr", type=float)
    t.add_argument("--jr-mode", choices=["exact", "proj"])
    t.add_argument("--n-proj", type=int)
    t.add_argument("--uat-eps", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--optimizer", choices=["adam", "sgd"])

    attack_opts = argparse.ArgumentParser(add_help=False)
    a = attack_opts.add_argument_group("attack")
    a.add_argument("--eps", type=float)
    a.add_argument("--eps-grid", type=_floats, help="comma-separated, ascending")
    a.add_argument("--iters", type=int)
    a.add_argument("--step-size", type=float)
    a.add_argument("--target", type=int)
    a.add_argument("--attack", choices=["sgd", "svd"])
    a.add_argument("--craft-split", choices=["train", "test"])
    a.add_argument("--no-clamp", dest="clamp", action="store_false", default=None)
    a.add_argument("--n-samples", type=int, help="inputs stacked by --attack svd")

    shared = [common, train_opts, attack_opts]
    p = argparse.ArgumentParser(prog="uapjr", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("train", parents=shared, help="train a LeNet (standard, JR or UAT)")
    sp.add_argument("--batch-size", type=int)

    sp = sub.add_parser("attack", parents=shared, help="craft a UAP against a checkpoint")
    sp.add_argument("--batch-size", type=int)

    sp = sub.add_parser("eval", parents=shared, help="clean accuracy, or UER/TSR of a saved UAP")
    sp.add_argument("--delta", help="perturbation file written by 'attack'")

    sp = sub.add_parser("jacsim", parents=shared, help="pairwise Jacobian cosine-similarity histogram")
    sp.add_argument("--per-class", type=int)
    sp.add_argument("--pair-mode", choices=["ordered", "all", "unique"])
    sp.add_argument("--bin-width", type=float)

    sp = sub.add_parser("sweep", parents=shared, help="metric over the lambda / epsilon grids")
    sp.add_argument("--metric", choices=["accuracy", "uer", "tsr"])
    sp.add_argument("--lambda-grid", type=_floats)
    sp.add_argument("--seeds", type=_ints, help="comma-separated model/attack seeds")
    sp.add_argument("--train-missing", action="store_true")
    sp.add_argument("--batch-size", type=int)

    sp = sub.add_parser("reproduce", parents=shared, help="Table 1 grid against reference values")
    sp.add_argument("--seeds", type=_ints)
    sp.add_argument("--train-missing", action="store_true")
    sp.add_argument("--datasets", nargs="+", choices=["mnist", "fashion-mnist"])
    return p


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    file_values = read_kv(args.config) if args.config else {}
    cli = {k: v for k, v in vars(args).items() if k in ExperimentConfig.keys()}
    cli["command"] = args.command
    if args.command == "reproduce" and cli.get("seeds") is None and "seeds" not in file_values:
        cli["seeds"] = [0, 1, 2]
    elif args.command == "sweep" and cli.get("seeds") is None and "seeds" not in file_values:
        cli["seeds"] = [cli.get("seed") if cli.get("seed") is not None else file_values.get("seed", 0)]
    return ExperimentConfig.merge({}, file_values, cli)


def _data(cfg: ExperimentConfig, split: str):
    try:
        return load_dataset(cfg.dataset, split, cfg.data_dir)
    except FileNotFoundError as e:
        raise UsageError(f"{e} (set --data-dir or UAP_DATA_DIR)") from None


def _checkpoint(cfg: ExperimentConfig):
    if not cfg.checkpoint:
        raise UsageError("--checkpoint is required")
    if not Path(cfg.checkpoint).exists():
        raise UsageError(f"--checkpoint {cfg.checkpoint} does not exist")
    net, meta = load_checkpoint(cfg.checkpoint)
    cfg.checkpoint_sha256 = meta["file_sha256"]
    return net, meta


def _emit(cfg: ExperimentConfig, out: Path, name: str, columns, rows) -> Path:
    if cfg.json:
        path = out / f"{name}.json"
        out.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({**cfg.provenance(), "rows": rows}, indent=2, sort_keys=True) + "\n")
        return path
    return ex.write_csv(out / f"{name}.csv", columns, rows, cfg.hash)


def cmd_train(cfg: ExperimentConfig) -> int:
    train_set, test_set = _data(cfg, "train"), _data(cfg, "test")
    spec = ex.ModelSpec(cfg.dataset, cfg.seed, cfg.lambda_jr, cfg.uat_eps, uat_clamp=cfg.clamp)
    tcfg = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size or 100, optimizer=cfg.optimizer,
                       lr=cfg.lr, lambda_jr=cfg.lambda_jr, jr_mode=cfg.jr_mode, n_proj=cfg.n_proj,
                       seed=cfg.seed, uat=UATConfig(cfg.uat_eps) if cfg.uat_eps is not None else None,
                       clamp_inputs=cfg.clamp)
    out = Path(cfg.out) if cfg.out else ex.model_dir(cfg.runs_dir, spec)
    try:
        _, info = ex.train_and_save(spec, out, train_set, test_set, tcfg)
    except DivergenceError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return 3
    print(json.dumps({"checkpoint": str(out / "checkpoint.npz"), **info}))
    return 0


ATTACK_COLUMNS = ["dataset", "attack", "epsilon", "target", "metric", "value", "seed", "perturbation"]


def cmd_attack(cfg: ExperimentConfig) -> int:
    net, meta = _checkpoint(cfg)
    craft, test_set = _data(cfg, cfg.craft_split), _data(cfg, "test")
    acfg = AttackConfig(epsilon=cfg.eps, iterations=cfg.iters, batch_size=cfg.batch_size or 200,
                        step_size=cfg.step_size, target_class=cfg.target, seed=cfg.seed,
                        craft_split=cfg.craft_split, clamp_inputs=cfg.clamp)
    if cfg.attack == "svd":
        if cfg.target is not None:
            raise UsageError("--target is not supported with --attack svd")
        rng = RngStream(cfg.seed)
        idx = rng.child("samples").permutation(len(craft))[:cfg.n_samples]
        pert = svd_uap(net, craft.subset(idx), cfg.eps, clamp_inputs=cfg.clamp, rng=rng.child("power"))
    elif cfg.target is None:
        pert = sgd_uap_untargeted(net, craft, acfg)
    else:
        pert = sgd_uap_targeted(net, craft, acfg)
    pert.provenance.update({"config_hash": cfg.hash, "checkpoint_sha256": meta["file_sha256"],
                            "clamp_inputs": cfg.clamp})
    out = Path(cfg.out or "runs/attacks")
    stem = f"uap-{cfg.dataset}-{cfg.attack}-eps{cfg.eps:g}" + (f"-t{cfg.target}" if cfg.target is not None else "") \
        + f"-s{cfg.seed}"
    path = pert.save(out / f"{stem}.bin")
    pert.to_image(out / f"{stem}.png")
    if cfg.target is None:
        metric, value = "uer", evaluate_uer(net, test_set, pert.delta, cfg.clamp)
    else:
        metric, value = "tsr", evaluate_tsr(net, test_set, pert.delta, cfg.target, cfg.clamp)
    row = {"dataset": cfg.dataset, "attack": cfg.attack, "epsilon": cfg.eps,
           "target": "" if cfg.target is None else cfg.target, "metric": metric, "value": value,
           "seed": cfg.seed, "perturbation": path.name}
    _emit(cfg, out, stem, ATTACK_COLUMNS, [row])
    print(json.dumps(row))
    return 0


def cmd_eval(cfg: ExperimentConfig, delta_path: str | None) -> int:
    net, _ = _checkpoint(cfg)
    test_set = _data(cfg, "test")
    result = {"dataset": cfg.dataset, "clean_accuracy": evaluate_clean(net, test_set)}
    if delta_path:
        pert = Perturbation.load(delta_path)
        if cfg.target is None:
            result["uer"] = evaluate_uer(net, test_set, pert.delta, cfg.clamp)
        else:
            result["tsr"] = evaluate_tsr(net, test_set, pert.delta, cfg.target, cfg.clamp)
    print(json.dumps({**result, **cfg.provenance()}))
    return 0


JACSIM_COLUMNS = ["bin_left", "bin_right", "count"]


def cmd_jacsim(cfg: ExperimentConfig) -> int:
    net, _ = _checkpoint(cfg)
    test_set = _data(cfg, "test")
    sub = balanced_subset(test_set, cfg.per_class, RngStream(cfg.seed).child("similarity"))
    hist = pairwise_similarity(net.to(torch.float64), sub.images, mode=cfg.pair_mode, bin_width=cfg.bin_width)
    out = Path(cfg.out or "runs/jacsim")
    rows = [dict(zip(JACSIM_COLUMNS, r)) for r in hist.rows()]
    summary = hist.summary()
    if cfg.json:
        out.mkdir(parents=True, exist_ok=True)
        path = out / "jacsim.json"
        path.write_text(json.dumps({**cfg.provenance(), "summary": summary, "histogram": rows},
                                   indent=2, sort_keys=True) + "\n")
    else:
        path = ex.write_csv(out / "jacsim.csv", JACSIM_COLUMNS, rows, cfg.hash)
        with open(path, "a") as fh:
            fh.write("# summary " + " ".join(f"{k}={summary[k]!r}" if isinstance(summary[k], float)
                                              else f"{k}={summary[k]}" for k in
                                              ("median", "mean", "count", "degenerate_count")) + "\n")
    print(json.dumps({"output": str(path), **summary}))
    return 0


SWEEP_COLUMNS = ["dataset", "lambda_jr", "epsilon", "metric", "value", "sd", "seed"]


def cmd_sweep(cfg: ExperimentConfig, train_missing: bool) -> int:
    if not cfg.lambda_grid:
        raise UsageError("empty --lambda-grid")
    if cfg.metric != "accuracy" and not cfg.eps_grid:
        raise UsageError("empty --eps-grid")
    test_set = _data(cfg, "test")
    craft = _data(cfg, cfg.craft_split) if cfg.metric != "accuracy" else None
    rows = []
    for lam in cfg.lambda_grid:
        for seed in cfg.seeds:
            spec = ex.ModelSpec(cfg.dataset, seed, lam)
            try:
                net = ex.ensure_model(spec, cfg.runs_dir, cfg.data_dir, train_missing, cfg.epochs)
            except ex.MissingCheckpoint as e:
                raise UsageError(str(e)) from None
            if cfg.metric == "accuracy":
                rows.append({"dataset": cfg.dataset, "lambda_jr": lam, "epsilon": "", "metric": "clean_acc",
                             "value": evaluate_clean(net, test_set), "sd": 0.0, "seed": seed})
                continue
            base = AttackConfig(epsilon=0.0, iterations=cfg.iters, batch_size=cfg.batch_size or 200,
                                step_size=cfg.step_size, seed=seed, clamp_inputs=cfg.clamp)
            kind = "targeted" if cfg.metric == "tsr" else ("svd" if cfg.attack == "svd" else "untargeted")
            for r in epsilon_sweep(net, craft, test_set, cfg.eps_grid, kind, base, cfg.n_samples):
                rows.append({"dataset": cfg.dataset, "lambda_jr": lam, "epsilon": r["epsilon"],
                             "metric": r["metric"], "value": r["value"], "sd": r["sd"], "seed": seed})
    out = Path(cfg.out or "runs/sweeps")
    path = _emit(cfg, out, f"sweep-{cfg.dataset}-{cfg.metric}", SWEEP_COLUMNS, rows)
    print(json.dumps({"output": str(path), "rows": len(rows)}))
    return 0


def cmd_reproduce(cfg: ExperimentConfig, datasets, train_missing: bool) -> int:
    cache = ex.ResultCache(Path(cfg.runs_dir) / "cache.json")
    try:
        results = ex.collect_table1(datasets, cfg.seeds, cfg.runs_dir, cfg.data_dir, cache, train_missing,
                                    cfg.epochs)
    except ex.MissingCheckpoint as e:
        raise UsageError(str(e)) from None
    rows, checks = ex.table1_report(results)
    out = Path(cfg.out or cfg.runs_dir)
    _emit(cfg, out, "table1", ex.TABLE1_COLUMNS, rows)
    text = ex.render_table1(rows, checks)
    (out / "table1.txt").write_text(text)
    print(text, end="")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
        torch.set_num_threads(max(1, cfg.threads))
        if cfg.eps_grid and any(b < a for a, b in zip(cfg.eps_grid, cfg.eps_grid[1:])):
            raise UsageError("--eps-grid must be ascending")
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "attack":
            return cmd_attack(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.delta)
        if args.command == "jacsim":
            return cmd_jacsim(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.train_missing)
        return cmd_reproduce(cfg, args.datasets or ["mnist", "fashion-mnist"], args.train_missing)
    except (UsageError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
