"""Command-line entry point: generate, train, eval, gradcheck, export-weights.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .graph import (DatasetError, GraphError, SyntheticConfig, generate_synthetic, load_graph,
                    save_graph, split_labels, synthetic_metapaths)
from .model import ModelConfig
from .trainer import (ABLATIONS, TrainConfig, Trainer, TrainingError, load_checkpoint, save_checkpoint,
                      write_metrics_csv)

log = logging.getLogger("meow")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _check_keys(d: dict, allowed, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


def _fields(cls):
    return [f.name for f in dataclasses.fields(cls)]


@dataclass
class EvalConfig:
    per_class: list = field(default_factory=lambda: [20, 40, 60])
    n_val: int = 0
    n_test: Optional[int] = None


@dataclass
class RunConfig:
    seed: int = 0
    dataset: Optional[str] = None
    synthetic: Optional[dict] = None
    metapaths: Optional[list] = None
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    output: Optional[str] = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _check_keys(d, _fields(cls), "config")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self):
        if self.dataset is not None and self.synthetic is not None:
            raise ConfigError("config: give either 'dataset' or 'synthetic', not both")
        train = dict(self.train or {})
        _check_keys(train, [f for f in _fields(TrainConfig) if f != "seed"], "train")
        if "model" in train:
            _check_keys(train["model"], _fields(ModelConfig), "train.model")
        _check_keys(self.eval or {}, _fields(EvalConfig), "eval")
        if self.synthetic is not None:
            try:
                SyntheticConfig.from_dict(self.synthetic).validate()
            except (GraphError, TypeError) as exc:
                raise ConfigError(f"synthetic: {exc}") from None
        try:
            self.train_config()
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"train: {exc}") from None

    def train_config(self) -> TrainConfig:
        d = dict(self.train or {})
        model = ModelConfig(**d.pop("model", {}))
        return TrainConfig(seed=self.seed, model=model, **d)

    def eval_config(self) -> EvalConfig:
        return EvalConfig(**(self.eval or {}))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    text = p.read_text(encoding="utf-8")
    try:
        data = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{p}: cannot parse: {exc}") from None
    return RunConfig.from_dict(data or {})


def resolve_graph(cfg: RunConfig):
    """(graph, metapaths, dataset name) of a run config."""
    if cfg.dataset is not None:
        if not Path(cfg.dataset).exists():
            raise ConfigError(f"dataset not found: {cfg.dataset}")
        graph = load_graph(cfg.dataset)
        if not cfg.metapaths:
            raise ConfigError("config: 'metapaths' is required with a dataset")
        return graph, list(cfg.metapaths), Path(cfg.dataset).name
    syn = SyntheticConfig.from_dict(cfg.synthetic or {})
    graph = generate_synthetic(syn, cfg.seed)
    return graph, list(cfg.metapaths or synthetic_metapaths(syn)), "synthetic"


@contextmanager
def atomic_output_dir(out, force: bool):
    """Yield a scratch directory that is renamed onto ``out`` on success."""
    out = Path(out)
    if out.exists() and not force:
        raise ConfigError(f"output directory {out} exists; pass --force to overwrite")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.parent / f".{out.name}.tmp-{os.getpid()}"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        shutil.rmtree(out)
    os.replace(tmp, out)


# ---------------------------------------------------------------------------
# embeddings I/O and evaluation


def write_embeddings(path, Z: np.ndarray):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["node_id"] + [f"z{k}" for k in range(Z.shape[1])])
        for i, row in enumerate(Z):
            out.writerow([i] + [repr(float(v)) for v in row])


def read_embeddings(path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"embeddings file not found: {p}")
    with open(p, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "node_id":
        raise ConfigError(f"{p}: missing header")
    ids = np.array([int(r[0]) for r in rows[1:]])
    Z = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)
    if not np.array_equal(ids, np.arange(len(ids))):
        raise ConfigError(f"{p}: node ids must be 0..n-1 in order")
    return Z


def evaluate_embeddings(Z: np.ndarray, graph, ecfg: EvalConfig, seed: int, dataset: str) -> list:
    """Rows (dataset, split, seed, metric, value) for every feasible split plus clustering."""
    from .evaluation import clustering_eval, linear_probe

    if graph.labels is None:
        raise ConfigError("dataset has no labels to evaluate against")
    if Z.shape[0] != graph.num_targets:
        raise ValueError(f"dimension mismatch: {Z.shape[0]} embeddings for {graph.num_targets} target nodes")
    rows = []
    smallest = np.bincount(graph.labels).min()
    for per in ecfg.per_class:
        if per >= smallest:
            log.warning("skipping split %d: a class has only %d nodes", per, smallest)
            continue
        split = split_labels(graph, per, ecfg.n_val, ecfg.n_test, seed)
        res = linear_probe(Z, graph.labels, split, seed)
        rows += [(dataset, per, seed, "macro_f1", res.macro_f1), (dataset, per, seed, "micro_f1", res.micro_f1),
                 (dataset, per, seed, "auc", res.auc)]
    ce = clustering_eval(Z, graph.labels, graph.num_classes, seed)
    rows += [(dataset, "all", seed, "nmi", ce.nmi), (dataset, "all", seed, "ari", ce.ari)]
    return rows


def print_summary(rows, stream=None):
    stream = stream or sys.stdout
    for dataset, split, seed, metric, value in rows:
        print(f"{dataset}\tsplit={split}\tseed={seed}\t{metric}={value:.6f}", file=stream)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    seed = cfg.seed if args.seed is None else args.seed
    syn = SyntheticConfig.from_dict(cfg.synthetic or {})
    graph = generate_synthetic(syn, seed)
    with atomic_output_dir(args.out, args.force) as tmp:
        save_graph(graph, tmp)
    print(f"wrote {graph.num_nodes} nodes ({graph.num_targets} targets) to {args.out}")
    print("metapaths: " + " ".join(synthetic_metapaths(syn)))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    train = dict(cfg.train or {})
    if args.variant:
        train["variant"] = args.variant
    if args.ablate:
        train["ablations"] = sorted(set(train.get("ablations", [])) | set(args.ablate))
    if args.max_epochs is not None:
        train["max_epochs"] = args.max_epochs
    cfg.train = train
    if args.dataset:
        cfg.dataset, cfg.synthetic = args.dataset, None
    cfg.validate()
    out = args.out or cfg.output
    if out is None:
        raise ConfigError("no output directory: pass --out or set 'output'")

    tcfg = cfg.train_config()
    graph, metapaths, name = resolve_graph(cfg)
    with atomic_output_dir(out, args.force) as tmp:
        trainer = Trainer(graph, metapaths, tcfg)
        result = trainer.run()
        Z = result.embeddings
        (tmp / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        if cfg.dataset is None:
            save_graph(graph, tmp / "dataset")
        write_embeddings(tmp / "embeddings.csv", Z)
        manifest = {
            "num_nodes": int(Z.shape[0]), "dims": int(Z.shape[1]), "variant": tcfg.variant,
            "ablations": list(tcfg.ablations), "seed": cfg.seed, "config_hash": cfg.digest(),
            "metapaths": [ix.spec.name for ix in result.indexes], "K": [ix.K for ix in result.indexes],
            "epochs_run": result.epochs_run, "best_epoch": result.best_epoch,
        }
        (tmp / "embeddings.manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        write_metrics_csv(result.history, tmp / "metrics.csv")
        save_checkpoint(trainer, tmp / "checkpoint.bin")
        rows = evaluate_embeddings(Z, graph, cfg.eval_config(), cfg.seed, name) if graph.labels is not None else []
        if rows:
            from .evaluation import write_results_csv
            write_results_csv(rows, tmp / "eval.csv")
    tag = tcfg.variant + "".join(f"+{a}" for a in tcfg.ablations)
    print(f"trained {tag} for {result.epochs_run} epochs (best epoch {result.best_epoch}); outputs in {out}")
    print_summary(rows)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import write_results_csv

    Z = read_embeddings(args.embeddings)
    if not Path(args.dataset).exists():
        raise ConfigError(f"dataset not found: {args.dataset}")
    graph = load_graph(args.dataset)
    ecfg = EvalConfig(per_class=args.per_class, n_val=args.n_val)
    name = args.name or Path(args.dataset).name
    rows = evaluate_embeddings(Z, graph, ecfg, args.seed, name)
    if args.out:
        write_results_csv(rows, args.out)
    print_summary(rows)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    if args.tol < 0:
        raise ConfigError("--tol must be >= 0")
    rep = run_gradcheck(args.loss, args.seed, args.tol)
    ok = rep.passed
    print(f"loss={rep.loss} finite-difference max rel err = {rep.fd_error:.3e}")
    print(f"analytic vs tape max rel err = {rep.analytic_error:.3e}")
    print(f"monotonicity violations = {rep.monotone_violations}, positive-bound violations = {rep.bound_violations}")
    print(f"max rel err <= {args.tol:g}: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_export_weights(args) -> int:
    """Pairwise similarity and learned weight of a trained run's final embeddings."""
    from .autodiff import Tape
    from .model import adaptive_weights, forward
    from .objective import l2_normalize

    run = Path(args.run)
    if not (run / "config.json").exists():
        raise ConfigError(f"not a run directory: {run}")
    cfg = RunConfig.from_dict(json.loads((run / "config.json").read_text()))
    if cfg.dataset is None:
        cfg.dataset, cfg.synthetic = str(run / "dataset"), None
        cfg.metapaths = json.loads((run / "embeddings.manifest.json").read_text())["metapaths"]
    graph, metapaths, _ = resolve_graph(cfg)
    tcfg = cfg.train_config()
    if tcfg.variant != "ada":
        log.warning("run variant is %r; weights come from an untrained adaptive MLP", tcfg.variant)
    trainer = Trainer(graph, metapaths, tcfg)
    load_checkpoint(trainer, run / "checkpoint.bin")
    trainer.params.load(trainer.state.best_params)
    tape = Tape(record=False)
    views = forward(tape, graph, trainer.inputs, trainer.params, tcfg.model, None,
                    use_context=not tcfg.has("no_context"))
    zc, zf = views.zc_bar, views.zf_bar
    if tcfg.similarity == "cosine":
        zc, zf = l2_normalize(tape, zc), l2_normalize(tape, zf)
    gamma = adaptive_weights(tape, zc, zf, trainer.params).value
    sim = zc.value @ zf.value.T
    out = Path(args.out) if args.out else run / "weights.csv"
    labels = graph.labels
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["anchor", "sample", "same_class", "similarity", "weight"])
        n = sim.shape[0]
        for i in range(n):
            for j in range(n):
                same = "" if labels is None else int(labels[i] == labels[j])
                w.writerow([i, j, same, repr(float(sim[i, j])), repr(float(gamma[i, j]))])
    print(f"wrote {sim.size} pairs to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="meow", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset directory")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train MEOW or AdaMEOW and export embeddings")
    t.add_argument("--config", required=True)
    t.add_argument("--variant", choices=["meow", "ada"])
    t.add_argument("--seed", type=int)
    t.add_argument("--ablate", action="append", choices=ABLATIONS)
    t.add_argument("--dataset")
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--out")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="linear probe and clustering evaluation of embeddings")
    e.add_argument("--embeddings", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--per-class", type=int, nargs="+", default=[20, 40, 60])
    e.add_argument("--n-val", type=int, default=0)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--name")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="verify gradients on a 12-node instance")
    c.add_argument("--loss", choices=["meow", "ada"], default="meow")
    c.add_argument("--tol", type=float, default=1e-6)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("export-weights", help="dump pairwise similarity and adaptive weight of a run")
    x.add_argument("--run", required=True)
    x.add_argument("--out")
    x.set_defaults(func=cmd_export_weights)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, GraphError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
