"""Config-driven experiment runner.

Usage: ``taskdisc <subcommand> --config <path> [--out <dir>] [--seed <u64>] [--deterministic]``

Exit codes: 0 on success, 2 for a bad command line or a config that fails
schema validation, 3 when the run itself fails.
"""
from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
from scipy.stats import spearmanr

from . import diffcore as dc
from .agreement import (
    StochasticityConfig,
    TrainConfig,
    agreement_score,
    prop1_bounds_check,
    proxy_agreement,
    stochasticity_ablation,
)
from .data import SyntheticSpec, generate_synthetic, load_features, load_tds, save_tds, split_dataset
from .diffcore import MlpSpec
from .discovery import (
    DiscoveryConfig,
    discover,
    lambda_sweep,
    load_checkpoint,
    nearest_discovered_task,
    save_checkpoint,
)
from .errors import ConfigError, TaskDiscError
from .reports import emit_report
from .seeding import derive_seed
from .splits import (
    ClassPartition,
    adversarial_split,
    adversarial_split_multiclass,
    as_difference_experiment,
    evaluate_split,
    matched_random_split,
)
from .tasks import (
    Task,
    acceptance_cost,
    least_predictable_coord,
    materialize,
    naive_random_discovery,
    pixel_threshold_task,
    planted_multiclass,
    planted_task,
    random_network_task,
    random_task,
    similarity_matrix,
)

log = logging.getLogger("taskdisc")

DEFAULT_DATASET = {"synthetic": {"N": 2048, "D": 32, "F": 4, "noise_sigma": 0.1, "mixing": "linear"}}


def load_schema():
    return json.loads(resources.files("taskdisc").joinpath("config_schema.json").read_text())


def validate_config(cfg):
    """Raise ConfigError naming the first offending field."""
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config field '{where}': {e.message}", field=where)


def resolve_config(cfg, seed=None, out=None, deterministic=None):
    """Fill defaults and apply command-line overrides."""
    r = json.loads(json.dumps(cfg))
    if seed is not None:
        r["seed"] = seed
    r.setdefault("seed", 0)
    if out is not None:
        r["output_dir"] = out
    r.setdefault("output_dir", "taskdisc_out")
    if deterministic:
        r["deterministic"] = True
    r.setdefault("deterministic", True)
    r.setdefault("dataset", DEFAULT_DATASET)
    if "synthetic" in r["dataset"]:
        r["dataset"]["synthetic"] = {**SyntheticSpec(**r["dataset"]["synthetic"]).to_dict()}
    r.setdefault("split", {})
    r["split"].setdefault("test_fraction", 0.1)
    tc = TrainConfig(**r.get("train", {}))
    r["train"] = {k: list(v) if k == "hidden" else v for k, v in tc.__dict__.items() if v is not None}
    r["stochasticity"] = {k: bool(r.get("stochasticity", {}).get(k, True))
                          for k in ("vary_init", "vary_data_order", "vary_parallel_noise")}
    dcfg = DiscoveryConfig(**r.get("discovery", {}), seed=derive_seed(r["seed"], "discovery"))
    r["discovery"] = {k: list(v) if isinstance(v, tuple) else v
                      for k, v in dcfg.to_dict().items() if k != "seed"}
    r.setdefault("experiment", {})
    return r


class Context:
    def __init__(self, cfg):
        self.cfg = cfg
        self.seed = cfg["seed"]
        self.out = Path(cfg["output_dir"])
        self.exp = cfg["experiment"]
        self._dataset = self._split = None

    @property
    def dataset(self):
        if self._dataset is None:
            d = self.cfg["dataset"]
            if "synthetic" in d:
                self._dataset = generate_synthetic(SyntheticSpec(**d["synthetic"]),
                                                   derive_seed(self.seed, "data"))
            elif d["path"].endswith(".tds") and not d.get("standardize"):
                self._dataset = load_tds(d["path"])
            else:
                self._dataset = load_features(d["path"], d.get("standardize", False),
                                              d.get("header", False))
        return self._dataset

    @property
    def split(self):
        if self._split is None:
            self._split = split_dataset(self.dataset, self.cfg["split"]["test_fraction"],
                                        derive_seed(self.seed, "split"))
        return self._split

    @property
    def train_cfg(self):
        return TrainConfig(**self.cfg["train"])

    def stoch(self, label="stoch"):
        return StochasticityConfig(**self.cfg["stochasticity"]).reseeded(derive_seed(self.seed, label))

    @property
    def disc_cfg(self):
        return DiscoveryConfig(**self.cfg["discovery"], seed=derive_seed(self.seed, "discovery"))

    def task(self, spec, index=0):
        """Build a task from its config entry; returns (name, Task)."""
        ds, kind = self.dataset, spec["type"]
        seed = spec.get("seed", derive_seed(self.seed, "task", index))
        if kind == "planted":
            t, tag = planted_task(ds, spec.get("factor", 0)), spec.get("factor", 0)
        elif kind == "planted-multiclass":
            f = spec.get("factors", [0, 1])
            t, tag = planted_multiclass(ds, f), "-".join(map(str, f))
        elif kind == "random":
            t, tag = random_task(ds.ids, seed), index
        elif kind == "pixel":
            c = spec.get("coord", least_predictable_coord(ds))
            t, tag = pixel_threshold_task(ds, c), c
        elif kind == "random-net":
            hidden = tuple(spec.get("hidden", [64]))
            t, tag = random_network_task(ds, MlpSpec.make(ds.D, hidden, 1), seed), index
        else:
            t, tag = Task.load(spec["path"]), Path(spec["path"]).stem
        return spec.get("name", f"{kind}-{tag}"), t

    def tasks(self, key="tasks", default=None):
        specs = self.exp.get(key)
        if specs is None:
            specs = [self.exp["task"]] if "task" in self.exp else (default or [{"type": "planted"}])
        return [self.task(s, i) for i, s in enumerate(specs)]

    def path(self, name):
        return self.out / name


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# subcommands

def cmd_gen_data(ctx):
    ds = ctx.dataset
    save_tds(ds, ctx.path("dataset.tds"))
    write_json(ctx.path("split.json"), ctx.split.to_dict())
    emit_report([{"factor": f, "ones": int(ds.planted[f].sum()), "N": ds.N} for f in range(ds.F)],
                "csv", ctx.path("planted_balance.csv"), ["factor", "ones", "N"])


def cmd_as_eval(ctx):
    rows, summary = [], []
    n_pairs = ctx.exp.get("n_pairs", 4)
    for name, t in ctx.tasks():
        res = agreement_score(ctx.dataset, t, ctx.split, ctx.train_cfg, ctx.stoch(), n_pairs)
        rows += res.records(name, "default")
        summary.append({"task_id": name, "mean": res.mean, "std": res.std, "n_pairs": n_pairs,
                        "train_acc": float(np.mean(res.train_acc))})
    emit_report(rows, "csv", ctx.path("as_result.csv"), ["task_id", "config", "pair", "agreement"])
    emit_report(summary, "csv", ctx.path("as_summary.csv"),
                ["task_id", "mean", "std", "n_pairs", "train_acc"])


def cmd_ablate(ctx):
    name, t = ctx.tasks(default=[{"type": "random"}])[0]
    table = stochasticity_ablation(ctx.dataset, t, ctx.split, ctx.train_cfg,
                                   ctx.exp.get("n_pairs", 4), derive_seed(ctx.seed, "stoch"))
    rows = [{"task_id": name, "config": r["config"], "pair": i, "agreement": a}
            for r in table for i, a in enumerate(r["per_pair"])]
    emit_report(rows, "csv", ctx.path("ablation.csv"), ["task_id", "config", "pair", "agreement"])
    emit_report([{k: r[k] for k in r if k != "per_pair"} for r in table], "csv",
                ctx.path("ablation_summary.csv"),
                ["config", "vary_init", "vary_data_order", "vary_parallel_noise", "mean", "std"])


def _similarity_rows(tasks, ids):
    s = similarity_matrix(tasks, ids)
    return [{"task_i": i, "task_j": j, "similarity": float(s[i, j])}
            for i in range(len(tasks)) for j in range(i + 1, len(tasks))]


def cmd_discover(ctx):
    cfg = ctx.disc_cfg
    res = discover(ctx.dataset, ctx.split, cfg, n_fresh=ctx.exp.get("n_fresh", 0))
    st = res.state
    save_checkpoint(st, ctx.path("checkpoint.tdck"), cfg)
    emit_report([{"step": i, "as_loss": a, "uniformity": u, "agreement": g, "inner_steps": k}
                 for i, (a, u, g, k) in enumerate(zip(st.as_trace, st.unif_trace, st.agree_trace,
                                                      st.inner_steps_trace))],
                "csv", ctx.path("discovery_trace.csv"),
                ["step", "as_loss", "uniformity", "agreement", "inner_steps"])
    write_json(ctx.path("tasks.json"), [t.to_dict() for t in res.tasks])
    if cfg.n_classes == 2 and len(res.tasks) > 1:
        emit_report(_similarity_rows(res.tasks, ctx.split.train_ids), "csv",
                    ctx.path("similarity.csv"), ["task_i", "task_j", "similarity"])


def cmd_lambda_sweep(ctx):
    rows = lambda_sweep(ctx.dataset, ctx.split, ctx.disc_cfg, ctx.exp.get("lambdas", [0.0, 1.0]),
                        ctx.train_cfg, ctx.exp.get("n_pairs", 2))
    emit_report(rows, "csv", ctx.path("lambda_sweep.csv"))


def _discovery_state(ctx):
    if "checkpoint" in ctx.exp:
        return load_checkpoint(ctx.exp["checkpoint"])[0]
    return discover(ctx.dataset, ctx.split, ctx.disc_cfg).state


def cmd_recall(ctx):
    state = _discovery_state(ctx)
    ds = ctx.dataset
    targets = ctx.tasks("targets", [{"type": "planted", "factor": f} for f in range(max(ds.F, 1))])
    rows = []
    for name, t in targets:
        _, _, sim = nearest_discovered_task(state, t, ctx.split, ds)
        rows.append({"target": name, "similarity": sim})
    emit_report(rows, "csv", ctx.path("recall.csv"), ["target", "similarity"])


def cmd_adv_split(ctx):
    ds = ctx.dataset
    _, target = ctx.task(ctx.exp.get("target", {"type": "planted"}), 0)
    _, distractor = ctx.task(ctx.exp.get("distractor", {"type": "pixel"}), 1)
    cfg, stoch = ctx.train_cfg, ctx.stoch()
    if target.K == 2:
        adv = adversarial_split(target, distractor, min_side=2 * cfg.batch_size)
    else:
        p = ctx.exp.get("partition")
        part = (ClassPartition(p["C1"], p["C2"]) if p else
                ClassPartition.random_equal(target.K, derive_seed(ctx.seed, "partition")))
        adv = adversarial_split_multiclass(target, distractor, part, min_side=2 * cfg.batch_size)
    matched = matched_random_split(target, adv, derive_seed(ctx.seed, "matched"))
    n_runs, with_as = ctx.exp.get("n_runs", 4), ctx.exp.get("with_as", False)
    rows = []
    for label, sp in (("adversarial", adv), ("matched-random", matched)):
        rep = evaluate_split(ds, sp, target, cfg, stoch, n_runs, with_as)
        write_json(ctx.path(f"split_{label}.json"), sp.to_dict())
        rep.save(ctx.path(f"report_{label}.json"))
        rows.append({"split": label, "n_train": rep.n_train, "n_test": rep.n_test,
                     "acc_mean": rep.acc_mean, "acc_std": rep.acc_std,
                     "as_on_split": rep.as_on_split})
    emit_report(rows, "csv", ctx.path("adv_split.csv"))


def cmd_as_diff(ctx):
    named = ctx.tasks(default=[{"type": "planted", "factor": 0}, {"type": "pixel"},
                               {"type": "random-net"}, {"type": "random"}])
    pairs = list(itertools.permutations(range(len(named)), 2))
    rows = as_difference_experiment([(named[i][1], named[j][1]) for i, j in pairs], ctx.dataset,
                                    ctx.train_cfg, ctx.stoch(), ctx.split,
                                    ctx.exp.get("n_pairs", 2), ctx.exp.get("n_runs", 1))
    for r in rows:
        i, j = pairs[r["pair_id"]]
        r["t1"], r["t2"] = named[i][0], named[j][0]
    emit_report(rows, "csv", ctx.path("as_diff.csv"),
                ["pair_id", "as_diff", "acc", "as_on_split", "as_t1", "as_t2", "t1", "t2"])


def cmd_bounds_check(ctx):
    name, t = ctx.tasks()[0]
    rep = prop1_bounds_check(ctx.dataset, t, ctx.split, ctx.train_cfg, ctx.stoch(),
                             ctx.exp.get("M", 8), ctx.exp.get("n_h_samples", 100),
                             derive_seed(ctx.seed, "bounds"))
    emit_report([{"h": i, "extension": "majority" if i == 0 else "random", "lower_slack": s}
                 for i, s in enumerate(rep.lower_slacks)], "csv", ctx.path("bounds.csv"),
                ["h", "extension", "lower_slack"])
    write_json(ctx.path("bounds_summary.json"),
               {"task_id": name, "agreement": rep.agreement, "acc_majority": rep.acc_majority,
                "upper_slack": rep.upper_slack, "min_lower_slack": rep.min_lower_slack,
                "violations": rep.violations, "n_models": rep.n_models})


def cmd_naive_discover(ctx):
    e = ctx.exp
    thr = e.get("sim_threshold", 0.55)
    seed = derive_seed(ctx.seed, "naive")
    res = naive_random_discovery(ctx.dataset, thr, e.get("n_tasks", 10), e.get("budget", 10_000),
                                 seed=seed)
    n_hits = e.get("n_hits", 16)
    cost = (acceptance_cost(ctx.dataset, res.tasks, thr, n_hits, seed=seed) if n_hits and res.tasks
            else [None] * len(res.tasks))
    emit_report([{"accepted": i + 1, "draws": d, "cumulative_draws": c, "running_mean": m,
                  "expected_draws": x}
                 for i, (d, c, m, x) in enumerate(zip(res.draws, res.cumulative_draws,
                                                      res.draws_per_acceptance, cost))],
                "csv", ctx.path("naive_discovery.csv"),
                ["accepted", "draws", "cumulative_draws", "running_mean", "expected_draws"])
    write_json(ctx.path("naive_summary.json"),
               {"accepted": len(res.tasks), "total_draws": res.total_draws,
                "exhausted": res.exhausted})


def default_battery(ds):
    specs = [{"type": "planted", "factor": f} for f in range(min(ds.F, 4))]
    specs += [{"type": "random", "seed": s} for s in range(4)]
    specs += [{"type": "pixel", "coord": c} for c in range(min(ds.D, 4))]
    specs += [{"type": "random-net", "hidden": [64] * h, "seed": h} for h in range(1, 5)]
    return specs


def cmd_proxy_check(ctx):
    e, ds = ctx.exp, ctx.dataset
    named = ctx.tasks(default=default_battery(ds))
    if "checkpoint" in e:
        state = load_checkpoint(e["checkpoint"])[0]
        named += [(f"discovered-{i}", materialize(net, ds))
                  for i, net in enumerate(state.task_networks())]
    inner = TrainConfig(ctx.train_cfg.hidden, optimizer="sgd", lr=e.get("proxy_lr", 0.5),
                        batch_size=e.get("proxy_batch", 64), steps=e.get("proxy_steps", 25))
    rows = []
    for name, t in named:
        full = agreement_score(ds, t, ctx.split, ctx.train_cfg, ctx.stoch(), e.get("n_pairs", 2)).mean
        proxy = proxy_agreement(ds, t, ctx.split, inner, ctx.stoch("proxy"), e.get("proxy_runs", 3))
        rows.append({"task_id": name, "full_as": full, "proxy_as": proxy})
    emit_report(rows, "csv", ctx.path("proxy_check.csv"), ["task_id", "full_as", "proxy_as"])
    rho = spearmanr([r["full_as"] for r in rows], [r["proxy_as"] for r in rows])[0]
    write_json(ctx.path("proxy_summary.json"), {"n_tasks": len(rows), "spearman": float(rho)})


SUBCOMMANDS = {
    "gen-data": cmd_gen_data,
    "as-eval": cmd_as_eval,
    "ablate-stochasticity": cmd_ablate,
    "discover": cmd_discover,
    "lambda-sweep": cmd_lambda_sweep,
    "recall": cmd_recall,
    "adv-split": cmd_adv_split,
    "as-diff": cmd_as_diff,
    "bounds-check": cmd_bounds_check,
    "naive-discover": cmd_naive_discover,
    "proxy-check": cmd_proxy_check,
}


def build_parser():
    p = argparse.ArgumentParser(prog="taskdisc", description=__doc__.splitlines()[0])
    p.add_argument("subcommand", choices=sorted(SUBCOMMANDS))
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--seed", type=int, help="master seed (overrides seed)")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded BLAS for bit-reproducible reductions")
    return p


def run(subcommand, config_path, out=None, seed=None, deterministic=False) -> int:
    if subcommand not in SUBCOMMANDS:
        print(f"taskdisc: unknown subcommand {subcommand!r}", file=sys.stderr)
        return 2
    try:
        raw = json.loads(Path(config_path).read_text())
        validate_config(raw)
        cfg = resolve_config(raw, seed, out, deterministic)
    except ConfigError as exc:
        print(f"taskdisc: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"taskdisc: cannot read config: {exc}", file=sys.stderr)
        return 2
    except (TaskDiscError, TypeError, ValueError) as exc:
        print(f"taskdisc: invalid config values: {exc}", file=sys.stderr)
        return 2
    ctx = Context(cfg)
    try:
        ctx.out.mkdir(parents=True, exist_ok=True)
        write_json(ctx.path("resolved_config.json"), cfg)
        dc.set_deterministic_default(cfg["deterministic"])
        SUBCOMMANDS[subcommand](ctx)
    except (TaskDiscError, OSError, ValueError, KeyError) as exc:
        print(f"taskdisc: {subcommand} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    finally:
        dc.set_deterministic_default(True)
    return 0


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    return run(args.subcommand, args.config, args.out, args.seed, args.deterministic)


if __name__ == "__main__":
    sys.exit(main())
