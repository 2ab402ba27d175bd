"""Command-line entry point: ``qrewrite <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import evaluation as ev
from .hybrid import ClassifierError, fit_knn, hybrid_route, label_training_queries, load_model, save_model
from .mdp import QualityRewardConfig, dump_traces
from .qnet import (CheckpointError, TrainingConfig, TrainingError, load_checkpoint, save_checkpoint,
                   train_agent, write_training_log)
from .qte import Qte
from .rewriter import handoff_state, one_stage_rewrite, rewrite_online, two_stage_rewrite
from .sim_env import (EnvironmentConfig, MissingEntryError, SynthesisProfile, load_table, save_table,
                      synthesize_plan_times)
from .workload import (ApproxRule, WorkloadError, WorkloadGenConfig, enumerate_rewrite_options,
                       generate_workload, load_schema, load_workload, save_workload, split_workload,
                       twitter_like_schema)

log = logging.getLogger("qrewrite")

EXIT_INPUT = 3
EXIT_CONFIG = 4
EXIT_TRAINING = 5


class InputError(Exception):
    pass


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON config ({exc.msg}, line {exc.lineno})") from None
    if not isinstance(cfg, dict):
        raise InputError(f"{path}: config must be a JSON object")
    return cfg


def _tau(args, cfg: dict) -> float:
    if args.tau_ms is not None:
        return float(args.tau_ms)
    return float(cfg.get("tau_ms", 500.0))


def _seed(args, cfg: dict) -> int:
    return int(args.seed if args.seed is not None else cfg.get("seed", 0))


def _schema(path: str | None):
    return load_schema(path) if path else twitter_like_schema()


def _workloads(paths) -> list:
    out = []
    for p in paths:
        out.extend(load_workload(p))
    return out


def _qte(table, cfg: dict) -> Qte:
    return Qte.from_config(table.options, cfg.get("qte"))


def _training(args, cfg: dict) -> TrainingConfig:
    d = dict(cfg.get("training", {}))
    d["seed"] = _seed(args, cfg)
    return TrainingConfig.from_dict(d)


def _agent(path: str | None):
    if not path:
        return None
    net, indices = load_checkpoint(path)
    return ev.Agent(net, indices)


def _parse_approx(specs) -> list[ApproxRule]:
    rules = []
    for spec in specs or []:
        kind, _, param = spec.partition(":")
        try:
            rules.append(ApproxRule(kind, float(param) if param else 1.0))
        except ValueError as exc:
            raise ValueError(f"bad approximation rule {spec!r}: {exc}") from None
    return rules


def cmd_gen_workload(args, cfg: dict) -> None:
    wcfg = dict(cfg.get("workload", {}))
    n = args.num_queries or int(wcfg.get("num_queries", 1000))
    schema = _schema(args.schema)
    queries = generate_workload(WorkloadGenConfig(
        n, schema, zoom_caps=wcfg.get("zoom_caps", {}),
        noise_sigma=float(wcfg.get("noise_sigma", 0.25)), seed=_seed(args, cfg)))
    out = Path(args.out)
    save_workload(queries, out)
    print(f"wrote {len(queries)} queries to {out}")
    ratios = args.split or wcfg.get("splits")
    if ratios:
        parts = split_workload(queries, [float(r) for r in ratios], _seed(args, cfg))
        for name, part in zip(("train", "valid", "eval"), parts):
            p = out.with_name(f"{out.stem}.{name}{out.suffix}")
            save_workload(part, p)
            print(f"wrote {len(part)} queries to {p}")


def cmd_synth_env(args, cfg: dict) -> None:
    ecfg = dict(cfg.get("env", {}))
    schema = _schema(args.schema)
    queries = _workloads(args.workload)
    profile = dict(ecfg.get("profile", {}))
    if args.optimizer_error is not None:
        profile["optimizer_error"] = args.optimizer_error
    rules = _parse_approx(args.approx) or [ApproxRule(r["kind"], float(r["param"]))
                                           for r in ecfg.get("approx_rules", [])]
    options = enumerate_rewrite_options(schema, rules)
    adherence = args.hint_adherence if args.hint_adherence is not None else float(
        ecfg.get("hint_adherence_prob", 1.0))
    table = synthesize_plan_times(queries, schema, options, EnvironmentConfig(
        _tau(args, cfg), adherence, SynthesisProfile.from_dict(profile), _seed(args, cfg)))
    save_table(table, args.out)
    print(f"wrote {len(queries)} x {table.n_options} plan times to {args.out}")


def cmd_train(args, cfg: dict) -> None:
    table = load_table(args.env)
    queries = _workloads(args.workload)
    valid = _workloads(args.valid) if args.valid else None
    tau = _tau(args, cfg)
    qte = _qte(table, cfg)
    tcfg = _training(args, cfg)
    beta = args.beta if args.beta is not None else float(cfg.get("quality", {}).get("beta", 0.8))
    start = None
    quality = None
    if args.mode == "hint":
        indices = table.hint_indices
    elif args.mode == "one-stage":
        indices = list(range(table.n_options))
        quality = QualityRewardConfig(beta)
    else:
        if not args.hint_ckpt:
            raise ValueError("--mode two-stage trains the second stage and needs --hint-ckpt")
        hint = _agent(args.hint_ckpt)
        indices = table.approx_indices
        quality = QualityRewardConfig(beta)
        start = handoff_state(hint.net, table, qte, tau, hint.indices)
    if not indices:
        raise ValueError(f"the environment has no options for mode {args.mode!r}")
    res = train_agent(queries, table, qte, tau, tcfg, indices=indices, valid_queries=valid,
                      quality_cfg=quality, episode_start=start)
    save_checkpoint(res.net, args.out, indices)
    if args.log:
        write_training_log(res.log, args.log)
    print(f"trained {len(res.log)} epochs (best {res.best_epoch}) in {res.seconds:.1f}s; "
          f"checkpoint written to {args.out}")


def cmd_rewrite(args, cfg: dict) -> None:
    table = load_table(args.env)
    queries = {q.id: q for q in _workloads(args.workload)}
    if args.query_id not in queries:
        raise InputError(f"query {args.query_id} is not in the workload")
    q = queries[args.query_id]
    tau = _tau(args, cfg)
    seed = _seed(args, cfg)
    qte = _qte(table, cfg)
    agent = _agent(args.ckpt)
    if args.mode == "hint":
        out = rewrite_online(q, agent.net, table, qte, tau, indices=agent.indices, seed=seed)
    elif args.mode == "one-stage":
        out = one_stage_rewrite(q, agent.net, table, qte, tau, indices=agent.indices, seed=seed)
    elif args.mode == "two-stage":
        if not args.stage2_ckpt:
            raise ValueError("--mode two-stage needs --stage2-ckpt")
        stage2 = _agent(args.stage2_ckpt)
        out = two_stage_rewrite(q, agent.net, stage2.net, table, qte, tau,
                                hint_indices=agent.indices, approx_indices=stage2.indices,
                                seed=seed)
    else:
        if not args.classifier:
            raise ValueError("--mode hybrid needs --classifier")
        hcfg = cfg.get("hybrid", {})
        out = hybrid_route(q, load_model(args.classifier), agent.net, table, qte, tau,
                           sigma=float(hcfg.get("sigma", 0.0)),
                           cost_ms=float(hcfg.get("cost_ms", 2.0)),
                           indices=agent.indices, seed=seed)
    record = out.trace()
    if args.trace:
        with open(args.trace, "w") as fh:
            dump_traces([record], fh)
    print(json.dumps({"query_id": out.query_id, "ro_index": out.ro_index,
                      "option": table.options[out.ro_index].label(),
                      "planning_ms": out.planning_ms, "exec_ms": out.exec_ms,
                      "total_ms": out.total_ms, "viable": out.viable, "quality": out.quality,
                      "termination": out.termination.value, "path": out.path}))


def cmd_classify_train(args, cfg: dict) -> None:
    table = load_table(args.env)
    queries = _workloads(args.workload)
    hcfg = cfg.get("hybrid", {})
    agent = _agent(args.ckpt)
    sigma = args.sigma if args.sigma is not None else float(hcfg.get("sigma", 0.0))
    samples = label_training_queries(queries, agent.net, table, _qte(table, cfg), _tau(args, cfg),
                                     sigma=sigma, indices=agent.indices, seed=_seed(args, cfg))
    model = fit_knn(samples, args.k if args.k is not None else int(hcfg.get("k", 5)))
    save_model(model, args.out)
    n_mdp = sum(lab == "mdp" for _, lab in samples)
    print(f"labeled {len(samples)} queries ({n_mdp} mdp, {len(samples) - n_mdp} baseline); "
          f"model written to {args.out}")


def cmd_evaluate(args, cfg: dict) -> None:
    table = load_table(args.env)
    queries = _workloads(args.workload)
    hcfg = cfg.get("hybrid", {})
    arts = ev.Artifacts(hint=_agent(args.hint_ckpt), one_stage=_agent(args.one_stage_ckpt),
                        stage2=_agent(args.stage2_ckpt),
                        classifier=load_model(args.classifier) if args.classifier else None,
                        classifier_sigma=float(hcfg.get("sigma", 0.0)),
                        classifier_cost_ms=float(hcfg.get("cost_ms", 2.0)))
    qte = _qte(table, cfg)
    results = [ev.evaluate(a, queries, table, qte, _tau(args, cfg), arts, _seed(args, cfg))
               for a in args.approach]
    ev.write_metrics_csv(results, args.out)
    print(ev.format_table(results), end="")


def cmd_curve(args, cfg: dict) -> None:
    table = load_table(args.env)
    rows = ev.learning_curve(_workloads(args.workload), _workloads(args.valid), args.sizes,
                             args.repeats, _training(args, cfg), table, _qte(table, cfg),
                             _tau(args, cfg), seed=_seed(args, cfg))
    ev.write_curve_csv(rows, args.out)
    for r in rows:
        print(f"size {r.size:>4}: train VQP {r.train_vqp_mean:.3f}±{r.train_vqp_sd:.3f}  "
              f"valid VQP {r.val_vqp_mean:.3f}±{r.val_vqp_sd:.3f}  "
              f"time {r.seconds_mean:.1f}±{r.seconds_sd:.1f}s")


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


def _approaches(text: str) -> list[str]:
    names = [x for x in text.split(",") if x]
    bad = [n for n in names if n not in ev.APPROACHES]
    if bad:
        raise argparse.ArgumentTypeError(
            f"unknown approach {bad[0]!r}; choose from {', '.join(ev.APPROACHES)}")
    return names


def build_parser() -> argparse.ArgumentParser:
    def globals_parser(default):
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--seed", type=int, default=default, help="random seed (default 0)")
        g.add_argument("--tau-ms", type=float, default=default, help="time budget (default 500)")
        g.add_argument("--config", default=default, help="JSON run configuration")
        g.add_argument("-v", "--verbose", action="store_true", default=default)
        return g

    # global flags are accepted before or after the subcommand; the copy on
    # each subcommand must not reset values given before it
    common = globals_parser(argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="qrewrite", parents=[globals_parser(None)],
                                description="Budgeted query rewriting on a simulated database.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-workload", parents=[common], help="generate a synthetic workload")
    s.add_argument("--out", required=True)
    s.add_argument("--num-queries", type=int)
    s.add_argument("--schema", help="schema JSON (default: built-in tweets-like schema)")
    s.add_argument("--split", type=_float_list, help="train,valid,eval ratios, e.g. 0.4,0.2,0.4")
    s.set_defaults(func=cmd_gen_workload)

    s = sub.add_parser("synth-env", parents=[common], help="synthesize ground-truth plan times")
    s.add_argument("--workload", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--schema")
    s.add_argument("--optimizer-error", type=float)
    s.add_argument("--hint-adherence", type=float)
    s.add_argument("--approx", nargs="*", metavar="KIND:FRACTION",
                   help="approximation rules, e.g. sample-table:0.2 limit-fraction:0.04")
    s.set_defaults(func=cmd_synth_env)

    s = sub.add_parser("train", parents=[common], help="train an agent")
    s.add_argument("--workload", nargs="+", required=True)
    s.add_argument("--env", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--valid", nargs="+")
    s.add_argument("--mode", choices=("hint", "one-stage", "two-stage"), default="hint")
    s.add_argument("--hint-ckpt", help="stage-one checkpoint (two-stage mode)")
    s.add_argument("--beta", type=float)
    s.add_argument("--log", help="write the per-epoch training log as CSV")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("rewrite", parents=[common], help="rewrite one query")
    s.add_argument("--query-id", type=int, required=True)
    s.add_argument("--workload", nargs="+", required=True)
    s.add_argument("--env", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--mode", choices=("hint", "one-stage", "two-stage", "hybrid"), default="hint")
    s.add_argument("--stage2-ckpt")
    s.add_argument("--classifier")
    s.add_argument("--trace", help="write the decision trace as JSON lines")
    s.set_defaults(func=cmd_rewrite)

    s = sub.add_parser("classify-train", parents=[common], help="train the hybrid router")
    s.add_argument("--workload", nargs="+", required=True)
    s.add_argument("--env", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--k", type=int)
    s.add_argument("--sigma", type=float, help="feature estimation noise")
    s.set_defaults(func=cmd_classify_train)

    s = sub.add_parser("evaluate", parents=[common], help="compare approaches")
    s.add_argument("--workload", nargs="+", required=True)
    s.add_argument("--env", required=True)
    s.add_argument("--approach", type=_approaches, default=["baseline", "naive"],
                   help=f"comma-separated subset of {','.join(ev.APPROACHES)}")
    s.add_argument("--hint-ckpt")
    s.add_argument("--one-stage-ckpt")
    s.add_argument("--stage2-ckpt")
    s.add_argument("--classifier")
    s.add_argument("--out", required=True, help="metrics CSV")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("curve", parents=[common], help="learning curve over training-set sizes")
    s.add_argument("--workload", nargs="+", required=True, help="training pool")
    s.add_argument("--valid", nargs="+", required=True)
    s.add_argument("--env", required=True)
    s.add_argument("--sizes", type=_int_list, required=True)
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_curve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args.config)
        args.func(args, cfg)
    except (InputError, FileNotFoundError, IsADirectoryError, CheckpointError,
            ClassifierError, MissingEntryError, WorkloadError, json.JSONDecodeError) as exc:
        print(f"qrewrite: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TrainingError as exc:
        print(f"qrewrite: training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (ValueError, TypeError, KeyError, ev.MissingArtifactError) as exc:
        print(f"qrewrite: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
