"""Command line front-end tying scenario -> estimate -> optimize -> evaluate.

Every artifact embeds a provenance block (config hash, content hashes of the
inputs, seed, plan hash when run from a plan) and no timestamps, so re-running
the same plan with the same seed reproduces byte-identical outputs.

Exit codes: 0 success, 2 configuration error, 3 infeasible problem,
4 numerical failure.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import container, estimation, evaluation, optimizer, precoding, scenario as sc
from .errors import ConfigurationError, InfeasibleError, NumericalError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_NUMERICAL = 4

STAGES = ("generate", "estimate", "bd-baseline", "optimize", "refine",
          "evaluate", "overhead", "compare")


# ---------------------------------------------------------------------------
# config and provenance helpers


def load_config(path=None, preset=None, seed=None) -> sc.ScenarioConfig:
    if preset is not None and path is not None:
        raise ConfigurationError("give either a config file or a preset, not both")
    if preset is not None:
        if preset == "desk":
            cfg = sc.desk_scale_config()
        elif preset == "basic":
            cfg = sc.ScenarioConfig()
        else:
            raise ConfigurationError(f"unknown preset {preset!r}")
    elif path is not None:
        import json

        try:
            payload = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        cfg = sc.ScenarioConfig.from_dict(payload)
    else:
        raise ConfigurationError("a config file or preset is required")
    if seed is not None:
        cfg = sc.ScenarioConfig.from_dict({**cfg.to_dict(), "rng_seed": int(seed)})
    cfg.validate()
    return cfg


def provenance(config_hash=None, seed=None, inputs=None, plan_hash=None) -> dict:
    return {
        "config_hash": config_hash,
        "seed": seed,
        "inputs": inputs or {},
        "plan_hash": plan_hash,
    }


def _write_summary(path, payload) -> str:
    return container.write_json(path, payload)


# ---------------------------------------------------------------------------
# stage implementations (shared by subcommands and the plan runner)


def stage_generate(config: sc.ScenarioConfig, out_path, plan_hash=None) -> dict:
    scn = sc.build_scenario(config)
    file_hash = scn.save(out_path)
    summary = {
        "stage": "generate",
        "scenario_file": str(out_path),
        "scenario_hash": file_hash,
        "num_bs": scn.topology.num_bs,
        "num_users": scn.topology.num_users,
        "num_clusters": scn.topology.num_clusters,
        "num_edges": len(scn.topology.edges),
        "provenance": provenance(container.json_hash(config.to_dict()),
                                 config.rng_seed, plan_hash=plan_hash),
    }
    return summary


def stage_estimate(scn, scenario_hash, tp, seed, out_path, plan_hash=None) -> dict:
    arrays = {}
    ranks = []
    for k, l in scn.topology.edges:
        samples = estimation.collect_link_samples(scn, k, l, tp, seed)
        est = estimation.rank_deficient_oas(samples)
        arrays[f"theta_hat/{k:05d}/{l:05d}"] = est.theta
        ranks.append(est.rank)
    meta = {
        "kind": "covariance-set",
        "format_version": 1,
        "tp": tp,
        "seed": seed,
        "scenario_hash": scenario_hash,
    }
    file_hash = container.write_container(out_path, meta, arrays)
    return {
        "stage": "estimate",
        "covariance_file": str(out_path),
        "covariance_hash": file_hash,
        "tp": tp,
        "mean_rank": float(np.mean(ranks)),
        "provenance": provenance(seed=seed, inputs={"scenario": scenario_hash},
                                 plan_hash=plan_hash),
    }


def stage_bd(scn, scenario_hash, out_path, eig_threshold_db=-20.0, dims=None,
             on_infeasible="error", plan_hash=None) -> dict:
    control = precoding.bd_prebeamforming(
        scn, dims=dims, eig_threshold_db=eig_threshold_db,
        on_infeasible=on_infeasible)
    problem = optimizer.build_constants(scn)
    gamma_cert = optimizer.certified_gamma(problem, optimizer.gram_list(control))
    meta = {
        "scheme": "bd",
        "gamma": None if gamma_cert == -np.inf else gamma_cert,
        "tightness_residual": 0.0,
        "scenario_hash": scenario_hash,
    }
    file_hash = control.save(out_path, meta_extra=meta)
    return {
        "stage": "bd-baseline",
        "precoder_file": str(out_path),
        "precoder_hash": file_hash,
        "dims": control.dims,
        "gamma_certified": meta["gamma"],
        "provenance": provenance(inputs={"scenario": scenario_hash},
                                 plan_hash=plan_hash),
    }


def stage_optimize(scn, scenario_hash, out_path, eps_bisect=1e-3,
                   problem=None, scheme="optimized", plan_hash=None) -> dict:
    if problem is None:
        problem = optimizer.build_constants(scn)
    result = optimizer.bca(problem, eps_bisect=eps_bisect)
    if not result.feasible:
        raise InfeasibleError(
            "QoS floor cannot be met for every user (admission control)")
    meta = {
        "scheme": scheme,
        "gamma": result.gamma,
        "gamma_upper": result.gamma_upper,
        "iterations": result.iterations,
        "tightness_residual": result.tightness_residual,
        "scenario_hash": scenario_hash,
    }
    file_hash = result.subspace.save(out_path, meta_extra=meta)
    summary = {
        "stage": "optimize" if scheme == "optimized" else "refine",
        "precoder_file": str(out_path),
        "precoder_hash": file_hash,
        "provenance": provenance(inputs={"scenario": scenario_hash},
                                 plan_hash=plan_hash),
    }
    summary.update(result.summary())
    return summary


def stage_refine(scn, scenario_hash, out_path, draws, seed,
                 eig_threshold_db=-20.0, bd_dims=None,
                 on_infeasible="error", eps_bisect=1e-3, plan_hash=None) -> dict:
    control_bd = precoding.bd_prebeamforming(
        scn, dims=bd_dims, eig_threshold_db=eig_threshold_db,
        on_infeasible=on_infeasible)
    problem = optimizer.build_constants(scn)
    refined, info = optimizer.refine_delta(problem, scn, control_bd, draws, seed=seed)
    summary = stage_optimize(scn, scenario_hash, out_path, eps_bisect=eps_bisect,
                             problem=refined, scheme="optimized-refined",
                             plan_hash=plan_hash)
    summary["refinement"] = {
        "draws": draws,
        "gamma_ref": info["gamma_ref"],
        "skipped_users": info["skipped_users"],
        "delta": info["delta"],
    }
    summary["provenance"]["seed"] = seed
    return summary


def stage_evaluate(scn, scenario_hash, precoder_path, out_dir, draws, seed,
                   sigma_e=0.0, inner="zf", plan_hash=None, tag=None) -> dict:
    control, meta = precoding.SubspaceControl.load(precoder_path)
    if meta.get("scenario_hash") not in (None, scenario_hash):
        raise ConfigurationError("precoder was built for a different scenario")
    gamma = meta.get("gamma")
    report = evaluation.outage_statistics(
        scn, control, gamma=gamma, draws=draws, seed=seed,
        inner=inner, sigma_e=sigma_e)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scheme = meta.get("scheme", "unknown")
    name = tag or f"{scheme}_{inner}"
    payload = {
        "stage": "evaluate",
        "scheme": scheme,
        "inner": inner,
        "sigma_e": sigma_e,
        "seed": seed,
        "gamma": gamma,
        "tightness_residual": meta.get("tightness_residual"),
        "scenario_hash": scenario_hash,
        "report": report.to_dict(),
        "provenance": provenance(
            seed=seed,
            inputs={"scenario": scenario_hash,
                    "precoder": container.file_hash(precoder_path)},
            plan_hash=plan_hash),
    }
    json_path = out_dir / f"eval_{name}.json"
    csv_path = out_dir / f"eval_{name}.csv"
    _write_summary(json_path, payload)
    csv_path.write_text(report.per_user_csv())
    payload["files"] = {"json": str(json_path), "csv": str(csv_path)}
    return payload


def stage_overhead(scn, scenario_hash, out_path, s_dim, rank=None,
                   plan_hash=None) -> dict:
    if rank is None:
        ranks = [scn.cov(k, l).rank for k, l in scn.topology.edges]
        rank = int(round(float(np.mean(ranks))))
    ledger = evaluation.overhead_ledger(scn.config, scn.topology, s_dim, rank)
    payload = {
        "stage": "overhead",
        "s_dim": int(s_dim),
        "rank": int(rank),
        "ledger": evaluation.ledger_to_json(ledger),
        "provenance": provenance(inputs={"scenario": scenario_hash},
                                 plan_hash=plan_hash),
    }
    _write_summary(out_path, payload)
    return payload


def compare_report(evals: list) -> dict:
    """Comparison table across schemes evaluated on one scenario.

    All evaluations must share the scenario hash and the draw seed.
    """
    if not evals:
        raise ConfigurationError("nothing to compare")
    ref_hash = evals[0].get("scenario_hash")
    ref_seed = evals[0].get("seed")
    rows = []
    for ev in evals:
        if ev.get("scenario_hash") != ref_hash:
            raise ConfigurationError("evaluations come from different scenarios")
        if ev.get("seed") != ref_seed:
            raise ConfigurationError("evaluations use different draw seeds")
        rep = ev["report"]
        throughput = rep["outage_throughput"]
        rows.append({
            "scheme": ev.get("scheme"),
            "inner": ev.get("inner"),
            "sigma_e": ev.get("sigma_e"),
            "gamma": ev.get("gamma"),
            "tightness_residual": ev.get("tightness_residual"),
            "min_satisfaction": rep["min_satisfaction"],
            "outage_throughput_mean": float(np.mean(throughput)),
            "outage_throughput_sum": float(np.sum(throughput)),
        })
    return {"stage": "compare", "scenario_hash": ref_hash, "seed": ref_seed,
            "rows": rows}


# ---------------------------------------------------------------------------
# plan runner


def run_plan(plan: dict, out_dir) -> dict:
    """Execute an ordered experiment plan; artifacts land in ``out_dir``."""
    if not isinstance(plan, dict):
        raise ConfigurationError("plan must be a JSON object")
    unknown = set(plan) - {"schema_version", "seed", "preset", "scenario", "stages"}
    if unknown:
        raise ConfigurationError(f"unknown plan fields: {sorted(unknown)}")
    stages = plan.get("stages")
    if not isinstance(stages, list) or not stages:
        raise ConfigurationError("plan needs a non-empty 'stages' list")
    for st in stages:
        if not isinstance(st, dict) or st.get("stage") not in STAGES:
            raise ConfigurationError(f"unknown stage {st!r}")
    seed = int(plan.get("seed", 0))
    plan_hash = container.json_hash(plan)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if "scenario" in plan:
        config = sc.ScenarioConfig.from_dict({**plan["scenario"],
                                              "rng_seed": plan["scenario"].get("rng_seed", seed)})
    else:
        config = load_config(preset=plan.get("preset", "desk"), seed=seed)

    state = {"scenario": None, "scenario_hash": None, "evals": []}
    summaries = []
    for st in stages:
        name = st["stage"]
        if name == "generate":
            path = out_dir / "scenario.sscp"
            summary = stage_generate(config, path, plan_hash=plan_hash)
            state["scenario"] = sc.Scenario.load(path)
            state["scenario_hash"] = summary["scenario_hash"]
        else:
            if state["scenario"] is None:
                raise ConfigurationError(f"stage {name!r} needs a generated scenario")
            scn, shash = state["scenario"], state["scenario_hash"]
            if name == "estimate":
                summary = stage_estimate(scn, shash, int(st.get("tp", config.Tp)),
                                         seed, out_dir / "covariance_est.sscp",
                                         plan_hash=plan_hash)
            elif name == "bd-baseline":
                summary = stage_bd(scn, shash, out_dir / "precoder_bd.sscp",
                                   eig_threshold_db=float(st.get("eig_threshold_db", -20.0)),
                                   dims=st.get("dims"),
                                   on_infeasible=st.get("on_infeasible", "error"),
                                   plan_hash=plan_hash)
                state["precoder_bd"] = out_dir / "precoder_bd.sscp"
            elif name == "optimize":
                summary = stage_optimize(scn, shash, out_dir / "precoder_opt.sscp",
                                         eps_bisect=float(st.get("epsilon_bisect", 1e-3)),
                                         plan_hash=plan_hash)
                state["precoder_opt"] = out_dir / "precoder_opt.sscp"
            elif name == "refine":
                summary = stage_refine(scn, shash, out_dir / "precoder_refined.sscp",
                                       draws=int(st.get("draws", 3000)), seed=seed,
                                       eig_threshold_db=float(st.get("eig_threshold_db", -20.0)),
                                       bd_dims=st.get("bd_dims"),
                                       on_infeasible=st.get("on_infeasible", "error"),
                                       eps_bisect=float(st.get("epsilon_bisect", 1e-3)),
                                       plan_hash=plan_hash)
                state["precoder_refined"] = out_dir / "precoder_refined.sscp"
            elif name == "evaluate":
                target = st.get("target", "optimize")
                key = {"bd": "precoder_bd", "optimize": "precoder_opt",
                       "refined": "precoder_refined"}.get(target)
                if key is None or key not in state:
                    raise ConfigurationError(
                        f"evaluate target {target!r} has not been built")
                summary = stage_evaluate(scn, shash, state[key], out_dir,
                                         draws=int(st.get("draws", 2000)), seed=seed,
                                         sigma_e=float(st.get("sigma_e", 0.0)),
                                         inner=st.get("inner", "zf"),
                                         plan_hash=plan_hash)
                state["evals"].append(summary)
            elif name == "overhead":
                s_dim = st.get("s_dim")
                if s_dim is None:
                    for key in ("precoder_opt", "precoder_refined", "precoder_bd"):
                        if key in state:
                            control, _ = precoding.SubspaceControl.load(state[key])
                            s_dim = max(control.dims)
                            break
                if s_dim is None:
                    raise ConfigurationError("overhead needs s_dim or a built precoder")
                summary = stage_overhead(scn, shash, out_dir / "overhead.json",
                                         int(s_dim), rank=st.get("rank"),
                                         plan_hash=plan_hash)
            elif name == "compare":
                summary = compare_report(state["evals"])
                summary["provenance"] = provenance(seed=seed, plan_hash=plan_hash)
                _write_summary(out_dir / "compare.json", summary)
        summaries.append(summary)
        _write_summary(out_dir / f"{len(summaries):02d}_{name}.json", summary)
    overall = {"plan_hash": plan_hash, "seed": seed, "stages": [s["stage"] for s in summaries]}
    _write_summary(out_dir / "plan_summary.json", overall)
    return {"summaries": summaries, "plan_hash": plan_hash}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sscp",
        description="Two-stage subspace-constrained precoding toolkit",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_scn = sub.add_parser("scenario", help="scenario generation")
    scn_sub = p_scn.add_subparsers(dest="subcommand", required=True)
    p_gen = scn_sub.add_parser("generate")
    p_gen.add_argument("--config")
    p_gen.add_argument("--preset", choices=["basic", "desk"])
    p_gen.add_argument("--desk-scale", action="store_true",
                       help="shorthand for --preset desk")
    p_gen.add_argument("--seed", type=int)
    p_gen.add_argument("--out", required=True)

    p_est = sub.add_parser("estimate", help="covariance estimation from samples")
    p_est.add_argument("--scenario", required=True)
    p_est.add_argument("--tp", type=int, required=True)
    p_est.add_argument("--seed", type=int, default=0)
    p_est.add_argument("--out", required=True)

    p_pre = sub.add_parser("precode", help="baseline subspace construction")
    pre_sub = p_pre.add_subparsers(dest="subcommand", required=True)
    p_bd = pre_sub.add_parser("bd")
    p_bd.add_argument("--scenario", required=True)
    p_bd.add_argument("--out", required=True)
    p_bd.add_argument("--eig-threshold-db", type=float, default=-20.0)
    p_bd.add_argument("--dims", type=int)
    p_bd.add_argument("--on-infeasible", choices=["error", "truncate"],
                      default="error")

    p_opt = sub.add_parser("optimize", help="subspace optimization")
    p_opt.add_argument("--scenario", required=True)
    p_opt.add_argument("--out", required=True)
    p_opt.add_argument("--epsilon-bisect", type=float, default=1e-3)

    p_ref = sub.add_parser("refine", help="outage-exponent refinement + optimization")
    p_ref.add_argument("--scenario", required=True)
    p_ref.add_argument("--out", required=True)
    p_ref.add_argument("--draws", type=int, default=3000)
    p_ref.add_argument("--seed", type=int, default=0)
    p_ref.add_argument("--epsilon-bisect", type=float, default=1e-3)
    p_ref.add_argument("--on-infeasible", choices=["error", "truncate"],
                       default="error")
    p_ref.add_argument("--bd-dims", type=int)

    p_ev = sub.add_parser("evaluate", help="Monte Carlo evaluation")
    p_ev.add_argument("--scenario", required=True)
    p_ev.add_argument("--precoder", required=True)
    p_ev.add_argument("--draws", type=int, default=10000)
    p_ev.add_argument("--seed", type=int, default=0)
    p_ev.add_argument("--sigma-e", type=float, default=0.0)
    p_ev.add_argument("--inner", choices=["zf", "rzf"], default="zf")
    p_ev.add_argument("--out", required=True, help="output directory")

    p_ovh = sub.add_parser("overhead", help="signaling overhead ledger")
    p_ovh.add_argument("--scenario", required=True)
    p_ovh.add_argument("--s-dim", type=int)
    p_ovh.add_argument("--precoder")
    p_ovh.add_argument("--rank", type=int)
    p_ovh.add_argument("--out", required=True)

    p_cmp = sub.add_parser("compare", help="comparison table across evaluations")
    p_cmp.add_argument("inputs", nargs="+")
    p_cmp.add_argument("--out", required=True)

    p_run = sub.add_parser("run", help="run an experiment plan")
    p_run.add_argument("--plan", required=True)
    p_run.add_argument("--out", required=True)
    return parser


def _dispatch(args) -> int:
    import json

    if args.command == "scenario" and args.subcommand == "generate":
        preset = "desk" if getattr(args, "desk_scale", False) else args.preset
        config = load_config(args.config, preset, args.seed)
        summary = stage_generate(config, args.out)
        _write_summary(Path(args.out).with_suffix(".json"), summary)
        print(container.canonical_json({"scenario_hash": summary["scenario_hash"],
                                        "num_bs": summary["num_bs"]}))
        return EXIT_OK

    if args.command == "estimate":
        scn = sc.Scenario.load(args.scenario)
        summary = stage_estimate(scn, container.file_hash(args.scenario),
                                 args.tp, args.seed, args.out)
        _write_summary(Path(args.out).with_suffix(".json"), summary)
        return EXIT_OK

    if args.command == "precode" and args.subcommand == "bd":
        scn = sc.Scenario.load(args.scenario)
        summary = stage_bd(scn, container.file_hash(args.scenario), args.out,
                           eig_threshold_db=args.eig_threshold_db,
                           dims=args.dims, on_infeasible=args.on_infeasible)
        _write_summary(Path(args.out).with_suffix(".json"), summary)
        return EXIT_OK

    if args.command == "optimize":
        scn = sc.Scenario.load(args.scenario)
        summary = stage_optimize(scn, container.file_hash(args.scenario),
                                 args.out, eps_bisect=args.epsilon_bisect)
        _write_summary(Path(args.out).with_suffix(".json"), summary)
        print(container.canonical_json({"gamma": summary["gamma"],
                                        "iterations": summary["iterations"]}))
        return EXIT_OK

    if args.command == "refine":
        scn = sc.Scenario.load(args.scenario)
        summary = stage_refine(scn, container.file_hash(args.scenario), args.out,
                               draws=args.draws, seed=args.seed,
                               bd_dims=args.bd_dims,
                               on_infeasible=args.on_infeasible,
                               eps_bisect=args.epsilon_bisect)
        _write_summary(Path(args.out).with_suffix(".json"), summary)
        return EXIT_OK

    if args.command == "evaluate":
        scn = sc.Scenario.load(args.scenario)
        stage_evaluate(scn, container.file_hash(args.scenario), args.precoder,
                       args.out, draws=args.draws, seed=args.seed,
                       sigma_e=args.sigma_e, inner=args.inner)
        return EXIT_OK

    if args.command == "overhead":
        scn = sc.Scenario.load(args.scenario)
        s_dim = args.s_dim
        if s_dim is None:
            if args.precoder is None:
                raise ConfigurationError("overhead needs --s-dim or --precoder")
            control, _ = precoding.SubspaceControl.load(args.precoder)
            s_dim = max(control.dims)
        stage_overhead(scn, container.file_hash(args.scenario), args.out,
                       s_dim, rank=args.rank)
        return EXIT_OK

    if args.command == "compare":
        evals = [json.loads(Path(p).read_text()) for p in args.inputs]
        table = compare_report(evals)
        _write_summary(args.out, table)
        return EXIT_OK

    if args.command == "run":
        try:
            plan = json.loads(Path(args.plan).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigurationError(f"cannot read plan {args.plan}: {exc}") from exc
        run_plan(plan, args.out)
        return EXIT_OK

    raise ConfigurationError(f"unhandled command {args.command!r}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
