"""Config-driven experiment orchestration.

An experiment config is a JSON document validated against :data:`SCHEMA`.
:func:`run_experiment` executes it, fanning independent (seed, run) jobs
out over a process pool and merging results in job order, then writes
CSV/SVG artifacts atomically plus a ``manifest.json`` with checksums.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import os
import tempfile
import traceback
from concurrent.futures import ProcessPoolExecutor
from typing import Dict, List, Optional

import jsonschema
import numpy as np

from . import autodiff as ad
from .mdp import (
    AssessmentSpec,
    TabularMdp,
    make_gridworld,
    sample_random_mdp,
)
from .ope import benchmark_mae, rows_to_csv, standard_estimators
from .policy import MlpPolicy, TabularSoftmaxPolicy
from .predictors import LinearPredictor, TransformerPredictor
from .svg import line_chart
from .theory import (
    bounded_variant,
    brute_force_policy_frontier,
    projected_gradient_hard,
    random_problem,
    rbf_index_similarity,
    run_beta_sweep_experiment,
    solve_hard_relaxed,
    verify_theorem1_roundtrip,
)
from .trainer import (
    LOG_COLUMNS,
    TrainerConfig,
    evaluate_policy,
    pretrain_predictor_from_standard_run,
    run_evarl,
    run_plain_pg,
    select_assessment_states,
)

SCHEMA_VERSION = 1
KINDS = ("theory-sweep", "train-evarl", "pretrain-predictor", "ope-compare", "gradcheck")
MANIFEST = "manifest.json"

_num = {"type": "number"}
_int = {"type": "integer"}
_pos_int = {"type": "integer", "minimum": 1}
_nonneg = {"type": "number", "minimum": 0}

_TRAINER_PROPS = {
    "policy_lr": _nonneg, "predictor_lr": _nonneg, "n_pred": _pos_int, "n_policy": _pos_int,
    "warmup_interactions": {"type": "integer", "minimum": 0},
    "warmup_mse_threshold": {"type": ["number", "null"]},
    "total_interactions": _pos_int, "batch_size": _pos_int,
    "deploy_horizon": {"type": ["integer", "null"], "minimum": 1},
    "buffer_threshold": _pos_int, "recent_policies": _pos_int,
    "predictor_checkpoint": {"type": ["string", "null"]},
    "predictor_batch_size": _pos_int,
    "predictor_batches_per_epoch": {"type": ["integer", "null"], "minimum": 1},
    "predictor_optimizer": {"enum": ["sgd", "adam"]},
    "pairing": {"enum": ["split", "plugin"]},
    "baseline_lr": {"type": ["number", "null"], "minimum": 0},
    "entropy_coef": _nonneg,
    "checkpoint_every": {"type": ["integer", "null"], "minimum": 1},
}

SCHEMA = {
    "type": "object",
    "required": ["schema_version", "kind", "seeds"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "kind": {"enum": list(KINDS)},
        "name": {"type": "string"},
        "seeds": {"type": "array", "items": _int, "minItems": 1},
        "output": {"type": "string"},
        "environment": {
            "type": "object",
            "required": ["type"],
            "properties": {
                "type": {"enum": ["gridworld", "random", "file"]},
                "width": _pos_int, "height": _pos_int,
                "goals": {"type": "array", "items": {"type": "array", "items": _int, "minItems": 2, "maxItems": 2}},
                "start_cells": {"type": "array", "items": {"type": "array", "items": _int, "minItems": 2, "maxItems": 2}},
                "step_reward": _num, "goal_reward": _num,
                "slip": {"type": "number", "minimum": 0, "maximum": 1},
                "horizon": _pos_int, "gamma": {"type": "number", "minimum": 0, "maximum": 1},
                "n_states": _pos_int, "n_actions": _pos_int, "deterministic": {"type": "boolean"},
                "seed": _int, "path": {"type": "string"},
            },
            "additionalProperties": False,
        },
        "assessment": {
            "type": "object",
            "properties": {
                "states": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
                "cells": {"type": "array", "items": {"type": "array", "items": _int, "minItems": 2, "maxItems": 2}, "minItems": 1},
                "select": {
                    "type": "object", "required": ["k"],
                    "properties": {"k": _pos_int, "budget": _pos_int, "policy_lr": _nonneg, "seed": _int},
                    "additionalProperties": False,
                },
                "horizon": _pos_int,
                "gamma": {"type": "number", "minimum": 0, "maximum": 1},
            },
            "additionalProperties": False,
        },
        "policy": {
            "type": "object",
            "properties": {"kind": {"enum": ["tabular", "mlp"]}, "hidden": {"type": "array", "items": _pos_int}},
            "additionalProperties": False,
        },
        "predictor": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["transformer", "linear"]},
                "hidden": _pos_int, "heads": _pos_int, "layers": _pos_int,
                "return_scale": {"type": "number", "exclusiveMinimum": 0},
                "sigma": {"type": "number", "exclusiveMinimum": 0},
                "seed": _int,
            },
            "additionalProperties": False,
        },
        "trainer": {"type": "object", "properties": _TRAINER_PROPS, "additionalProperties": False},
        "runs": {
            "type": "array", "minItems": 1,
            "items": {
                "type": "object", "required": ["mode", "betas"],
                "properties": {
                    "mode": {"enum": ["co-learned", "frozen", "none"]},
                    "betas": {"type": "array", "items": _nonneg, "minItems": 1},
                },
                "additionalProperties": False,
            },
        },
        "pretrain": {
            "type": "object", "required": ["budget"],
            "properties": {
                "budget": _pos_int, "epochs": _pos_int, "lr": _nonneg,
                "optimizer": {"enum": ["sgd", "adam"]}, "batch_size": _pos_int,
                "predictor_batch_size": _pos_int, "policy_lr": _nonneg,
                "holdout_fraction": {"type": "number", "minimum": 0, "maximum": 0.9}, "seed": _int,
            },
            "additionalProperties": False,
        },
        "evaluation": {
            "type": "object", "properties": {"n_datasets": _pos_int}, "additionalProperties": False,
        },
        "ope": {
            "type": "object",
            "properties": {
                "epsilon": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "trials": _pos_int,
                "budget": {"oneOf": [{"const": "matched"}, _pos_int]},
            },
            "additionalProperties": False,
        },
        "sweep": {
            "type": "object",
            "properties": {
                "trials": _pos_int, "betas": {"type": "array", "items": _nonneg, "minItems": 1},
                "n_states": _pos_int, "n_actions": _pos_int,
                "assessment": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
                "sigma": {"type": "number", "exclusiveMinimum": 0},
                "similarity": {"type": "array", "items": {"type": "array", "items": _num}},
                "gamma": {"type": "number", "minimum": 0, "maximum": 1},
                "horizon": _pos_int, "steps": _pos_int, "lr": _nonneg,
            },
            "additionalProperties": False,
        },
        "checks": {
            "type": "object",
            "properties": {"psd": {"type": "integer", "minimum": 0}, "roundtrip": {"type": "integer", "minimum": 0},
                           "hard": {"type": "integer", "minimum": 0}, "frontier": {"type": "integer", "minimum": 0}},
            "additionalProperties": False,
        },
        "gradcheck": {
            "type": "object", "properties": {"tolerance": {"type": "number", "exclusiveMinimum": 0}},
            "additionalProperties": False,
        },
    },
    "allOf": [
        {"if": {"properties": {"kind": {"const": "train-evarl"}}},
         "then": {"required": ["environment", "assessment", "runs"]}},
        {"if": {"properties": {"kind": {"const": "ope-compare"}}},
         "then": {"required": ["environment", "assessment", "runs"]}},
        {"if": {"properties": {"kind": {"const": "pretrain-predictor"}}},
         "then": {"required": ["environment", "assessment", "pretrain"]}},
        {"if": {"properties": {"kind": {"const": "theory-sweep"}}},
         "then": {"required": ["sweep"]}},
    ],
}


class ConfigError(ValueError):
    """Invalid experiment configuration; ``problems`` lists field-level messages."""

    def __init__(self, problems: List[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


def validate_config(doc) -> List[str]:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    problems = []
    for err in sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path)):
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        problems.append(f"{where}: {err.message}")
    if not problems and doc.get("kind") in ("train-evarl", "ope-compare"):
        needs_frozen = any(r["mode"] == "frozen" for r in doc["runs"])
        if needs_frozen and "pretrain" not in doc and not doc.get("trainer", {}).get("predictor_checkpoint"):
            problems.append("runs: frozen mode needs trainer/predictor_checkpoint or a pretrain block")
    return problems


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"<root>: invalid JSON ({exc})"]) from exc
    problems = validate_config(doc)
    if problems:
        raise ConfigError(problems)
    return doc


def config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


# -- builders ------------------------------------------------------------------


def build_environment(env: dict, base_dir: str = ".") -> TabularMdp:
    kind = env["type"]
    if kind == "gridworld":
        return make_gridworld(
            env.get("width", 5), env.get("height", 5),
            goals=[tuple(g) for g in env.get("goals", [])],
            step_reward=env.get("step_reward", 0.0), goal_reward=env.get("goal_reward", 1.0),
            slip=env.get("slip", 0.0), horizon=env.get("horizon", 20), gamma=env.get("gamma", 0.95),
            start_cells=[tuple(c) for c in env["start_cells"]] if "start_cells" in env else None,
        )
    if kind == "random":
        rng = np.random.default_rng(env.get("seed", 0))
        return sample_random_mdp(
            env.get("n_states", 5), env.get("n_actions", 2), env.get("deterministic", True), rng,
            gamma=env.get("gamma", 0.9), horizon=env.get("horizon", 100),
        )
    with open(os.path.join(base_dir, env["path"])) as fh:
        return TabularMdp.from_json(fh.read())


def build_assessment(cfg: dict, mdp: TabularMdp, env: dict) -> AssessmentSpec:
    a = cfg.get("assessment", {})
    horizon, gamma = a.get("horizon", 10), a.get("gamma", 1.0)
    if "states" in a:
        states = a["states"]
    elif "cells" in a:
        width = env.get("width", 5)
        states = [y * width + x for x, y in a["cells"]]
    elif "select" in a:
        sel = a["select"]
        base = TabularSoftmaxPolicy.uniform(mdp.n_states, mdp.n_actions)
        base_cfg = TrainerConfig(
            total_interactions=sel.get("budget", 20000), policy_lr=sel.get("policy_lr", 0.05),
            predictor_mode="none", seed=sel.get("seed", 0),
        )
        run_plain_pg(mdp, base_cfg, base)
        states = select_assessment_states(mdp, base, sel["k"], np.random.default_rng(sel.get("seed", 0)))
    else:
        raise ConfigError(["assessment: one of states, cells or select is required"])
    return AssessmentSpec(states, horizon=horizon, gamma=gamma)


def build_policy(cfg: dict, mdp: TabularMdp, seed: int):
    p = cfg.get("policy", {})
    if p.get("kind", "tabular") == "mlp":
        return MlpPolicy(mdp.embeddings, mdp.n_actions, tuple(p.get("hidden", [32])), seed=seed)
    return TabularSoftmaxPolicy.uniform(mdp.n_states, mdp.n_actions)


def build_predictor(cfg: dict, mdp: TabularMdp, spec: AssessmentSpec, seed: int):
    p = cfg.get("predictor", {})
    if p.get("kind", "transformer") == "linear":
        return LinearPredictor(sigma=p.get("sigma", 1.0))
    return TransformerPredictor(
        mdp.embeddings.shape[1], spec.k, hidden=p.get("hidden", 16), heads=p.get("heads", 4),
        layers=p.get("layers", 4), seed=p.get("seed", 0) + seed, return_scale=p.get("return_scale", 1.0),
    )


def trainer_config(cfg: dict, mode: str, beta: float, seed: int, checkpoint: Optional[str]) -> TrainerConfig:
    fields = dict(cfg.get("trainer", {}))
    if checkpoint is not None:
        fields["predictor_checkpoint"] = checkpoint
    return TrainerConfig(beta=beta, predictor_mode=mode, seed=seed, **fields)


# -- io helpers ------------------------------------------------------------------


def write_atomic(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def table_csv(columns, rows) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        vals = [r[c] for c in columns] if isinstance(r, dict) else list(r)
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in vals])
    return out.getvalue()


def _se(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    x = x[np.isfinite(x)]
    return float(x.std(ddof=1) / np.sqrt(len(x))) if len(x) > 1 else 0.0


def _mean(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    x = x[np.isfinite(x)]
    return float(x.mean()) if len(x) else float("nan")


# -- jobs ------------------------------------------------------------------------


def _setup(cfg: dict, base_dir: str):
    env = cfg["environment"]
    mdp = build_environment(env, base_dir)
    spec = build_assessment(cfg, mdp, env)
    return mdp, spec


def train_job(payload: dict) -> dict:
    """One trainer run; pure function of its payload (safe for worker processes)."""
    cfg, mode, beta, seed = payload["config"], payload["mode"], payload["beta"], payload["seed"]
    mdp, spec = _setup(cfg, payload.get("base_dir", "."))
    tcfg = trainer_config(cfg, mode, beta, seed, payload.get("checkpoint"))
    predictor = None if mode in ("none", "frozen") else build_predictor(cfg, mdp, spec, seed)
    result = run_evarl(mdp, spec, tcfg, predictor, build_policy(cfg, mdp, seed))
    eval_rng = np.random.default_rng(seed)
    n_datasets = cfg.get("evaluation", {}).get("n_datasets", 20)
    J, mae = evaluate_policy(mdp, spec, result.policy, result.predictor, eval_rng, n_datasets)
    out = {
        "mode": mode, "beta": beta, "seed": seed,
        "log_csv": result.log.to_csv(header=False),
        "interactions": result.log.column("interactions").tolist(),
        "returns": result.log.column("episodic_return").tolist(),
        "final_return": J, "final_mae": mae,
        "penalty_steps": result.penalty_steps,
    }
    if payload.get("ope"):
        o = cfg.get("ope", {})
        budget = o.get("budget", "matched")
        n_traj = len(result.log.records) * tcfg.batch_size if budget == "matched" else int(budget)
        horizon = tcfg.deploy_horizon or mdp.horizon
        rows = benchmark_mae(
            standard_estimators(), result.policy, mdp, n_traj,
            np.random.default_rng(seed),
            epsilon=o.get("epsilon", 0.2), trials=o.get("trials", 1),
        )
        pred_row = {"estimator": "predictor", "mae": mae, "se": 0.0, "n_data": n_traj * horizon}
        out["ope_rows"] = [dict(pred_row, seed=seed)] + [dict(r, seed=seed) for r in rows]
    return out


def _map(fn, payloads, jobs: int):
    if jobs <= 1 or len(payloads) <= 1:
        return [fn(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, payloads))


# -- experiment kinds -----------------------------------------------------------------


def _pretrain(cfg: dict, out_dir: str, base_dir: str, seed_offset: int, artifacts: Dict[str, str]) -> str:
    mdp, spec = _setup(cfg, base_dir)
    p = cfg["pretrain"]
    seed = p.get("seed", 0) + seed_offset
    predictor = build_predictor(cfg, mdp, spec, seed_offset)
    predictor, report, _ = pretrain_predictor_from_standard_run(
        mdp, spec, p["budget"], predictor, seed=seed, policy_lr=p.get("policy_lr", 0.1),
        batch_size=p.get("batch_size", 64), epochs=p.get("epochs", 200),
        predictor_batch_size=p.get("predictor_batch_size", 256), lr=p.get("lr", 1e-3),
        optimizer=p.get("optimizer", "adam"), holdout_fraction=p.get("holdout_fraction", 0.1),
    )
    ckpt = os.path.join(out_dir, "predictor_checkpoint.json")
    write_atomic(ckpt, json.dumps(predictor.to_dict()))
    artifacts["predictor_checkpoint.json"] = ckpt
    rows = [{
        "initial_mse": report.initial_mse, "final_mse": report.final_mse,
        "heldout_mae": report.heldout_mae, "constant_mae": report.constant_mae,
        "n_records": report.n_records, "seed": seed,
    }]
    path = os.path.join(out_dir, "pretrain_report.csv")
    write_atomic(path, table_csv(list(rows[0]), rows))
    artifacts["pretrain_report.csv"] = path
    return ckpt


def _run_training(cfg, out_dir, base_dir, seeds, jobs, artifacts, ope: bool):
    checkpoint = cfg.get("trainer", {}).get("predictor_checkpoint")
    if checkpoint and not os.path.isabs(checkpoint):
        checkpoint = os.path.join(base_dir, checkpoint)
    if any(r["mode"] == "frozen" for r in cfg["runs"]) and "pretrain" in cfg and not checkpoint:
        checkpoint = _pretrain(cfg, out_dir, base_dir, seeds[0] - cfg["seeds"][0], artifacts)
    payloads = [
        {"config": cfg, "mode": r["mode"], "beta": float(b), "seed": s, "checkpoint": checkpoint,
         "base_dir": base_dir, "ope": ope}
        for r in cfg["runs"] for b in r["betas"] for s in seeds
    ]
    results = _map(train_job, payloads, jobs)

    log_text = ",".join(LOG_COLUMNS) + "\n" + "".join(r["log_csv"] for r in results)
    path = os.path.join(out_dir, "train_log.csv")
    write_atomic(path, log_text)
    artifacts["train_log.csv"] = path

    final_cols = ["mode", "beta", "seed", "final_return", "final_mae", "penalty_steps"]
    path = os.path.join(out_dir, "final.csv")
    write_atomic(path, table_csv(final_cols, results))
    artifacts["final.csv"] = path

    groups: Dict[tuple, List[dict]] = {}
    for r in results:
        groups.setdefault((r["mode"], r["beta"]), []).append(r)
    summary = [
        {"mode": m, "beta": b,
         "mean_return": _mean([x["final_return"] for x in rs]), "se_return": _se([x["final_return"] for x in rs]),
         "mean_mae": _mean([x["final_mae"] for x in rs]), "se_mae": _se([x["final_mae"] for x in rs]),
         "n_seeds": len(rs)}
        for (m, b), rs in groups.items()
    ]
    path = os.path.join(out_dir, "summary.csv")
    write_atomic(path, table_csv(list(summary[0]), summary))
    artifacts["summary.csv"] = path

    curves = {}
    for (m, b), rs in groups.items():
        curves[f"{m} beta={b:g}"] = (rs[0]["interactions"], np.mean([x["returns"] for x in rs], axis=0))
    path = os.path.join(out_dir, "returns.svg")
    write_atomic(path, line_chart(curves, "Mean episodic return", "interactions", "return"))
    artifacts["returns.svg"] = path
    by_mode = {}
    for row in summary:
        xs, ys = by_mode.setdefault(row["mode"], ([], []))
        xs.append(row["beta"])
        ys.append(row["mean_mae"])
    path = os.path.join(out_dir, "mae_vs_beta.svg")
    write_atomic(path, line_chart(by_mode, "Predictor MAE vs beta", "beta", "MAE", markers=True))
    artifacts["mae_vs_beta.svg"] = path

    if ope:
        cols = ["estimator", "mae", "se", "n_data", "seed"]
        for beta in sorted({r["beta"] for r in results}):
            rows = [row for r in results if r["beta"] == beta for row in r["ope_rows"]]
            name = f"ope_beta{beta:g}.csv"
            path = os.path.join(out_dir, name)
            write_atomic(path, table_csv(cols, rows))
            artifacts[name] = path
            agg: Dict[str, List[float]] = {}
            for row in rows:
                agg.setdefault(row["estimator"], []).append(row["mae"])
            summ = sorted(
                ({"estimator": k, "mae": _mean(v), "se": _se(v), "n_seeds": len(v)} for k, v in agg.items()),
                key=lambda d: d["mae"],
            )
            name = f"ope_summary_beta{beta:g}.csv"
            path = os.path.join(out_dir, name)
            write_atomic(path, table_csv(["estimator", "mae", "se", "n_seeds"], summ))
            artifacts[name] = path
    return results


def theorem_checks(checks: dict, rng: np.random.Generator, betas, similarity=None) -> List[dict]:
    """Counts of passing instances for the value-space results."""
    rows = []
    n = checks.get("psd", 0)
    if n:
        mins = []
        for _ in range(n):
            Q = random_problem(rng).Q
            mins.append(float(np.linalg.eigvalsh(Q).min()) / max(1.0, float(np.abs(Q).max())))
        rows.append({"check": "psd", "passed": int(sum(m >= -1e-10 for m in mins)), "total": n, "worst": min(mins)})
    n = checks.get("roundtrip", 0)
    if n:
        gaps = []
        ok = 0
        for _ in range(n):
            rep = verify_theorem1_roundtrip(bounded_variant(random_problem(rng)), float(rng.uniform(0.01, 10)))
            ok += rep.passed(1e-8)
            gaps.append(max(rep.objective_gap, rep.beta_gap))
        rows.append({"check": "roundtrip", "passed": ok, "total": n, "worst": max(gaps)})
    n = checks.get("hard", 0)
    if n:
        gaps = []
        for _ in range(n):
            prob = bounded_variant(random_problem(rng))
            eps = float(rng.uniform(0.1, 3.0))
            gaps.append(abs(solve_hard_relaxed(prob, eps).objective - projected_gradient_hard(prob, eps)[0]))
        rows.append({"check": "hard_closed_form", "passed": int(sum(g <= 1e-4 for g in gaps)), "total": n,
                     "worst": max(gaps)})
    n = checks.get("frontier", 0)
    if n:
        sim = rbf_index_similarity(5) if similarity is None else similarity
        mono = bound = 0
        for _ in range(n):
            mdp = sample_random_mdp(5, 2, True, rng)
            fr = brute_force_policy_frontier(mdp, [0, 2], sim, betas)
            mono += fr.monotone()
            bound += fr.error_bound_holds()
        rows.append({"check": "frontier_monotone", "passed": mono, "total": n, "worst": float(n - mono)})
        rows.append({"check": "error_bound_frontier", "passed": bound, "total": n, "worst": float(n - bound)})
    return rows


def _run_theory(cfg, out_dir, seeds, artifacts):
    s = cfg["sweep"]
    betas = s.get("betas", [0.0, 0.01, 0.1, 1.0, 10.0])
    n_states = s.get("n_states", 5)
    sim = np.asarray(s["similarity"]) if "similarity" in s else rbf_index_similarity(n_states, s.get("sigma", 1.5))
    res = run_beta_sweep_experiment(
        trials=s.get("trials", 1000), betas=betas, rng=np.random.default_rng(seeds[0]),
        n_states=n_states, n_actions=s.get("n_actions", 2), assessment=s.get("assessment", [0, 2]),
        similarity=sim, gamma=s.get("gamma", 0.9), horizon=s.get("horizon", 100),
        steps=s.get("steps", 2000), lr=s.get("lr", 0.1),
    )
    path = os.path.join(out_dir, "sweep.csv")
    write_atomic(path, res.to_csv())
    artifacts["sweep.csv"] = path
    bound_ok = int(np.sum((res.J - res.J_hat) ** 2 <= res.zeta_sq + 1e-12))
    checks = theorem_checks(cfg.get("checks", {}), np.random.default_rng(seeds[0] + 1), betas,
                            sim if n_states == 5 else None)
    checks.append({"check": "error_bound_sweep", "passed": bound_ok, "total": int(res.J.size),
                   "worst": float(np.max((res.J - res.J_hat) ** 2 - res.zeta_sq))})
    checks.append({"check": "sweep_zeta_non_increasing", "passed": int(res.non_increasing("mean_zeta_sq", "se_zeta_sq")),
                   "total": 1, "worst": 0.0})
    checks.append({"check": "sweep_J_non_increasing", "passed": int(res.non_increasing("mean_J", "se_J")),
                   "total": 1, "worst": 0.0})
    path = os.path.join(out_dir, "theorem_checks.csv")
    write_atomic(path, table_csv(["check", "passed", "total", "worst"], checks))
    artifacts["theorem_checks.csv"] = path
    xs = list(range(len(betas)))
    chart = line_chart(
        {"mean zeta^2": (xs, [r["mean_zeta_sq"] for r in res.rows]),
         "mean (J - J_hat)^2": (xs, [r["mean_sq_J_err"] for r in res.rows])},
        "Prediction error across the beta grid (index)", "beta index", "value", markers=True,
    )
    path = os.path.join(out_dir, "sweep.svg")
    write_atomic(path, chart)
    artifacts["sweep.svg"] = path


def gradient_checks(tolerance: float = 1e-4, seed: int = 0) -> List[dict]:
    """Finite-difference checks of every differentiable component."""
    rng = np.random.default_rng(seed)
    rows = []

    def record(name, report):
        rows.append({"check": name, "max_rel_error": report.max_rel_error, "passed": int(report.passed)})

    def leaf(*shape, positive=False):
        x = rng.normal(size=shape)
        return ad.Tensor(np.abs(x) + 0.5 if positive else x, requires_grad=True)

    a, b = leaf(3, 4), leaf(3, 4)
    unary = {
        "relu": lambda x: ad.relu(x), "tanh": ad.tanh, "exp": ad.exp, "square": ad.square,
        "softmax": ad.softmax, "log_softmax": ad.log_softmax, "layer_norm": ad.layer_norm,
        "transpose": lambda x: ad.transpose(x, (1, 0)),
    }
    for name, fn in unary.items():
        wo = rng.normal(size=fn(a).shape)
        record(f"op:{name}", ad.grad_check(lambda fn=fn, wo=wo: ad.tsum(fn(a) * wo), [a], tolerance=tolerance))
    p, w = leaf(3, 4, positive=True), rng.normal(size=(3, 4))
    record("op:log", ad.grad_check(lambda: ad.tsum(ad.log(p) * w), [p], tolerance=tolerance))
    record("op:add_mul", ad.grad_check(lambda: ad.tsum((a + b) * b * w), [a, b], tolerance=tolerance))
    m1, m2 = leaf(2, 3, 4), leaf(4, 5)
    record("op:matmul", ad.grad_check(lambda: ad.tsum(ad.square(ad.matmul(m1, m2))), [m1, m2], tolerance=tolerance))
    q, k, v = leaf(2, 5, 8), leaf(2, 5, 8), leaf(2, 5, 8)
    wq = rng.normal(size=(2, 5, 8))
    record("op:attention", ad.grad_check(
        lambda: ad.tsum(ad.scaled_dot_product_attention(q, k, v, 2) * wq), [q, k, v], tolerance=tolerance))
    t = rng.normal(size=(3, 4))
    record("op:mse_loss", ad.grad_check(lambda: ad.mse_loss(a, t), [a], tolerance=tolerance))

    pred = TransformerPredictor(2, 3, hidden=8, heads=2, layers=2, seed=seed)
    qs, st, rt, tg = rng.random((4, 2)), rng.random((4, 3, 2)), rng.normal(size=(4, 3)), rng.normal(size=4)
    record("predictor:loss", ad.grad_check(
        lambda: ad.mse_loss(pred.forward(qs, st, rt), tg), pred.parameters(), tolerance=tolerance))
    rt_leaf = ad.Tensor(rt, requires_grad=True)
    record("predictor:return_inputs", ad.grad_check(
        lambda: ad.tsum(pred.forward(qs, st, rt_leaf)), [rt_leaf], tolerance=tolerance))

    emb = rng.random((6, 2))
    states, actions, weights = rng.integers(0, 6, 20), rng.integers(0, 3, 20), rng.normal(size=20)
    mlp = MlpPolicy(emb, 3, (8,), seed=seed)
    record("policy:mlp_score", ad.grad_check(
        lambda: mlp.log_prob_sum(states, actions, weights), mlp.tensors(), tolerance=tolerance))
    tab = TabularSoftmaxPolicy(rng.normal(size=(6, 3)))
    record("policy:tabular_score", _tabular_score_check(tab, states, actions, weights, tolerance))
    return rows


def _tabular_score_check(policy, states, actions, weights, tolerance):
    theta = ad.Tensor(policy.logits, requires_grad=True, name="logits")
    analytic = policy.score_gradient(states, actions, weights)[0]

    def surrogate():
        return ad.tsum(ad.log_softmax(theta)[np.asarray(states), np.asarray(actions)] * np.asarray(weights))

    report = ad.grad_check(surrogate, [theta], tolerance=tolerance)
    # also compare the hand-written tabular gradient against the engine's
    engine = ad.grad(surrogate(), [theta])[0]
    rel = np.max(np.abs(analytic - engine) / np.maximum(np.maximum(np.abs(analytic), np.abs(engine)), 1e-6))
    report.entries.append(ad.GradCheckEntry("tabular_vs_engine", float(rel), float(np.max(np.abs(analytic - engine))),
                                            int(rel > tolerance), analytic.size))
    return report


def _run_gradcheck(cfg, out_dir, artifacts):
    tol = cfg.get("gradcheck", {}).get("tolerance", 1e-4)
    rows = gradient_checks(tol)
    path = os.path.join(out_dir, "gradcheck.csv")
    write_atomic(path, table_csv(["check", "max_rel_error", "passed"], rows))
    artifacts["gradcheck.csv"] = path
    return all(r["passed"] for r in rows)


def run_experiment(
    cfg: dict, out_dir: str, jobs: int = 1, seed_offset: int = 0, base_dir: str = "."
) -> dict:
    """Execute a validated config; returns the manifest dict (also written to disk)."""
    problems = validate_config(cfg)
    if problems:
        raise ConfigError(problems)
    os.makedirs(out_dir, exist_ok=True)
    seeds = [s + seed_offset for s in cfg["seeds"]]
    artifacts: Dict[str, str] = {}
    manifest = {
        "schema_version": SCHEMA_VERSION, "kind": cfg["kind"], "name": cfg.get("name", cfg["kind"]),
        "config_sha256": config_hash(cfg), "seeds": seeds, "seed_offset": seed_offset,
        "partial": False, "ok": True,
    }
    write_atomic(os.path.join(out_dir, "config.json"), json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    try:
        kind = cfg["kind"]
        if kind == "theory-sweep":
            _run_theory(cfg, out_dir, seeds, artifacts)
        elif kind == "train-evarl":
            _run_training(cfg, out_dir, base_dir, seeds, jobs, artifacts, ope=False)
        elif kind == "ope-compare":
            _run_training(cfg, out_dir, base_dir, seeds, jobs, artifacts, ope=True)
        elif kind == "pretrain-predictor":
            _pretrain(cfg, out_dir, base_dir, seed_offset, artifacts)
        elif kind == "gradcheck":
            manifest["ok"] = _run_gradcheck(cfg, out_dir, artifacts)
    except Exception as exc:
        manifest["partial"] = True
        manifest["ok"] = False
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        manifest["traceback"] = traceback.format_exc()
    manifest["artifacts"] = {name: sha256_file(path) for name, path in sorted(artifacts.items())}
    write_atomic(os.path.join(out_dir, MANIFEST), json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# -- summaries ----------------------------------------------------------------------


def _read_csv(path: str) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def verify_manifest(out_dir: str) -> List[str]:
    """Names of artifacts whose checksum no longer matches the manifest."""
    with open(os.path.join(out_dir, MANIFEST)) as fh:
        manifest = json.load(fh)
    return [
        name for name, digest in manifest.get("artifacts", {}).items()
        if not os.path.exists(os.path.join(out_dir, name)) or sha256_file(os.path.join(out_dir, name)) != digest
    ]


def summarize(out_dir: str) -> str:
    """Human-readable report of an output directory written by :func:`run_experiment`."""
    path = os.path.join(out_dir, MANIFEST)
    if not os.path.isdir(out_dir) or not os.path.exists(path):
        raise FileNotFoundError(f"no {MANIFEST} in {out_dir}; nothing to summarize")
    with open(path) as fh:
        manifest = json.load(fh)
    lines = [f"experiment: {manifest['name']} ({manifest['kind']})", f"seeds: {manifest['seeds']}"]
    if manifest.get("partial"):
        lines.append(f"PARTIAL OUTPUT: {manifest.get('error', 'run failed')}")
    bad = verify_manifest(out_dir)
    lines.append("checksums: ok" if not bad else f"checksums: MISMATCH in {', '.join(bad)}")
    names = manifest.get("artifacts", {})

    if "summary.csv" in names:
        rows = _read_csv(os.path.join(out_dir, "summary.csv"))
        lines.append("")
        lines.append("returns and predictor MAE by mode and beta (return normalised by the beta=0 run of the same mode, or the first row)")
        ref: Dict[str, float] = {}
        for r in rows:
            if float(r["beta"]) == 0.0:
                ref[r["mode"]] = float(r["mean_return"])
        first = float(rows[0]["mean_return"])
        lines.append(f"  {'mode':<12}{'beta':>8}{'return':>12}{'norm':>8}{'MAE':>10}{'seeds':>7}")
        for r in rows:
            base = ref.get(r["mode"], ref.get("frozen", first))
            norm = float(r["mean_return"]) / base if base else float("nan")
            lines.append(
                f"  {r['mode']:<12}{float(r['beta']):>8g}{float(r['mean_return']):>12.3f}"
                f"{norm:>8.3f}{float(r['mean_mae']):>10.3f}{int(r['n_seeds']):>7}"
            )
    for name in sorted(n for n in names if n.startswith("ope_summary")):
        rows = sorted(_read_csv(os.path.join(out_dir, name)), key=lambda r: float(r["mae"]))
        lines.append("")
        lines.append(f"value-estimate MAE by estimator ({name[len('ope_summary_'):-4]}), ascending")
        for r in rows:
            lines.append(f"  {r['estimator']:<10}{float(r['mae']):>10.3f} +- {float(r['se']):.3f}")
    if "theorem_checks.csv" in names:
        lines.append("")
        lines.append("theorem checks")
        for r in _read_csv(os.path.join(out_dir, "theorem_checks.csv")):
            lines.append(f"  {r['check']:<28}{r['passed']}/{r['total']} passed")
    if "sweep.csv" in names:
        lines.append("")
        lines.append("beta sweep")
        for r in _read_csv(os.path.join(out_dir, "sweep.csv")):
            lines.append(
                f"  beta={float(r['beta']):<6g} zeta^2={float(r['mean_zeta_sq']):.4f}+-{float(r['se_zeta_sq']):.4f}"
                f"  J={float(r['mean_J']):.4f}+-{float(r['se_J']):.4f}"
            )
    if "gradcheck.csv" in names:
        rows = _read_csv(os.path.join(out_dir, "gradcheck.csv"))
        passed = sum(int(r["passed"]) for r in rows)
        lines.append("")
        lines.append(f"gradient checks: {passed}/{len(rows)} passed")
    if "pretrain_report.csv" in names:
        r = _read_csv(os.path.join(out_dir, "pretrain_report.csv"))[0]
        lines.append("")
        lines.append(
            f"pretraining: buffer MSE {float(r['initial_mse']):.3f} -> {float(r['final_mse']):.3f}; "
            f"held-out MAE {float(r['heldout_mae']):.3f} vs constant {float(r['constant_mae']):.3f}"
        )
    return "\n".join(lines) + "\n"
