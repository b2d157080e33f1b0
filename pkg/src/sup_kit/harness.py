"""Pipeline phases, closed-loop evaluation and report files.

Artifacts in the output directory:

    demos.jsonl      episode records (kinds: demo, heldout, play)
    wm.bin           world-model parameters
    synth.jsonl      relabelled scheduler dataset
    scheduler.bin    Q/V network parameters
    report.csv       one row per variant x task
    report.json      the same metrics plus per-variant averages
    manifest.json    config digest each phase was produced with

A phase is skipped when its artifact exists and was produced with the same
relevant configuration; ``force`` recomputes it.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import env as env_mod
from . import iql as iql_mod
from . import wm as wm_mod
from .chunking import accelerate
from .config import PipelineConfig, parse_variant
from .geometry import state_deviation
from .synth import SynthConfig, SynthDataset, synthesize

log = logging.getLogger(__name__)

ARTIFACTS = {
    "gen-demos": "demos.jsonl",
    "train-wm": "wm.bin",
    "synth": "synth.jsonl",
    "train-scheduler": "scheduler.bin",
    "eval": "report.csv",
}
PHASES = list(ARTIFACTS)
_UPSTREAM = {"train-wm": "gen-demos", "synth": "train-wm", "train-scheduler": "synth", "eval": "train-scheduler"}
# config entries each phase (and so everything downstream of it) depends on
_DEPS = {
    "gen-demos": ("tasks", "chunk_len", "k_max", "demos"),
    "train-wm": ("seed", "wm"),
    "synth": ("k_min", "epsilon", "gamma", "penalty", "paper_penalty", "synth"),
    "train-scheduler": ("iql",),
    "eval": ("eval",),
}

CSV_COLUMNS = ("variant", "task", "success_rate", "mean_steps", "speedup", "violations_per_ep", "trials")


class DependencyError(RuntimeError):
    pass


def phase_digest(cfg: PipelineConfig, phase: str) -> str:
    keys = []
    for p in PHASES:
        keys += _DEPS[p]
        if p == phase:
            break
    return cfg.digest(*keys)


# ---------------------------------------------------------------------------
# configuration helpers

def task_specs(cfg: PipelineConfig):
    return [env_mod.with_chunk_len(env_mod.task_by_id(t), cfg.chunk_len) for t in cfg.tasks]


def synth_config(cfg: PipelineConfig, epsilon=None) -> SynthConfig:
    if cfg.penalty == "theory":
        kw = {"omega_profile": "theory"}
    elif cfg.penalty == "paper":
        kw = {"omega_profile": "paper", "paper_penalty": cfg.paper_penalty}
    else:
        kw = {"omega_profile": "fixed", "omega": float(cfg.penalty)}
    return SynthConfig(k_min=cfg.k_min, k_max=cfg.k_max, epsilon=cfg.epsilon if epsilon is None else epsilon,
                       gamma=cfg.gamma, stride=cfg.synth.stride, chunk_len=cfg.chunk_len, **kw)


def wm_config(cfg: PipelineConfig) -> wm_mod.WmConfig:
    w = cfg.wm
    return wm_mod.WmConfig(hidden=w.hidden, layers=w.layers, lr=w.lr, lr_final=w.lr_final, batch=w.batch,
                           epochs=w.epochs, l_max=w.l_max, patience=w.patience, clip=w.clip, seed=cfg.seed)


def iql_config(cfg: PipelineConfig) -> iql_mod.IqlConfig:
    q = cfg.iql
    return iql_mod.IqlConfig(alpha=q.expectile, gamma=cfg.gamma, lr=q.lr, lr_final=q.lr_final, batch=q.batch,
                             steps=q.steps, hidden=q.hidden, seq_hidden=q.seq_hidden, seed=cfg.seed,
                             residual=q.residual)


# ---------------------------------------------------------------------------
# phases

def generate_demos(cfg: PipelineConfig):
    """``(episodes, kinds)`` for every task: demos, held-out demos, then play rollouts."""
    eps, kinds = [], []
    d = cfg.demos
    for spec in task_specs(cfg):
        for i in range(d.per_task):
            eps.append(env_mod.gen_demo(spec, d.seed + i))
            kinds.append("demo")
        for i in range(d.heldout_per_task):
            eps.append(env_mod.gen_demo(spec, d.seed + 100_000 + i))
            kinds.append("heldout")
        for i in range(d.play_per_task):
            eps.append(env_mod.gen_play(spec, d.seed + 200_000 + i, cfg.k_max))
            kinds.append("play")
    return eps, kinds


def load_demos(out, kinds=("demo",)):
    path = os.path.join(out, ARTIFACTS["gen-demos"])
    if not os.path.exists(path):
        raise DependencyError(f"missing {path}; run the gen-demos phase first")
    eps, ks = env_mod.load_episodes(path)
    return [e for e, k in zip(eps, ks) if k in kinds]


def load_wm(out):
    path = os.path.join(out, ARTIFACTS["train-wm"])
    if not os.path.exists(path):
        raise DependencyError(f"missing {path}; run the train-wm phase first")
    return wm_mod.RwmParams.load(path)


def load_synth(out):
    path = os.path.join(out, ARTIFACTS["synth"])
    if not os.path.exists(path):
        raise DependencyError(f"missing {path}; run the synth phase first")
    return SynthDataset.read_jsonl(path)


def load_scheduler(out):
    path = os.path.join(out, ARTIFACTS["train-scheduler"])
    if not os.path.exists(path):
        raise DependencyError(f"missing {path}; run the train-scheduler phase first")
    return iql_mod.SchedulerNets.load(path)


def _manifest_path(out):
    return os.path.join(out, "manifest.json")


def _read_manifest(out):
    try:
        with open(_manifest_path(out)) as f:
            return json.load(f)
    except FileNotFoundError:
        return {}


def _write_manifest(out, m):
    with open(_manifest_path(out), "w") as f:
        json.dump(m, f, indent=1, sort_keys=True)
        f.write("\n")


def phase_is_current(cfg, out, phase) -> bool:
    path = os.path.join(out, ARTIFACTS[phase])
    return os.path.exists(path) and _read_manifest(out).get("digests", {}).get(phase) == phase_digest(cfg, phase)


def phase_seconds(out):
    """Wall-clock seconds each phase took when it last ran."""
    return dict(_read_manifest(out).get("seconds", {}))


def run_phase(cfg: PipelineConfig, out: str, phase: str, force=False, variants=None, trials=None) -> bool:
    """Run one phase; returns False when it was skipped as already current."""
    if phase not in ARTIFACTS:
        raise ValueError(f"unknown phase {phase!r}")
    os.makedirs(out, exist_ok=True)
    up = _UPSTREAM.get(phase)
    # eval checks its own inputs: only the variants asked for need artifacts
    if up is not None and phase != "eval" and not os.path.exists(os.path.join(out, ARTIFACTS[up])):
        raise DependencyError(f"phase {phase} needs {ARTIFACTS[up]}; run the {up} phase first")
    # a custom variant list or trial count is an ad-hoc evaluation, never cached
    adhoc = phase == "eval" and (variants is not None or trials is not None)
    if not force and not adhoc and phase_is_current(cfg, out, phase):
        log.info("%s: up to date, skipping", phase)
        return False
    path = os.path.join(out, ARTIFACTS[phase])
    t0 = time.perf_counter()
    if phase == "gen-demos":
        eps, kinds = generate_demos(cfg)
        env_mod.save_episodes(path, eps, kinds)
    elif phase == "train-wm":
        demos = load_demos(out, ("demo", "play"))
        params = wm_mod.train_wm(demos, wm_config(cfg))
        params.save(path)
    elif phase == "synth":
        ds = synthesize(load_demos(out), load_wm(out), synth_config(cfg))
        ds.write_jsonl(path)
    elif phase == "train-scheduler":
        nets = iql_mod.train_scheduler(load_synth(out), iql_config(cfg))
        nets.save(path)
    else:
        metrics = evaluate_variants(cfg, out, variants, trials)
        emit_report(metrics, out, cfg)
    m = _read_manifest(out)
    digests = m.setdefault("digests", {})
    for later in PHASES[PHASES.index(phase) + 1:]:
        digests.pop(later, None)  # downstream artifacts are stale now
    digests[phase] = None if adhoc else phase_digest(cfg, phase)
    m.setdefault("seconds", {})[phase] = round(time.perf_counter() - t0, 3)
    _write_manifest(out, m)
    return True


def run_pipeline(cfg: PipelineConfig, out: str, force=False, upto="eval"):
    ran = []
    for phase in PHASES:
        if run_phase(cfg, out, phase, force):
            ran.append(phase)
        if phase == upto:
            break
    return ran


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalMetrics:
    variant: str
    task: str
    success_rate: float
    mean_steps: float
    speedup: float
    violations_per_ep: float
    trials: int
    mean_rate: float = 1.0


def make_selector(variant, cfg: PipelineConfig, wm=None, nets=None):
    kind, param = parse_variant(variant)
    if kind == "base":
        return lambda o, c: 1
    if kind == "ds":
        return lambda o, c: min(param, len(c))
    if kind == "mpc":
        if wm is None:
            raise DependencyError(f"variant {variant} needs a trained world model")
        return lambda o, c: iql_mod.mpc_select_rate(wm, o.vector(), c, cfg.k_min, cfg.k_max, param)
    if nets is None:
        raise DependencyError("variant sup needs a trained scheduler")
    return lambda o, c: iql_mod.select_rate(nets, o.vector(), c, cfg.k_min, cfg.k_max)


def oracle_violation(obs, chunk, k, epsilon, world=env_mod.DEFAULT_WORLD) -> bool:
    """Ground-truth counterpart of the world-model violation check."""
    if k == 1:
        return False
    l = len(chunk) // k
    tau, _ = env_mod.rollout(obs, chunk.head(l * k), world)
    tau_k, _ = env_mod.rollout(obs, accelerate(chunk, k), world)
    return state_deviation(tau, tau_k, origin=obs.eef) > epsilon


def run_trials(spec, select, trials, seed, epsilon):
    """Closed-loop episodes; returns ``(successes, lengths, violations, rates)`` lists."""
    succ, lengths, viol, rates = [], [], [], []
    for i in range(trials):
        inst = env_mod.instantiate(spec, seed + i)
        count = [0]

        def on_chunk(obs, chunk, k, _exec):
            count[0] += oracle_violation(obs, chunk, k, epsilon)

        ep = env_mod.run_episode(inst, select, on_chunk=on_chunk)
        succ.append(ep.success)
        lengths.append(ep.length)
        viol.append(count[0])
        rates += ep.rates
    return succ, lengths, viol, rates


def _metrics(variant, task, succ, lengths, viol, rates, base_steps):
    ok = [l for s, l in zip(succ, lengths) if s]
    mean_steps = float(np.mean(ok)) if ok else float("nan")
    speedup = base_steps / mean_steps if ok and base_steps else float("nan")
    return EvalMetrics(variant, task, float(np.mean(succ)), mean_steps, float(speedup),
                       float(np.mean(viol)), len(succ), float(np.mean(rates)) if rates else float("nan"))


def evaluate(variant, tasks, trials, seed, cfg: PipelineConfig, wm=None, nets=None, base_steps=None,
             epsilon=None):
    """Metrics per task. ``base_steps`` maps task id to the base variant's mean steps;
    it is computed here when missing."""
    select = make_selector(variant, cfg, wm, nets)
    eps = cfg.epsilon if epsilon is None else epsilon
    out = []
    for spec in tasks:
        res = run_trials(spec, select, trials, seed, eps)
        if variant == "base":
            b = float(np.mean([l for s, l in zip(res[0], res[1]) if s])) if any(res[0]) else float("nan")
        elif base_steps is not None and spec.task_id in base_steps:
            b = base_steps[spec.task_id]
        else:
            b = evaluate("base", [spec], trials, seed, cfg, epsilon=eps)[0].mean_steps
        out.append(_metrics(variant, spec.task_id, *res, b))
    return out


def evaluate_variants(cfg: PipelineConfig, out, variants=None, trials=None, wm=None, nets=None):
    variants = list(variants or cfg.eval.variants)
    trials = trials or cfg.eval.trials
    tasks = task_specs(cfg)
    if "base" not in variants:
        variants = ["base"] + variants
    needs_wm = any(parse_variant(v)[0] == "mpc" for v in variants)
    if needs_wm and wm is None:
        wm = load_wm(out)
    if "sup" in variants and nets is None:
        nets = load_scheduler(out)
    metrics = []
    base_steps = None
    for v in variants:
        m = evaluate(v, tasks, trials, cfg.eval.seed, cfg, wm, nets, base_steps)
        if v == "base":
            base_steps = {x.task: x.mean_steps for x in m}
        metrics += m
    return metrics


def summarize(metrics):
    """Per-variant averages over tasks."""
    by = {}
    for m in metrics:
        by.setdefault(m.variant, []).append(m)
    return {v: {"success_rate": float(np.mean([m.success_rate for m in ms])),
                "speedup": float(np.mean([m.speedup for m in ms])),
                "violations_per_ep": float(np.mean([m.violations_per_ep for m in ms])),
                "tasks": len(ms)} for v, ms in by.items()}


def report_csv(metrics) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for m in metrics:
        d = asdict(m)
        w.writerow([repr(d[c]) if isinstance(d[c], float) else d[c] for c in CSV_COLUMNS])
    return buf.getvalue()


def parse_report_csv(text):
    rows = list(csv.DictReader(io.StringIO(text)))
    return [EvalMetrics(r["variant"], r["task"], float(r["success_rate"]), float(r["mean_steps"]),
                        float(r["speedup"]), float(r["violations_per_ep"]), int(r["trials"])) for r in rows]


def emit_report(metrics, out, cfg: PipelineConfig | None = None):
    """Write ``report.csv`` and ``report.json`` into directory ``out``."""
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "report.csv"), "w", newline="") as f:
        f.write(report_csv(metrics))
    summary = {"columns": list(CSV_COLUMNS), "metrics": [asdict(m) for m in metrics],
               "by_variant": summarize(metrics)}
    if cfg is not None:
        summary["config_digest"] = cfg.digest()
    with open(os.path.join(out, "report.json"), "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
        f.write("\n")
    return summary


def case_study(variant, task, seed, cfg: PipelineConfig, wm=None, nets=None):
    """Per-chunk rows ``(chunk index, k, phase, contact)`` of one closed-loop episode."""
    spec = env_mod.with_chunk_len(env_mod.task_by_id(task), cfg.chunk_len)
    inst = env_mod.instantiate(spec, seed)
    select = make_selector(variant, cfg, wm, nets)
    rows = []

    def on_chunk(obs, chunk, k, _exec):
        _, labels = env_mod.base_policy_chunk(obs, inst, with_labels=True)
        rows.append({"chunk": len(rows), "k": int(k), "phase": labels[0],
                     "contact": any(l in env_mod.CONTACT_PHASES for l in labels[:len(_exec) * k])})

    ep = env_mod.run_episode(inst, select, on_chunk=on_chunk)
    return rows, ep
