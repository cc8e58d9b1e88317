"""Command-line pipeline: gen, segment, train, expand, eval, ablate, report."""
from __future__ import annotations

import argparse
import copy
import json
import os
import shutil
import sys
from dataclasses import asdict
from typing import Any, Mapping, Sequence


from . import __version__
from . import policy as pl
from . import segmenter as sg
from . import simworld as sw
from . import trainer as tr
from .trajcore import EpisodeSet, load_episodes, save_episodes

COMMANDS = ("gen", "segment", "train", "expand", "eval", "ablate", "report")
REQUIRED = object()


ConfigError = tr.ConfigError


def _train_defaults() -> dict:
    d = asdict(tr.TrainCfg())
    d.pop("seed")
    return d


DEFAULTS: dict[str, Any] = {
    "task_suite": REQUIRED,
    "seed": 0,
    "episodes_per_task": 20,
    "train": _train_defaults(),
    "continual": {
        "new_skill": "Press", "suite": "press", "episodes_per_task": 40,
        "steps": 1500, "warmup": 150, "peak_lr": 1e-3, "final_lr": 1e-4, "use_ema": True,
    },
    "segment": {"trans_thresh": 0.03, "rot_thresh": 0.05, "grip_thresh": 0.1, "window": 5, "refiner": "rule"},
    "eval": {
        "policy": "learned", "planner": "oracle", "mode": "oracle", "tasks": [], "rollouts": 20, "seed": 1000,
        "chain_length": 5, "chains": 0, "use_ema": True, "count_recoveries": False, "flow_steps": 10,
        "max_steps": 400, "max_thinks": 64, "watchdog": 40,
    },
    "ablate": {"variants": ["sg_moe", "no_moe", "token_moe", "timestep_moe"]},
    "report": {"label": "", "episode": 0},
    "paths": {"episodes": None, "checkpoint": None, "input": None},
}
INPUT_PATHS = ("episodes", "checkpoint", "input")
CHOICES = {
    "train.variant": tr.sm.VARIANTS,
    "eval.policy": ("learned", "oracle", "scripted"),
    "eval.planner": ("oracle", "learned"),
    "eval.mode": ("oracle", "learned", "watchdog"),
    "segment.refiner": ("rule", "identity"),
}


# -- config ----------------------------------------------------------------

def _type_name(v) -> str:
    if isinstance(v, bool):
        return "bool"
    if isinstance(v, int):
        return "int"
    if isinstance(v, float):
        return "float"
    if isinstance(v, str):
        return "string"
    if isinstance(v, list):
        return "list"
    if isinstance(v, dict):
        return "object"
    return "null"


def _check(key: str, default, value):
    if default is REQUIRED:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected string, got {_type_name(value)}")
        return value
    if default is None:  # optional path
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"{key}: expected string or null, got {_type_name(value)}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected bool, got {_type_name(value)}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected int, got {_type_name(value)}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected float, got {_type_name(value)}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected string, got {_type_name(value)}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(x, str) for x in value):
            raise ConfigError(f"{key}: expected list of strings, got {_type_name(value)}")
        return list(value)
    raise ConfigError(f"{key}: unsupported default")


def _merge(defaults: Mapping, given: Mapping, prefix: str = "") -> dict:
    if not isinstance(given, Mapping):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected object, got {_type_name(given)}")
    for k in given:
        if k not in defaults:
            raise ConfigError(f"unknown key: {prefix}{k}")
    out = {}
    for k, d in defaults.items():
        key = prefix + k
        if isinstance(d, dict):
            out[k] = _merge(d, given.get(k, {}), key + ".")
        elif k in given:
            out[k] = _check(key, d, given[k])
        elif d is REQUIRED:
            raise ConfigError(f"missing required field: {key}")
        else:
            out[k] = copy.deepcopy(d)
    return out


def validate(cfg: dict) -> dict:
    for key, allowed in CHOICES.items():
        sec, name = key.split(".")
        if cfg[sec][name] not in allowed:
            raise ConfigError(f"{key}: expected one of {list(allowed)}, got {cfg[sec][name]!r}")
    if cfg["task_suite"] not in sw.TASK_SUITES:
        raise ConfigError(f"task_suite: unknown suite {cfg['task_suite']!r}; known {sorted(sw.TASK_SUITES)}")
    for t in cfg["eval"]["tasks"]:
        if t not in sw.TASKS:
            raise ConfigError(f"eval.tasks: unknown task {t!r}")
    for v in cfg["ablate"]["variants"]:
        if v not in tr.sm.VARIANTS:
            raise ConfigError(f"ablate.variants: unknown variant {v!r}")
    for k in INPUT_PATHS:
        p = cfg["paths"][k]
        if p is not None and not os.path.exists(p):
            raise ConfigError(f"paths.{k}: {p} does not exist")
    train_kw = dict(cfg["train"], seed=cfg["seed"])
    tr.TrainCfg(**train_kw)  # range checks
    sg.Thresholds(**{k: v for k, v in cfg["segment"].items() if k != "refiner"})
    return cfg


def resolve(raw: Mapping, overrides: Sequence[str] = (), env: Mapping[str, str] | None = None,
            seed: int | None = None) -> dict:
    """Defaults < config file < ``--set`` overrides; seed: config < ATOMICVLA_SEED < --seed."""
    raw = copy.deepcopy(dict(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = raw
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key}: {p} is not an object")
        node[parts[-1]] = value
    env = os.environ if env is None else env
    if env.get("ATOMICVLA_SEED") not in (None, ""):
        try:
            raw["seed"] = int(env["ATOMICVLA_SEED"])
        except ValueError:
            raise ConfigError(f"ATOMICVLA_SEED: expected int, got {env['ATOMICVLA_SEED']!r}") from None
    if seed is not None:
        raw["seed"] = int(seed)
    return validate(_merge(DEFAULTS, raw))


def load_config(path: str, overrides: Sequence[str] = (), env: Mapping[str, str] | None = None,
                seed: int | None = None) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} does not exist")
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return resolve(raw, overrides, env, seed)


def train_cfg(cfg: Mapping, **kw) -> tr.TrainCfg:
    d = dict(cfg["train"], seed=cfg["seed"])
    d.update(kw)
    return tr.TrainCfg(**d)


def thresholds(cfg: Mapping) -> sg.Thresholds:
    return sg.Thresholds(**{k: v for k, v in cfg["segment"].items() if k != "refiner"})


# -- artifacts -------------------------------------------------------------

def dump_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_json(path: str):
    with open(path) as fh:
        return json.load(fh)


class Outdir:
    """Stage artifacts in ``<out>.partial`` and rename on success."""

    def __init__(self, out: str, cfg: Mapping, command: str):
        self.final = out
        self.path = out + ".partial"
        if os.path.exists(self.path):
            shutil.rmtree(self.path)
        os.makedirs(self.path)
        dump_json(self.file("config.json"), cfg)
        dump_json(self.file("provenance.json"), {"tool": "atomicvla", "version": __version__, "command": command})

    def file(self, *parts: str) -> str:
        p = os.path.join(self.path, *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    def dir(self, *parts: str) -> str:
        p = os.path.join(self.path, *parts)
        os.makedirs(p, exist_ok=True)
        return p

    def commit(self) -> str:
        if os.path.exists(self.final):
            shutil.rmtree(self.final)
        os.replace(self.path, self.final)
        return self.final


def _write_episodes(path: str, es: EpisodeSet) -> None:
    with open(path, "w") as fh:
        save_episodes(es, fh)


def _read_episodes(path: str) -> EpisodeSet:
    with open(path) as fh:
        return load_episodes(fh)


def _require(cfg, key: str) -> str:
    p = cfg["paths"][key]
    if p is None:
        raise ConfigError(f"paths.{key} is required for this command")
    return p


def _episodes_path(p: str) -> str:
    if os.path.isdir(p):
        for name in ("annotated.jsonl", "episodes.jsonl"):
            if os.path.exists(os.path.join(p, name)):
                return os.path.join(p, name)
        raise ConfigError(f"{p}: no episodes.jsonl or annotated.jsonl inside")
    return p


def _checkpoint_path(p: str) -> str:
    if os.path.exists(os.path.join(p, "manifest.json")):
        return p
    if os.path.exists(os.path.join(p, "checkpoint", "manifest.json")):
        return os.path.join(p, "checkpoint")
    raise ConfigError(f"{p}: no checkpoint manifest found")


def _eval_tasks(cfg) -> list[str]:
    if cfg["eval"]["tasks"]:
        return list(cfg["eval"]["tasks"])
    specs = sw.suite_specs(cfg["task_suite"])
    short = [s.name for s in specs if len(s.decomposition) == 1]
    return short or [s.name for s in specs]


def _policy(cfg, bundle) -> pl.Policy:
    e = cfg["eval"]
    if e["policy"] == "learned":
        return pl.Policy(bundle=bundle, planner=e["planner"], mode=e["mode"], actor="decoder", flow_steps=e["flow_steps"])
    # oracle and scripted both run the script expert under the oracle planner
    return pl.Policy(bundle=None, planner="oracle", mode="oracle", actor="scripted")


def _limits(cfg) -> pl.Limits:
    e = cfg["eval"]
    return pl.Limits(e["max_steps"], e["max_thinks"], e["watchdog"])


def rollouts(policy: pl.Policy, tasks: Sequence[str], n: int, seed: int, limits: pl.Limits,
             count_recoveries: bool = False) -> list[dict]:
    out = []
    for ti, name in enumerate(tasks):
        for r in range(n):
            s = int(seed) * 10_007 + ti * 1_000 + r
            res, _ = pl.run_episode(policy, sw.TASKS[name], s, limits, count_recoveries=count_recoveries)
            out.append(res.to_json())
    return out


# -- tables ----------------------------------------------------------------

def success_table(episodes: Sequence[Mapping]) -> dict:
    per: dict[str, list[int]] = {}
    for ep in episodes:
        per.setdefault(ep["task"], []).append(bool(ep["success"]))
    per_task = {t: sum(v) / len(v) for t, v in sorted(per.items())}
    overall = sum(per_task.values()) / len(per_task) if per_task else 0.0
    return {"per_task": per_task, "success": overall, "n": len(episodes)}


def chain_table(rollouts_: Sequence[Mapping], length: int) -> dict:
    completed = [int(r["completed"]) for r in rollouts_]
    stage, avg = sw.chain_metrics(completed, length)
    return {"length": length, "n": len(completed), "completed": stage, "avg_len": avg}


def ranking(tables: Mapping[str, Mapping]) -> list[str]:
    return sorted(tables, key=lambda k: (-tables[k]["success"], k))


# -- plot ------------------------------------------------------------------

PALETTE = ("#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7",
           "#9c755f", "#bab0ac", "#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02")


def route_bands(result: Mapping) -> list[tuple[int, int, int]]:
    """(start step, end step, expert) runs over env steps, merged across adjacent chunks."""
    bands: list[list[int]] = []
    t = 0
    for row in result.get("act_trace", []):
        k, n = int(row[1]), int(row[3])
        if n <= 0:
            continue
        if bands and bands[-1][2] == k and bands[-1][1] == t:
            bands[-1][1] = t + n
        else:
            bands.append([t, t + n, k])
        t += n
    return [tuple(b) for b in bands]


def emit_plot(result: Mapping) -> bytes:
    """Routing strip: expert index as colored bands over env steps, gate w as a line, Think ticks as markers."""
    px, left, top, strip = 4, 40, 24, 30
    bands = [b for b in route_bands(result) if b[2] >= 0]
    steps = max([b[1] for b in route_bands(result)] + [int(result.get("steps", 0)), 1])
    width = left + steps * px + 10
    height = top + strip + 50
    title = f"{result.get('task', '')} seed {result.get('seed', '')}"
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<text x="{left}" y="14" font-family="monospace" font-size="11">{title}</text>',
    ]
    if not bands:
        lines.append(f'<rect class="band" data-expert="-1" x="{left}" y="{top}" width="{steps * px}" height="{strip}" fill="#dddddd"/>')
        lines.append(f'<text x="{left + 4}" y="{top + 19}" font-family="monospace" font-size="11">no routing</text>')
    else:
        for a, b, k in bands:
            lines.append(
                f'<rect class="band" data-expert="{k}" data-start="{a}" data-end="{b}" x="{left + a * px}" y="{top}" '
                f'width="{(b - a) * px}" height="{strip}" fill="{PALETTE[k % len(PALETTE)]}"/>')
        pts = []
        t = 0
        y0 = top + strip + 40
        for row in result.get("act_trace", []):
            w, n = float(row[2]), int(row[3])
            for x in (t, t + n):
                pts.append(f"{left + x * px},{y0 - 30 * w:.2f}")
            t += n
        lines.append(f'<polyline class="gate" fill="none" stroke="#333333" stroke-width="1" points="{" ".join(pts)}"/>')
        lines.append(f'<text x="2" y="{y0 - 26}" font-family="monospace" font-size="9">w=1</text>')
        lines.append(f'<text x="2" y="{y0 + 3}" font-family="monospace" font-size="9">w=0</text>')
    for s in result.get("think_steps", []):
        x = left + int(s) * px
        lines.append(f'<line class="think" x1="{x}" y1="{top - 4}" x2="{x}" y2="{top + strip + 4}" stroke="#000000" stroke-width="2"/>')
    lines.append("</svg>")
    return ("\n".join(lines) + "\n").encode()


def parse_plot(svg: bytes) -> tuple[list[int], int]:
    """Band expert sequence and number of Think markers in an emitted SVG."""
    import re

    text = svg.decode()
    ks = [int(m) for m in re.findall(r'class="band" data-expert="(-?\d+)"', text)]
    return ks, text.count('class="think"')


# -- commands --------------------------------------------------------------

def cmd_gen(cfg, out: Outdir) -> dict:
    specs = sw.suite_specs(cfg["task_suite"])
    es = sw.generate_dataset(specs, cfg["episodes_per_task"], cfg["seed"])
    _write_episodes(out.file("episodes.jsonl"), es)
    stats = sg.skill_histogram(es)
    info = {"episodes": len(es), "frames": int(sum(len(e.traj) for e in es)), "skill_counts": stats.counts}
    dump_json(out.file("summary.json"), info)
    return info


def cmd_segment(cfg, out: Outdir) -> dict:
    es = _read_episodes(_episodes_path(_require(cfg, "episodes")))
    th = thresholds(cfg)
    refiner = sg.identity_refiner if cfg["segment"]["refiner"] == "identity" else None
    score = sg.score_annotations(es, th, refiner) if all(e.skills is not None for e in es) else None
    annotated = []
    with open(out.file("segments.jsonl"), "w") as fh:
        for ep in es:
            ann = sg.annotate_trajectory(ep.traj, th, refiner)
            fh.write(json.dumps({"episode": ep.meta.episode, "length": ann.length,
                                 "segments": [s.to_json() for s in ann.segments]}, sort_keys=True) + "\n")
            new = copy.copy(ep)
            new.skills = ann.projection()
            annotated.append(new)
    _write_episodes(out.file("annotated.jsonl"), EpisodeSet(annotated))
    info = {"episodes": len(es), "score": score.to_json() if score else None}
    dump_json(out.file("summary.json"), info)
    return info


def _training_set(cfg) -> EpisodeSet:
    p = cfg["paths"]["episodes"]
    if p is not None:
        return _read_episodes(_episodes_path(p))
    return sw.generate_dataset(sw.suite_specs(cfg["task_suite"]), cfg["episodes_per_task"], cfg["seed"])


def cmd_train(cfg, out: Outdir) -> dict:
    es = _training_set(cfg)
    tcfg = train_cfg(cfg)
    skills = tr.BASE_SKILLS if all(l in tr.BASE_SKILLS for l in sg.skill_histogram(es).weights) else sg.SKILL_LABELS
    log_path = out.file("metrics.jsonl")
    with open(log_path, "w") as fh:
        ck = tr.train(tcfg, es, skills, log_fn=lambda rec: fh.write(json.dumps(rec, sort_keys=True) + "\n"))
    ck.save(out.dir("checkpoint"))
    info = {"step": ck.step, "final": ck.metrics[-1] if ck.metrics else None,
            "routing": tr.routing_report(ck.weights())}
    dump_json(out.file("summary.json"), info)
    return info


def cmd_expand(cfg, out: Outdir) -> dict:
    base = tr.Checkpoint.load(_checkpoint_path(_require(cfg, "checkpoint")))
    c = cfg["continual"]
    new = sw.generate_dataset(sw.suite_specs(c["suite"]), c["episodes_per_task"], cfg["seed"] + 7)
    old_names = list(base.bundle.registry.names)
    old_tasks = [sw.SHORT_TASK_BY_SKILL[n] for n in old_names if n in sw.SHORT_TASK_BY_SKILL]
    held = sw.generate_dataset([sw.TASKS[t] for t in old_tasks], 5, cfg["seed"] + 13)
    old_tab = tr.build_frame_table(held, tuple(old_names) + (c["new_skill"],))
    tcfg = train_cfg(cfg, variant=base.bundle.cfg.variant, steps=c["steps"], warmup=c["warmup"],
                     peak_lr=c["peak_lr"], final_lr=c["final_lr"])
    ck = tr.continual_train(base, new, tcfg, c["new_skill"], old_table=old_tab, use_ema=c["use_ema"])
    ck.save(out.dir("checkpoint"))
    dump_json(out.file("forgetting_report.json"), ck.report)
    e = cfg["eval"]
    if e["rollouts"] > 0:
        lim = _limits(cfg)
        pol_b = pl.Policy(base.weights(e["use_ema"]), e["planner"], e["mode"], "decoder", e["flow_steps"])
        pol_a = pl.Policy(ck.weights(e["use_ema"]), e["planner"], e["mode"], "decoder", e["flow_steps"])
        dump_json(out.file("episodes", "before.json"), rollouts(pol_b, old_tasks, e["rollouts"], e["seed"], lim))
        new_task = sw.SHORT_TASK_BY_SKILL.get(c["new_skill"])
        dump_json(out.file("episodes", "after.json"),
                  rollouts(pol_a, old_tasks + ([new_task] if new_task else []), e["rollouts"], e["seed"], lim))
    return {"report": ck.report}


def _load_bundle(cfg):
    if cfg["eval"]["policy"] != "learned":
        return None
    ck = tr.Checkpoint.load(_checkpoint_path(_require(cfg, "checkpoint")))
    return ck.weights(cfg["eval"]["use_ema"])


def cmd_eval(cfg, out: Outdir) -> dict:
    bundle = _load_bundle(cfg)
    pol = _policy(cfg, bundle)
    e = cfg["eval"]
    lim = _limits(cfg)
    info: dict = {}
    if e["rollouts"] > 0:
        eps = rollouts(pol, _eval_tasks(cfg), e["rollouts"], e["seed"], lim, e["count_recoveries"])
        dump_json(out.file("episodes", "eval.json"), eps)
        info["success"] = success_table(eps)
    if e["chains"] > 0:
        skills = bundle.registry.names if bundle is not None else tr.BASE_SKILLS
        runner = pl.make_runner(pol, lim, e["count_recoveries"])
        cm = sw.evaluate_chain(runner, e["chain_length"], e["chains"], e["seed"], skills)
        dump_json(out.file("chains", "eval.json"), {"length": cm.length, "rollouts": cm.rollouts})
        with open(out.file("chain.csv"), "w") as fh:
            fh.write(cm.csv())
        info["chain"] = cm.to_json()
    dump_json(out.file("summary.json"), info)
    return info


def cmd_ablate(cfg, out: Outdir) -> dict:
    es = _training_set(cfg)
    table = tr.build_frame_table(es, tr.BASE_SKILLS)
    e = cfg["eval"]
    lim = _limits(cfg)
    tasks = _eval_tasks(cfg)
    tables = {}
    for v in cfg["ablate"]["variants"]:
        ck = tr.train(train_cfg(cfg, variant=v), table)
        ck.save(out.dir("checkpoints", v))
        pol = pl.Policy(ck.weights(e["use_ema"]), e["planner"], e["mode"], "decoder", e["flow_steps"])
        eps = rollouts(pol, tasks, e["rollouts"], e["seed"], lim, e["count_recoveries"])
        dump_json(out.file("episodes", f"{v}.json"), eps)
        tables[v] = success_table(eps)
    result = {"variants": tables, "ranking": ranking(tables)}
    dump_json(out.file("ablation.json"), result)
    return result


def build_report(src: str, label: str = "", episode: int = 0) -> tuple[dict, bytes]:
    """Recompute every table from the per-episode JSON under ``src``."""
    ep_dir = os.path.join(src, "episodes")
    ch_dir = os.path.join(src, "chains")
    if not os.path.isdir(ep_dir) and not os.path.isdir(ch_dir):
        raise ConfigError(f"{src}: no episodes/ or chains/ directory")
    success, chains, store = {}, {}, {}
    if os.path.isdir(ep_dir):
        for name in sorted(os.listdir(ep_dir)):
            if name.endswith(".json"):
                eps = read_json(os.path.join(ep_dir, name))
                store[name[:-5]] = eps
                success[name[:-5]] = success_table(eps)
    if os.path.isdir(ch_dir):
        for name in sorted(os.listdir(ch_dir)):
            if name.endswith(".json"):
                d = read_json(os.path.join(ch_dir, name))
                chains[name[:-5]] = chain_table(d["rollouts"], d["length"])
                store.setdefault(name[:-5], [ep for r in d["rollouts"] for ep in r["episodes"]])
    rep: dict = {"tool": "atomicvla", "version": __version__, "success": success, "ranking": ranking(success),
                 "chains": chains}
    if "before" in success and "after" in success:
        b, a = success["before"]["per_task"], success["after"]["per_task"]
        common = [t for t in b if t in a]
        rep["forgetting"] = {
            "per_task": {t: a[t] - b[t] for t in common},
            "old_delta": (sum(a[t] for t in common) - sum(b[t] for t in common)) / len(common) if common else 0.0,
        }
    pick = label or (rep["ranking"][0] if rep["ranking"] else next(iter(store), ""))
    eps = store.get(pick, [])
    chosen = eps[episode] if 0 <= episode < len(eps) else {}
    rep["plot"] = {"label": pick, "episode": episode if chosen else None}
    return rep, emit_plot(chosen)


def cmd_report(cfg, out: Outdir) -> dict:
    src = _require(cfg, "input")
    rep, svg = build_report(src, cfg["report"]["label"], cfg["report"]["episode"])
    dump_json(out.file("report.json"), rep)
    with open(out.file("routing.svg"), "wb") as fh:
        fh.write(svg)
    return rep


HANDLERS = {"gen": cmd_gen, "segment": cmd_segment, "train": cmd_train, "expand": cmd_expand,
            "eval": cmd_eval, "ablate": cmd_ablate, "report": cmd_report}


def _bool(text: str) -> bool:
    t = text.lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="atomicvla", description=__doc__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--use-ema", type=_bool)
    p.add_argument("--count-recoveries", type=_bool)
    p.add_argument("--policy", choices=CHOICES["eval.policy"])
    p.add_argument("--episodes")
    p.add_argument("--checkpoint")
    p.add_argument("--input")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted config override")
    p.add_argument("--version", action="version", version=f"atomicvla {__version__}")
    return p


def run(argv: Sequence[str] | None = None) -> int:
    args = parser().parse_args(argv)
    out_dir = args.out or f"out_{args.command}"
    overrides = list(args.set)
    for flag, key in (("use_ema", "eval.use_ema"), ("count_recoveries", "eval.count_recoveries")):
        v = getattr(args, flag)
        if v is not None:
            overrides.append(f"{key}={json.dumps(v)}")
    if args.policy:
        overrides.append(f"eval.policy={json.dumps(args.policy)}")
    for flag in INPUT_PATHS:
        v = getattr(args, flag)
        if v is not None:
            overrides.append(f"paths.{flag}={json.dumps(v)}")
    out = None
    try:
        cfg = load_config(args.config, overrides, seed=args.seed)
        out = Outdir(out_dir, cfg, args.command)
        info = HANDLERS[args.command](cfg, out)
        final = out.commit()
        print(json.dumps({"status": "ok", "command": args.command, "out": final,
                          "summary": _brief(info)}, sort_keys=True))
        return 0
    except Exception as e:  # every module error becomes a structured record
        rec = {"status": "error", "command": args.command, "error": type(e).__name__,
               "module": type(e).__module__, "message": str(e)}
        if out is not None:
            rec["partial"] = out.path
            dump_json(out.file("error.json"), rec)
        print(json.dumps(rec, sort_keys=True), file=sys.stderr)
        return 2 if isinstance(e, ConfigError) else 1


def _brief(info) -> Any:
    if isinstance(info, dict):
        return {k: v for k, v in info.items() if not isinstance(v, list) or len(v) < 20}
    return info


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
