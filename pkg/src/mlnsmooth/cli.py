"""Command-line experiment runner: ``gen``, ``train``, ``certify``, ``attack``, ``report``.

Every command reads a JSON run config (defaults below, overridden by the
file and then by flags) and works inside one output directory. Each stage
records its output files and their hashes in ``manifest.json``.

Seeds: the global seed fans out as ``SeedSequence([seed, STAGE])`` with
stage counters gen=1, sensors=2, train=3, certify=4, attack=5; per-example
streams append the pipeline id and the example index, so results do not
depend on the worker count.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import os
import platform
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .em import DivergenceError, TrainConfig, load_model, save_model, write_history_csv
from .pipeline import Care, MainOnly, train_reasoning
from .rules import RuleError, parse_rules, render_rules
from .smoothing import (
    ABSTAIN,
    SmoothingConfig,
    build_curve,
    certify,
    read_results_jsonl,
    write_curves_csv,
    write_results_jsonl,
)
from .synth import (
    SensorBank,
    TaskSpec,
    corrupt_sensors,
    gen_task,
    pgd_attack,
    predicate_names,
    read_dataset_csv,
    rules_from_task,
    save_json,
    task_from_dict,
    task_to_dict,
    train_sensors,
    write_dataset_csv,
)

STAGE = {"gen": 1, "sensors": 2, "train": 3, "certify": 4, "attack": 5}
PIPELINES = {"care": 0, "main": 1}

DEFAULTS: dict = {
    "seed": 0,
    "out": "runs/default",
    "workers": 1,
    "task": {},
    "rules": None,
    "rule_weights": {"attribute": 1.0, "node": 1.0},
    "sensors": {"sigma_train": 0.25, "hidden_main": 0, "hidden_knowledge": 0, "copies": 8},
    "train": {"epochs": 20, "lr_theta": 0.1, "lr_theta_late": 0.01, "grad_clip": 1.0,
              "z_copies": 4},
    "smoothing": {"sigma": 0.25, "n0": 100, "n": 10_000, "alpha": 0.001,
                  "grid": [0.0, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75],
                  "pipelines": ["care", "main"], "max_examples": None},
    "attack": {"eps_fractions": [0.0, 0.25, 0.5], "steps": 100, "step_size": 0.2,
               "mc_samples": 100, "norm": "l2", "max_examples": 100,
               "corruption_fraction": 0.3},
}

OPEN_SECTIONS = ("task", "train")

FILES = {
    "task": "task.json", "train_data": "train.csv", "test_data": "test.csv",
    "rules": "rules.mln", "sensors": "sensors.json", "model": "model.json",
    "history": "history.csv", "curve": "curve.csv", "attack": "attack.csv",
    "attack_summary": "attack_summary.csv", "corruption": "corruption.csv",
    "report": "report.txt", "manifest": "manifest.json",
}


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if not path and k in OPEN_SECTIONS:
            # keys checked later against the dataclass they configure
            if not isinstance(v, dict):
                raise ConfigError(f"{k!r} must be an object")
            out[k] = {**out[k], **copy.deepcopy(v)}
        elif isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{e.lineno}: {e.msg}") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg = _merge(cfg, doc)
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k == "sigma":
            cfg["smoothing"]["sigma"] = v
        else:
            cfg[k] = v
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    if not isinstance(cfg["workers"], int) or cfg["workers"] < 1:
        raise ConfigError("workers must be a positive integer")
    try:
        task_spec(cfg)
        train_config(cfg)
        smoothing_config(cfg)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    for p in cfg["smoothing"]["pipelines"]:
        if p not in PIPELINES:
            raise ConfigError(f"unknown pipeline {p!r}")
    if cfg["attack"]["norm"] not in ("l2", "linf"):
        raise ConfigError("attack.norm must be 'l2' or 'linf'")
    if not 0 <= cfg["attack"]["corruption_fraction"] <= 1:
        raise ConfigError("attack.corruption_fraction must lie in [0, 1]")
    if cfg["rules"] is not None and not Path(cfg["rules"]).is_file():
        raise ConfigError(f"rule file {cfg['rules']} not found")


def task_spec(cfg: dict) -> TaskSpec:
    if "seed" in cfg["task"]:
        raise ValueError("set the seed at the top level, not under task")
    return TaskSpec(seed=cfg["seed"], **cfg["task"])


def stage_seed(cfg: dict, stage: str) -> int:
    return int(np.random.SeedSequence([cfg["seed"], STAGE[stage]]).generate_state(1)[0])


def train_config(cfg: dict) -> TrainConfig:
    d = {k: v for k, v in cfg["train"].items() if k != "z_copies"}
    if "seed" in d:
        raise ValueError("set the seed at the top level, not under train")
    names = {f.name for f in fields(TrainConfig)}
    bad = set(d) - names
    if bad:
        raise ValueError(f"unknown training options: {sorted(bad)}")
    return TrainConfig(seed=stage_seed(cfg, "train"), **d)


def smoothing_config(cfg: dict) -> SmoothingConfig:
    s = cfg["smoothing"]
    return SmoothingConfig(sigma=s["sigma"], n0=s["n0"], n=s["n"], alpha=s["alpha"])


def config_hash(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k not in ("out", "workers")}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


# ------------------------------------------------------------------ manifest


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def update_manifest(out: Path, cfg: dict, stage: str, files: list[str], seconds: float) -> None:
    path = out / FILES["manifest"]
    man = json.loads(path.read_text()) if path.exists() else {}
    man["config_hash"] = config_hash(cfg)
    man["versions"] = {"mlnsmooth": __version__, "numpy": np.__version__,
                       "scipy": scipy.__version__, "python": platform.python_version()}
    man.setdefault("stages", {})[stage] = {
        "files": {f: _sha256(out / f) for f in files},
        "seconds": seconds,
    }
    digest = hashlib.sha256()
    for name in sorted(man["stages"]):
        for f, h in sorted(man["stages"][name]["files"].items()):
            digest.update(f"{name}/{f}:{h}\n".encode())
    man["result_hash"] = digest.hexdigest()
    _atomic_write(path, json.dumps(man, indent=1, sort_keys=True))


def _need(out: Path, *keys: str) -> list[Path]:
    paths = [out / FILES[k] for k in keys]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise ConfigError(f"missing inputs: {', '.join(missing)}")
    return paths


# ------------------------------------------------------------------ stages


def _load_task(out: Path):
    _need(out, "task", "train_data", "test_data", "rules")
    task = task_from_dict(json.loads((out / FILES["task"]).read_text()))
    train = read_dataset_csv(out / FILES["train_data"], task.spec.D)
    test = read_dataset_csv(out / FILES["test_data"], task.spec.D)
    path = out / FILES["rules"]
    try:
        rules = parse_rules(path.read_text())
    except RuleError as e:
        raise ConfigError(f"{path}: {e}") from e
    if list(rules.names) != predicate_names(task):
        raise ConfigError(f"{path}: predicates must match the task layout")
    return task, train, test, rules


def cmd_gen(cfg: dict) -> list[str]:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    task, train, test = gen_task(task_spec(cfg))
    if cfg["rules"] is not None:
        src = Path(cfg["rules"])
        try:
            rules = parse_rules(src.read_text())
        except RuleError as e:
            raise ConfigError(f"{src}: {e}") from e
    else:
        w = cfg["rule_weights"]
        rules = rules_from_task(task, w["attribute"], w["node"])
    save_json(out / FILES["task"], task_to_dict(task))
    write_dataset_csv(out / FILES["train_data"], task, train)
    write_dataset_csv(out / FILES["test_data"], task, test)
    (out / FILES["rules"]).write_text(render_rules(rules))
    return [FILES[k] for k in ("task", "train_data", "test_data", "rules")]


def cmd_train(cfg: dict) -> list[str]:
    out = Path(cfg["out"])
    task, train, _, rules = _load_task(out)
    s = cfg["sensors"]
    bank = train_sensors(task, train, s["sigma_train"], hidden_main=s["hidden_main"],
                         hidden_knowledge=s["hidden_knowledge"], copies=s["copies"],
                         seed=stage_seed(cfg, "sensors"))
    save_json(out / FILES["sensors"], bank.to_dict())
    tc = train_config(cfg)
    model = train_reasoning(task, rules, bank, train, s["sigma_train"], tc,
                            copies=cfg["train"]["z_copies"])
    save_model(out / FILES["model"], model, tc)
    write_history_csv(out / FILES["history"], model.history)
    return [FILES[k] for k in ("sensors", "model", "history")]


def _load_pipelines(out: Path, rules):
    p_sens, p_model = _need(out, "sensors", "model")
    bank = SensorBank.from_dict(json.loads(p_sens.read_text()))
    model = load_model(p_model, rules)
    return {"care": Care(bank, model), "main": MainOnly(bank)}


def _certify_one(args):
    clf, x, scfg, seed = args
    return certify(clf, x, scfg, np.random.default_rng(seed))


def _map(fn, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def _limit(n: int, cap) -> int:
    return n if cap is None else min(n, int(cap))


def cmd_certify(cfg: dict) -> list[str]:
    out = Path(cfg["out"])
    task, _, test, rules = _load_task(out)
    pipes = _load_pipelines(out, rules)
    scfg = smoothing_config(cfg)
    n = _limit(len(test), cfg["smoothing"]["max_examples"])
    grid = cfg["smoothing"]["grid"]
    curves, files = {}, []
    for name in cfg["smoothing"]["pipelines"]:
        jobs = [
            (pipes[name], test.X[i], scfg,
             np.random.SeedSequence([cfg["seed"], STAGE["certify"], PIPELINES[name], i]))
            for i in range(n)
        ]
        results = _map(_certify_one, jobs, cfg["workers"])
        fname = f"certify_{name}.jsonl"
        write_results_jsonl(out / fname, results, test.y[:n])
        curves[name] = build_curve(results, test.y[:n], grid)
        files.append(fname)
    write_curves_csv(out / FILES["curve"], curves)
    return files + [FILES["curve"]]


def _attack_one(args):
    main, x, label, eps, a, sigma, seed = args
    return pgd_attack(main, x, label, eps, steps=a["steps"], step_size=a["step_size"],
                      mc_samples=a["mc_samples"], sigma=sigma, norm=a["norm"],
                      rng=np.random.default_rng(seed))


def cmd_attack(cfg: dict) -> list[str]:
    out = Path(cfg["out"])
    task, _, test, rules = _load_task(out)
    pipes = _load_pipelines(out, rules)
    care, main = pipes["care"], pipes["main"]
    a = cfg["attack"]
    sigma = cfg["smoothing"]["sigma"]
    n = _limit(len(test), a["max_examples"])
    # spread the attacked subset over all classes
    idx = np.linspace(0, len(test) - 1, n).round().astype(int) if n < len(test) else np.arange(n)
    sep = task.prototype_separation()
    rows, summary = [], []
    for k, frac in enumerate(a["eps_fractions"]):
        eps = float(frac) * sep
        jobs = [
            (main.bank.main, test.X[i], int(test.y[i]), eps, a, sigma,
             np.random.SeedSequence([cfg["seed"], STAGE["attack"], k, int(i)]))
            for i in idx
        ]
        adv = np.array(_map(_attack_one, jobs, cfg["workers"]))
        pm, pc = main(adv), care(adv)
        y = test.y[idx]
        for i, lab, m_, c_ in zip(idx, y, pm, pc):
            rows.append([repr(eps), int(i), int(lab), int(m_), int(c_)])
        summary.append([repr(eps), repr(float(frac)), repr(float(np.mean(pm == y))),
                        repr(float(np.mean(pc == y)))])
    with open(out / FILES["attack"], "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["eps", "index", "label", "main_pred", "care_pred"])
        wr.writerows(rows)
    with open(out / FILES["attack_summary"], "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["eps", "eps_fraction", "main_accuracy", "care_accuracy"])
        wr.writerows(summary)
    # knowledge correction: flip the main sensor's top two on a fraction of clean inputs
    Z = care.bank.sense(test.X)
    rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], STAGE["attack"], 99]))
    Zc, hit = corrupt_sensors(Z, task.spec.C, a["corruption_fraction"], rng)
    pm = np.argmax(Zc[:, : task.spec.C], axis=1)
    pc = care.from_confidences(Zc)
    with open(out / FILES["corruption"], "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["pipeline", "accuracy", "accuracy_on_corrupted", "n", "n_corrupted"])
        for name, p in (("main", pm), ("care", pc)):
            on_hit = float(np.mean(p[hit] == test.y[hit])) if hit.size else float("nan")
            wr.writerow([name, repr(float(np.mean(p == test.y))), repr(on_hit), len(test),
                         int(hit.size)])
    return [FILES[k] for k in ("attack", "attack_summary", "corruption")]


def _read_csv(path: Path) -> list[list[str]]:
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def _fmt(s: str) -> str:
    return f"{float(s):.3g}"


def _table(rows: list[list[str]]) -> str:
    widths = [max(len(r[j]) for r in rows) for j in range(len(rows[0]))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows)


def render_report(out: Path) -> str:
    (curve,) = _need(out, "curve")
    parts = []
    rows = _read_csv(curve)
    parts.append("Certified accuracy by l2 radius\n"
                 + _table([rows[0]] + [[r[0]] + [_fmt(v) for v in r[1:]] for r in rows[1:]]))
    for name in PIPELINES:
        p = out / f"certify_{name}.jsonl"
        if p.exists():
            res, labels = read_results_jsonl(p)
            abst = sum(r.prediction == ABSTAIN for r in res)
            parts.append(f"{name}: {len(res)} examples, {abst} abstained")
    if (out / FILES["attack_summary"]).exists():
        rows = _read_csv(out / FILES["attack_summary"])
        parts.append("Accuracy under PGD on the main sensor\n"
                     + _table([rows[0]] + [[_fmt(v) for v in r] for r in rows[1:]]))
    if (out / FILES["corruption"]).exists():
        rows = _read_csv(out / FILES["corruption"])
        parts.append("Main-sensor corruption\n"
                     + _table([rows[0]] + [[r[0], _fmt(r[1]), _fmt(r[2]), r[3], r[4]]
                                           for r in rows[1:]]))
    return "\n\n".join(parts) + "\n"


def cmd_report(cfg: dict) -> list[str]:
    out = Path(cfg["out"])
    text = render_report(out)
    (out / FILES["report"]).write_text(text)
    sys.stdout.write(text)
    return [FILES["report"]]


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "certify": cmd_certify,
            "attack": cmd_attack, "report": cmd_report}


def run(command: str, cfg: dict) -> list[str]:
    """Run one stage and record it in the manifest."""
    t0 = time.perf_counter()
    files = COMMANDS[command](cfg)
    update_manifest(Path(cfg["out"]), cfg, command, files, time.perf_counter() - t0)
    return files


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mlnsmooth", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--sigma", type=float, help="smoothing noise level")
        p.add_argument("--workers", type=int)
        p.add_argument("--out", help="run directory")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, {"seed": args.seed, "sigma": args.sigma,
                                        "workers": args.workers, "out": args.out})
        run(args.command, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DivergenceError, FloatingPointError) as e:
        print(f"numerical divergence: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
