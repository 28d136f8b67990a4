"""Command-line driver for the four-stage pipeline and its baselines.

Usage::

    xappdistill <stage> [--config FILE] [--seed N] [--out DIR] [--strict]

Stages: train-teachers, collect, distill, evaluate, baseline-individual,
baseline-team, report, all, dump-config. ``--seed`` overrides the master
seed; the replicates come from ``eval.seeds``. ``XAPPDISTILL_OUT`` overrides
the configured output directory (``--out`` wins over both).

Exit codes: 0 success, 2 config error, 3 missing prerequisite, 4 numeric fault.
"""

from __future__ import annotations

import os

# Reproducible float results need single-threaded BLAS; set before numpy loads.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path
from typing import Callable, Optional

import yaml

from . import config as cfgmod
from . import nn
from .agents import DISTILLED, XAPP1, XAPP2, XApp, full_layout, train_team, train_teacher
from .config import ConfigError, RunConfig
from .distill import (collect_experience, distill, evaluate, load_buffer, loss_non_increasing,
                      save_buffer)
from .env import CellularEnv, StepMetrics, append_rate_log
from .fileio import atomic_path, sha256_file
from .metrics import EvalMetrics, report
from .mitigation import MitigationPolicy

log = logging.getLogger("xappdistill")

EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 2, 3, 4
STAGES = ("train-teachers", "collect", "distill", "evaluate", "baseline-individual",
          "baseline-team", "report")
# stage -> stages whose outputs it reads
PREREQ = {
    "collect": ("train-teachers",),
    "distill": ("collect",),
    "evaluate": ("distill",),
    "baseline-individual": ("train-teachers",),
    "report": (),
}


class MissingPrerequisite(FileNotFoundError):
    pass


class ChainError(RuntimeError):
    pass


# -- paths -------------------------------------------------------------------

def seed_dir(cfg: RunConfig, s: int) -> Path:
    return cfg.output_dir / f"seed_{s}"


def teacher_path(cfg, s, name):
    return seed_dir(cfg, s) / "teachers" / f"{name}.qnet"


def team_path(cfg, s, name):
    return seed_dir(cfg, s) / "team" / f"{name}.qnet"


def buffer_path(cfg, s):
    return seed_dir(cfg, s) / "buffer" / "transitions.xbuf"


def student_path(cfg, s):
    return seed_dir(cfg, s) / "student" / "distilled.qnet"


def eval_dir(cfg, s):
    return seed_dir(cfg, s) / "eval"


def manifest_path(cfg, stage):
    return cfg.output_dir / "manifests" / f"{stage}.json"


def require(path: Path) -> Path:
    if not path.is_file():
        raise MissingPrerequisite(f"missing prerequisite file: {path}")
    return path


# -- small writers -----------------------------------------------------------

def write_csv(path: Path, header, rows) -> None:
    with atomic_path(path) as tmp, tmp.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_curve(path: Path, curve) -> None:
    write_csv(path, ["episode", "mean_reward", "epsilon"],
              [[ep, repr(r), repr(e)] for ep, r, e in curve])


class Recorder:
    """Collects the input and output files of one stage for its manifest."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []

    def read(self, path: Path) -> Path:
        self.inputs.append(require(path))
        return path

    def wrote(self, *paths: Path) -> None:
        self.outputs.extend(paths)

    def _rel(self, p: Path) -> str:
        return p.relative_to(self.cfg.output_dir).as_posix()

    def write_manifest(self, stage: str) -> Path:
        body = {
            "stage": stage,
            "config_hash": self.cfg.config_hash(),
            "master_seed": self.cfg.master_seed,
            "seeds": self.cfg.seeds,
            "inputs": {self._rel(p): sha256_file(p) for p in sorted(set(self.inputs))},
            "outputs": {self._rel(p): sha256_file(p) for p in sorted(set(self.outputs))},
        }
        path = manifest_path(self.cfg, stage)
        with atomic_path(path) as tmp:
            tmp.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        return path


def check_chain(cfg: RunConfig, stage: str, strict: bool) -> None:
    """Compare this run's config hash and input hashes with upstream manifests."""
    for up in PREREQ.get(stage, ()):
        mpath = manifest_path(cfg, up)
        if not mpath.is_file():
            continue
        m = json.loads(mpath.read_text())
        problems = []
        if m.get("config_hash") != cfg.config_hash():
            problems.append(f"config hash differs from the one recorded by {up!r} ({mpath})")
        for rel, digest in m.get("outputs", {}).items():
            p = cfg.output_dir / rel
            if p.is_file() and sha256_file(p) != digest:
                problems.append(f"{p} changed since {up!r} wrote it")
        for msg in problems:
            if strict:
                raise ChainError(msg)
            log.warning("%s", msg)


# -- stages ------------------------------------------------------------------

def _env(cfg: RunConfig, s: int, stage: str) -> CellularEnv:
    return CellularEnv(cfg.env, cfg.stage_rng(s, stage + "/env"))


def stage_train_teachers(cfg: RunConfig, rec: Recorder) -> None:
    for s in cfg.seeds:
        for spec in (XAPP1, XAPP2):
            t0 = time.perf_counter()
            tag = f"train-teachers/{spec.name}"
            res = train_teacher(_env(cfg, s, tag), spec, cfg.training, cfg.stage_rng(s, tag))
            path = teacher_path(cfg, s, spec.name)
            nn.save(res.net, path)
            curve = path.with_name(f"{spec.name}_curve.csv")
            write_curve(curve, res.curve)
            rec.wrote(path, curve)
            log.info("seed %d %s: last-episode reward %.3f (%.0f s)", s, spec.name,
                     res.curve[-1][1] if res.curve else float("nan"), time.perf_counter() - t0)


def load_teachers(cfg: RunConfig, s: int, rec: Recorder) -> list[XApp]:
    p = cfg.env
    return [XApp(spec, nn.load(rec.read(teacher_path(cfg, s, spec.name)),
                               spec.layout(p), p.obs_width), p)
            for spec in (XAPP1, XAPP2)]


def stage_collect(cfg: RunConfig, rec: Recorder) -> None:
    steps = int(cfg.distill["buffer_steps"])
    for s in cfg.seeds:
        teachers = load_teachers(cfg, s, rec)
        buf = collect_experience(teachers, _env(cfg, s, "collect"), steps)
        path = buffer_path(cfg, s)
        save_buffer(buf, path)
        rec.wrote(path)
        log.info("seed %d: collected %d transitions", s, len(buf))


def stage_distill(cfg: RunConfig, rec: Recorder) -> None:
    d = cfg.distill
    p = cfg.env
    for s in cfg.seeds:
        buf = load_buffer(rec.read(buffer_path(cfg, s)))
        student = nn.init((p.obs_width,) + tuple(cfg.training.hidden), full_layout(p),
                          cfg.stage_rng(s, "distill/init"))
        res = distill(buf, student, p, tau=float(d["temperature"]), epochs=int(d["epochs"]),
                      lr=float(d["lr"]), rng=cfg.stage_rng(s, "distill"),
                      batch_size=int(d["batch_size"]), holdout=float(d["holdout"]))
        path = student_path(cfg, s)
        nn.save(res.student, path)
        loss = path.with_name("loss.csv")
        write_csv(loss, ["epoch", "kl_loss"], [[i, repr(v)] for i, v in enumerate(res.loss_curve)])
        agree = path.with_name("agreement.csv")
        write_csv(agree, ["head", "agreement"], [[h, repr(v)] for h, v in res.agreement.items()])
        rec.wrote(path, loss, agree)
        worst = min(res.agreement.values()) if res.agreement else float("nan")
        log.info("seed %d: final KL %.5f, worst head agreement %.3f, loss non-increasing: %s", s,
                 res.loss_curve[-1] if res.loss_curve else float("nan"), worst,
                 loss_non_increasing(res.loss_curve))


def _evaluate(cfg: RunConfig, s: int, scheme: str, xapps, policy, rec: Recorder) -> None:
    ev = cfg.eval
    env = _env(cfg, s, "eval")
    out = eval_dir(cfg, s)
    m = evaluate(xapps, env, int(ev["steps"]), cfg.thresholds, policy=policy, scheme=scheme,
                 seed=s, bin_edges=cfg.bin_edges, per_step=ev["outage_unit"] == "step")
    rec.wrote(*m.write(out))
    if ev["rate_log"]:
        rec.wrote(_rate_log(out / f"{scheme}_rates.csv", m))
    log.info("seed %d %s: outage@%g Mbps %.2f%%, mean PF %.3f, interrupts %d", s, scheme,
             m.thresholds[min(1, len(m.thresholds) - 1)], m.outage[min(1, len(m.outage) - 1)],
             m.pf_mean, m.interrupts)


def _rate_log(path: Path, m: EvalMetrics) -> Path:
    """Same columns as :func:`append_rate_log`: serving_bs is 1-based, 0 = disconnected."""
    with atomic_path(path) as tmp:
        append_rate_log(tmp, (StepMetrics(i, m.serving[i], m.rates[i], 0.0) for i in range(m.steps)))
    return path


def stage_evaluate(cfg: RunConfig, rec: Recorder) -> None:
    p = cfg.env
    for s in cfg.seeds:
        net = nn.load(rec.read(student_path(cfg, s)), DISTILLED.layout(p), p.obs_width)
        _evaluate(cfg, s, "distilled", [XApp(DISTILLED, net, p)], None, rec)


def stage_baseline_individual(cfg: RunConfig, rec: Recorder) -> None:
    pol = cfg.mitigation
    reverse = MitigationPolicy(tuple(reversed(pol.priority)), pol.delta, pol.rollback)
    for s in cfg.seeds:
        teachers = load_teachers(cfg, s, rec)
        _evaluate(cfg, s, "individual", teachers, pol, rec)
        _evaluate(cfg, s, "individual_reversed", teachers, reverse, rec)


def stage_baseline_team(cfg: RunConfig, rec: Recorder) -> None:
    p = cfg.env
    for s in cfg.seeds:
        t0 = time.perf_counter()
        r1, r2 = train_team(_env(cfg, s, "baseline-team"), XAPP1, XAPP2, cfg.training,
                            cfg.stage_rng(s, "baseline-team"), policy=cfg.mitigation)
        for spec, res in ((XAPP1, r1), (XAPP2, r2)):
            path = team_path(cfg, s, spec.name)
            nn.save(res.net, path)
            curve = path.with_name(f"{spec.name}_curve.csv")
            write_curve(curve, res.curve)
            rec.wrote(path, curve)
        log.info("seed %d team trained (%.0f s)", s, time.perf_counter() - t0)
        l1, l2 = XAPP1.layout(p), XAPP2.layout(p)
        team = [XApp(XAPP1, r1.net, p, peer_layout=l2, peer=XAPP2.name),
                XApp(XAPP2, r2.net, p, peer_layout=l1, peer=XAPP1.name)]
        _evaluate(cfg, s, "team", team, cfg.mitigation, rec)


def stage_report(cfg: RunConfig, rec: Recorder) -> None:
    for s in cfg.seeds:
        for f in sorted(eval_dir(cfg, s).glob("*_outage.csv")):
            rec.read(f)
    try:
        by_seed, median = report(cfg.output_dir)
    except FileNotFoundError as exc:
        raise MissingPrerequisite(str(exc)) from exc
    rec.wrote(by_seed, median)
    print(median.read_text(), end="")


RUNNERS: dict[str, Callable[[RunConfig, Recorder], None]] = {
    "train-teachers": stage_train_teachers,
    "collect": stage_collect,
    "distill": stage_distill,
    "evaluate": stage_evaluate,
    "baseline-individual": stage_baseline_individual,
    "baseline-team": stage_baseline_team,
    "report": stage_report,
}

# order used by ``all``
PIPELINE = ("train-teachers", "collect", "distill", "evaluate", "baseline-individual",
            "baseline-team", "report")


def run_stage(cfg: RunConfig, stage: str, strict: bool = False) -> Path:
    """Run one stage for every replicate and write its manifest."""
    if stage not in RUNNERS:
        raise ValueError(f"unknown stage {stage!r}")
    check_chain(cfg, stage, strict)
    rec = Recorder(cfg)
    log.info("stage %s -> %s", stage, cfg.output_dir)
    RUNNERS[stage](cfg, rec)
    return rec.write_manifest(stage)


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="xappdistill", description=__doc__.split("\n")[0])
    ap.add_argument("stage", choices=STAGES + ("all", "dump-config"))
    ap.add_argument("--config", help="YAML file merged over the packaged defaults")
    ap.add_argument("--seed", type=int, help="master seed (overrides the config)")
    ap.add_argument("--out", help="output directory (overrides config and $XAPPDISTILL_OUT)")
    ap.add_argument("--strict", action="store_true",
                    help="fail instead of warning when upstream artifacts do not match")
    ap.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    return ap


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    out = args.out or os.environ.get("XAPPDISTILL_OUT") or None
    try:
        cfg = cfgmod.load(args.config, seed=args.seed, out=out)
        if args.stage == "dump-config":
            print(yaml.safe_dump(cfg.raw, sort_keys=False), end="")
            return 0
        for stage in PIPELINE if args.stage == "all" else (args.stage,):
            run_stage(cfg, stage, args.strict)
    except (ConfigError, ChainError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except MissingPrerequisite as exc:
        log.error("%s; run the earlier stage first", exc)
        return EXIT_MISSING
    except nn.NumericFault as exc:
        log.error("numeric fault: %s", exc)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
