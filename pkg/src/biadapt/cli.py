"""Experiment orchestration and the ``biadapt`` command line.

Exit codes: 0 success, 1 configuration or other error, 2 training divergence,
3 I/O failure. Failures also leave an ``error.json`` in the run directory.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from statistics import median
from typing import Mapping, Sequence

import numpy as np
import torch

from . import __version__
from .config import (ConfigError, ExperimentSpec, ScenarioSpec, parse_config, parse_text, preset_spec, serialize,
                     with_overrides)
from .evaluation import ReportIOError, emit_report, evaluate_domains, gradcam_map, save_heatmap_png
from .nets import GRADCAM_LAYERS, ModelState, build_model_state, load_checkpoint, save_checkpoint
from .synthdata import (DomainDataset, IngestionError, Scenario, build_domain, export_domain, load_dataset_dir,
                        make_scenario, split_domain)
from .trainer import (DivergenceError, StageData, TrainTrace, apply_thread_limit, backward_adaptation_stage,
                      baseline_config, forward_adaptation_stage)

log = logging.getLogger("biadapt")

EXIT_OK, EXIT_ERROR, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3
STAGES = ("baseline", "forward", "backward")

# Each ablation variant is a set of flat config overrides. T2 = 0 means the
# backward stage is skipped, so only forward-stage AUCs are reported.
VARIANTS: dict[str, dict] = {
    "baseline": {"adapter": "none", "alpha2": 0.0, "T2": 0},
    "+GRL": {"adapter": "GRL", "T2": 0},
    "+MMD": {"adapter": "MMD", "T2": 0},
    "+FA": {"adapter": "FA", "T2": 0},
    "+SD": {"adapter": "none", "alpha2": 0.0, "backward_objective": "SD"},
    "+Ent": {"adapter": "none", "alpha2": 0.0, "backward_objective": "ENT"},
    "full BA": {"adapter": "FA", "backward_objective": "SD"},
}


# --------------------------------------------------------------------------- scenario assembly

def _unique_ids(ids: Sequence[str]) -> list[str]:
    seen: dict[str, int] = {}
    out = []
    for i in ids:
        n = seen.get(i, 0)
        seen[i] = n + 1
        out.append(i if n == 0 else f"{i}_{n}")
    return out


def build_scenario(spec: ExperimentSpec) -> Scenario:
    sc = spec.scenario
    if sc.source_dir:
        split_seed = spec.train.seed
        src = split_domain(load_dataset_dir(sc.source_dir, True, sc.side), sc.train_fraction, split_seed)
        tgts = [split_domain(load_dataset_dir(p, True, sc.side), sc.train_fraction, split_seed)
                for p in sc.target_dirs]
        return make_scenario(src, tgts)
    src_seed, tgt_seeds = sc.seeds(spec.train.seed)
    ids = _unique_ids([sc.source_kind, *sc.target_kinds])
    src = _renamed(build_domain(sc.source_kind, src_seed, sc.n_per_class, sc.side, sc.train_fraction), ids[0])
    tgts = [_renamed(build_domain(k, s, sc.n_per_class, sc.side, sc.train_fraction), i)
            for k, s, i in zip(sc.target_kinds, tgt_seeds, ids[1:])]
    return make_scenario(src, tgts)


def _renamed(d: DomainDataset, domain_id: str) -> DomainDataset:
    if d.domain_id == domain_id:
        return d

    def tag(samples):
        return tuple(replace(s, domain_id=domain_id) for s in samples)

    return DomainDataset(domain_id, tag(d.train), tag(d.test), d.labeled)


def eval_domains(scenario: Scenario) -> list[DomainDataset]:
    return [scenario.source, *scenario.targets]


# --------------------------------------------------------------------------- single experiment

def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def manifest(spec: ExperimentSpec) -> dict:
    src_seed, tgt_seeds = spec.scenario.seeds(spec.train.seed)
    return {"package_version": __version__, "torch_version": torch.__version__, "numpy_version": np.__version__,
            "config_digest": spec.digest(), "config": spec.to_dict(), "config_text": serialize(spec),
            "seeds": {"train": spec.train.seed, "source_data": src_seed, "target_data": list(tgt_seeds)}}


@dataclass
class ExperimentResult:
    status: int
    out_dir: Path
    reports: dict = field(default_factory=dict)
    states: dict = field(default_factory=dict)
    seconds: float = 0.0


def _heatmaps(state: ModelState, domains: Sequence[DomainDataset], n: int) -> list:
    out = []
    for d in domains:
        for idx, s in enumerate(d.test[:n]):
            out.append((d.domain_id, idx, s.label, gradcam_map(state, s.image, target_class=1)))
    return out


def run_experiment(spec: ExperimentSpec, out_dir: str | Path | None = None, keep_states: bool = False
                   ) -> ExperimentResult:
    """Baseline, forward and backward runs with a report and checkpoint per stage."""
    out = Path(out_dir or Path(spec.out_dir) / spec.run_id)
    t0 = time.perf_counter()
    result = ExperimentResult(EXIT_OK, out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "error.json").unlink(missing_ok=True)
        apply_thread_limit()
        _write_json(out / "manifest.json", manifest(spec))
        (out / "config.txt").write_text(serialize(spec))
        scenario = build_scenario(spec)
        domains = eval_domains(scenario)
        cfg, digest = spec.train, spec.digest()
        init = build_model_state(spec.backbone, seed=cfg.seed)
        data = StageData.from_scenario(scenario, torch.float32)

        history: list = []

        def finish(stage: str, st: ModelState, trace: TrainTrace) -> None:
            save_checkpoint(st, out / f"{stage}.pt")
            if not spec.evaluate:
                return
            report = evaluate_domains(st, domains, stage, spec.run_id, digest)
            hm = _heatmaps(st, domains, spec.heatmaps) if stage == "backward" and spec.heatmaps else ()
            emit_report(report, trace, out / stage, hm, overwrite=True, history=history)
            history.append(report)
            result.reports[stage] = report

        base, trace = forward_adaptation_stage(init.clone(), scenario, baseline_config(cfg), data=data)
        finish("baseline", base, trace)
        state, trace = forward_adaptation_stage(init, scenario, cfg, data=data)
        finish("forward", state, trace)
        fwd = state.clone() if keep_states else None
        state, trace = backward_adaptation_stage(state, scenario, cfg, data=data)
        finish("backward", state, trace)
        if keep_states:
            result.states = {"baseline": base, "forward": fwd, "backward": state}
    except DivergenceError as exc:
        result.status = EXIT_DIVERGED
        _safe_error(out, "divergence", str(exc), record=asdict(exc.record))
    except (ReportIOError, IngestionError, OSError) as exc:
        result.status = EXIT_IO
        _safe_error(out, "io", str(exc))
    except (ConfigError, ValueError, RuntimeError) as exc:
        result.status = EXIT_ERROR
        _safe_error(out, type(exc).__name__, str(exc))
    result.seconds = time.perf_counter() - t0
    return result


def _safe_error(out: Path, kind: str, message: str, **extra) -> None:
    log.error("%s: %s", kind, message)
    try:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "error.json", {"error": kind, "message": message, **extra})
    except OSError:
        pass


# --------------------------------------------------------------------------- ablation grid

_BACKWARD_ONLY = ("T2", "lr_backward", "batch_backward", "backward_objective", "teacher_update", "ema_decay",
                  "teacher_grad", "freeze_classifier")


def _forward_key(spec: ExperimentSpec) -> str:
    t = spec.train
    t = replace(t, **{k: getattr(type(t)(), k) for k in _BACKWARD_ONLY},
                weights=replace(t.weights, alpha3=1.0, alpha4=1.0, tau=1.0))
    blob = json.dumps([asdict(t), asdict(spec.backbone), asdict(spec.scenario)], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def scenario_name(sc: ScenarioSpec) -> str:
    if sc.source_dir:
        return f"{Path(sc.source_dir).name}->{'+'.join(Path(p).name for p in sc.target_dirs)}"
    return f"{sc.source_kind}->{'+'.join(sc.target_kinds)}"


@dataclass
class AblationCell:
    variant: str
    scenario: str
    seed: int
    forward: dict | None = None
    backward: dict | None = None
    status: str = "ok"
    seconds: float = 0.0

    def final(self) -> dict | None:
        return self.backward if self.backward is not None else self.forward


@dataclass
class AblationResult:
    cells: list = field(default_factory=list)
    states: dict = field(default_factory=dict)
    source_ids: dict = field(default_factory=dict)

    def _cells(self, variant: str, scenario: str | None = None) -> list[AblationCell]:
        return [c for c in self.cells if c.variant == variant and (scenario is None or c.scenario == scenario)
                and c.status == "ok"]

    def median_auc(self, variant: str, role: str = "target", stage: str = "final",
                   scenario: str | None = None) -> float:
        """Median over seeds; ``role`` is ``source`` or ``target`` (mean over targets)."""
        vals = []
        for c in self._cells(variant, scenario):
            aucs = c.final() if stage == "final" else getattr(c, stage)
            if aucs is None:
                continue
            vals.append(_role_auc(aucs, self.source_ids[c.scenario], role))
        if not vals:
            return float("nan")
        return float(median(vals))

    def rows(self) -> list[dict]:
        out = []
        for variant in dict.fromkeys(c.variant for c in self.cells):
            for scen in dict.fromkeys(c.scenario for c in self.cells if c.variant == variant):
                cells = [c for c in self.cells if c.variant == variant and c.scenario == scen]
                ok = [c for c in cells if c.status == "ok"]
                row = {"variant": variant, "scenario": scen, "seeds": len(ok)}
                for stage in ("forward", "backward"):
                    for role in ("source", "target"):
                        have = [c for c in ok if getattr(c, stage) is not None]
                        row[f"{stage}_{role}"] = (self.median_auc(variant, role, stage, scen) if have else None)
                failed = [c for c in cells if c.status != "ok"]
                row["status"] = "ok" if not failed else f"failed {len(failed)}/{len(cells)}: {failed[0].status}"
                out.append(row)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["variant", "scenario", "seeds", "forward_source", "forward_target", "backward_source",
                "backward_target", "status"]
        w = csv.DictWriter(buf, cols, lineterminator="\n")
        w.writeheader()
        for r in self.rows():
            w.writerow({k: ("" if r[k] is None else r[k]) for k in cols})
        return buf.getvalue()

    def to_markdown(self) -> str:
        head = "| variant | scenario | seeds | forward src | forward tgt | backward src | backward tgt | status |"
        lines = [head, "|" + "---|" * 8]
        pct = lambda v: "" if v is None or v != v else f"{100 * v:.2f}"  # noqa: E731
        for r in self.rows():
            lines.append(f"| {r['variant']} | {r['scenario']} | {r['seeds']} | {pct(r['forward_source'])} | "
                         f"{pct(r['forward_target'])} | {pct(r['backward_source'])} | "
                         f"{pct(r['backward_target'])} | {r['status']} |")
        return "AUC (%), median over seeds\n\n" + "\n".join(lines) + "\n"


def _role_auc(aucs: dict, source_id: str, role: str) -> float:
    if role == "source":
        return aucs[source_id]
    tgt = [v for k, v in aucs.items() if k != source_id]
    return float(np.mean(tgt))


def run_ablation(spec: ExperimentSpec, variants: Mapping[str, dict] | Sequence[str] = tuple(VARIANTS),
                 seeds: Sequence[int] = (0,), scenarios: Sequence[ScenarioSpec] | None = None,
                 out_dir: str | Path | None = None, keep_states: bool = False) -> AblationResult:
    """Run every (variant, scenario, seed) cell; a failing cell is marked and the grid continues.

    Cells sharing an identical forward-stage configuration reuse one forward run.
    """
    apply_thread_limit()
    if not isinstance(variants, Mapping):
        unknown = [v for v in variants if v not in VARIANTS]
        if unknown:
            raise ConfigError(f"unknown ablation variant(s) {unknown}; known: {list(VARIANTS)}")
        variants = {v: VARIANTS[v] for v in variants}
    scenarios = list(scenarios or [spec.scenario])
    result = AblationResult()
    for scen in scenarios:
        name = scenario_name(scen)
        for seed in seeds:
            base = replace(spec, scenario=scen).with_seed(seed)
            try:
                scenario = build_scenario(base)
            except (ValueError, OSError) as exc:
                for v in variants:
                    result.cells.append(AblationCell(v, name, seed, status=f"{type(exc).__name__}: {exc}"))
                continue
            result.source_ids[name] = scenario.source.domain_id
            domains = eval_domains(scenario)
            data = StageData.from_scenario(scenario, torch.float32)
            cache: dict[str, ModelState] = {}
            for vname, delta in variants.items():
                cell = AblationCell(vname, name, seed)
                t0 = time.perf_counter()
                try:
                    vspec = with_overrides(base, delta)
                    cfg = vspec.train
                    key = _forward_key(vspec)
                    if key not in cache:
                        st = build_model_state(vspec.backbone, seed=cfg.seed)
                        cache[key], _ = forward_adaptation_stage(st, scenario, cfg, data=data)
                    fwd = cache[key]
                    cell.forward = _aucs(evaluate_domains(fwd, domains, "forward"))
                    bwd = None
                    if cfg.T2 > 0:
                        bwd, _ = backward_adaptation_stage(fwd.clone(), scenario, cfg, data=data)
                        cell.backward = _aucs(evaluate_domains(bwd, domains, "backward"))
                    if keep_states:
                        result.states[(vname, name, seed)] = {"forward": fwd, "backward": bwd}
                except (ConfigError, ValueError, RuntimeError) as exc:
                    cell.status = f"{type(exc).__name__}: {exc}"
                cell.seconds = time.perf_counter() - t0
                log.info("ablation %s %s seed %d: %s (%.1fs)", vname, name, seed, cell.status, cell.seconds)
                result.cells.append(cell)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.md").write_text(result.to_markdown())
        (out / "ablation.csv").write_text(result.to_csv())
        _write_json(out / "cells.json", {"cells": [asdict(c) for c in result.cells]})
    return result


def _aucs(report) -> dict:
    return {d.id: d.auc for d in report.domains}


# --------------------------------------------------------------------------- command line

def _load_spec(args) -> ExperimentSpec:
    if args.config:
        spec = parse_config(args.config)
        if args.preset:
            spec = parse_text(f"preset: {args.preset}\n" + "\n".join(
                ln for ln in Path(args.config).read_text().splitlines()
                if not ln.split("#", 1)[0].strip().startswith("preset:")), args.config)
    else:
        spec = preset_spec(args.preset or "desk")
    if args.seed is not None:
        spec = spec.with_seed(args.seed)
    if args.out:
        spec = replace(spec, out_dir=args.out)
    return spec


def _cmd_generate(spec: ExperimentSpec, args) -> int:
    scenario = build_scenario(spec)
    root = Path(spec.out_dir)
    for d in eval_domains(scenario):
        for split in ("train", "test"):
            export_domain(d, root / d.domain_id / split, split)
    print(f"exported {1 + len(scenario.targets)} domains to {root}")
    return EXIT_OK


def _cmd_train(spec: ExperimentSpec, args) -> int:
    res = run_experiment(spec, Path(spec.out_dir))
    for stage, rep in res.reports.items():
        print(stage, " ".join(f"{d.id}={d.auc:.4f}" for d in rep.domains))
    print(f"status {res.status} in {res.seconds:.1f}s -> {res.out_dir}")
    return res.status


def _cmd_evaluate(spec: ExperimentSpec, args) -> int:
    state = load_checkpoint(args.checkpoint)
    domains = eval_domains(build_scenario(spec))
    report = evaluate_domains(state, domains, args.stage, spec.run_id, spec.digest())
    emit_report(report, TrainTrace(), spec.out_dir, overwrite=args.overwrite)
    print(report.to_json(), end="")
    return EXIT_OK


def _cmd_ablate(spec: ExperimentSpec, args) -> int:
    seeds = [int(s) for s in args.seeds.split(",")]
    names = [v.strip() for v in args.variants.split(",")] if args.variants else list(VARIANTS)
    res = run_ablation(spec, names, seeds, out_dir=spec.out_dir)
    print(res.to_markdown(), end="")
    return EXIT_OK


def _cmd_gradcam(spec: ExperimentSpec, args) -> int:
    state = load_checkpoint(args.checkpoint)
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for d in eval_domains(build_scenario(spec)):
        for idx, s in enumerate(d.test[:args.n]):
            hm = gradcam_map(state, s.image, args.layer, args.target_class)
            save_heatmap_png(hm, out / f"{d.domain_id}_{idx}_{s.label}.png")
    print(f"wrote heatmaps to {out} (layers available: {', '.join(GRADCAM_LAYERS.get(state.cfg.kind, ()))})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="biadapt", description="Bi-directional domain adaptation for forgery detection")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key: value config file")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--preset", choices=("desk", "paper-parity", "baseline"))
        return sp

    common(sub.add_parser("generate", help="export the synthetic domains as PNG folders"))
    common(sub.add_parser("train", help="baseline, forward and backward runs with reports"))
    ev = common(sub.add_parser("evaluate", help="AUC report for a checkpoint"))
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--stage", default="backward", choices=STAGES)
    ev.add_argument("--overwrite", action="store_true")
    ab = common(sub.add_parser("ablate", help="ablation grid over variants and seeds"))
    ab.add_argument("--seeds", default="0")
    ab.add_argument("--variants", help=f"comma list from: {', '.join(VARIANTS)}")
    gc = common(sub.add_parser("gradcam", help="Grad-CAM heatmaps for test images"))
    gc.add_argument("--checkpoint", required=True)
    gc.add_argument("--layer")
    gc.add_argument("--target-class", type=int, default=1)
    gc.add_argument("-n", type=int, default=4, help="images per domain")
    return p


COMMANDS = {"generate": _cmd_generate, "train": _cmd_train, "evaluate": _cmd_evaluate,
            "ablate": _cmd_ablate, "gradcam": _cmd_gradcam}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        spec = _load_spec(args)
        return COMMANDS[args.verb](spec, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ReportIOError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
