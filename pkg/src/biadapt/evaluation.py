"""Frame-level AUC evaluation, freeze-and-probe domain confusion, Grad-CAM and report files."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as Fn

from .nets import GRADCAM_LAYERS, Discriminator, ModelState, classify, to_nchw
from .synthdata import DomainDataset

REPORT_FILES = ("report.json", "trace.csv", "summary.md")


class UndefinedMetricError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class ReportIOError(OSError):
    pass


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg), ties count one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.size} vs {y.size}")
    pos = int((y == 1).sum())
    neg = int((y == 0).sum())
    if pos == 0 or neg == 0 or pos + neg != y.size:
        raise UndefinedMetricError("AUC needs binary labels with both classes present")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(s.size, dtype=np.float64)
    # average ranks over tie groups (1-based)
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], s.size]
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = (a + 1 + b) / 2.0
    u = ranks[y == 1].sum() - pos * (pos + 1) / 2.0
    return float(u / (pos * neg))


@dataclass(frozen=True)
class DomainResult:
    id: str
    n_test: int
    auc: float


@dataclass(frozen=True)
class EvalReport:
    run_id: str
    stage: str
    config_digest: str
    domains: tuple = ()

    def auc_of(self, domain_id: str) -> float:
        return next(d.auc for d in self.domains if d.id == domain_id)

    def to_dict(self) -> dict:
        return {"run_id": self.run_id, "stage": self.stage, "config_digest": self.config_digest,
                "domains": [asdict(d) for d in self.domains]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["run_id"], d["stage"], d["config_digest"],
                   tuple(DomainResult(x["id"], int(x["n_test"]), float(x["auc"])) for x in d["domains"]))


def _test_arrays(d: DomainDataset) -> tuple[torch.Tensor, np.ndarray]:
    if not d.labeled:
        raise ValueError(f"domain {d.domain_id!r} needs ground-truth test labels for evaluation")
    images, labels = d.arrays("test")
    return to_nchw(images), labels


def evaluate_domains(state: ModelState, domains: Sequence[DomainDataset], stage: str = "backward",
                     run_id: str = "", config_digest: str = "") -> EvalReport:
    """Per-domain AUC of H' = G o F' using the fake-class probability as score."""
    dtype = next(state.G.parameters()).dtype
    results = []
    for d in domains:
        x, y = _test_arrays(d)
        scores = state.detector_scores(x.to(dtype)).numpy()
        results.append(DomainResult(d.domain_id, len(y), auc(scores, y)))
    return EvalReport(run_id, stage, config_digest, tuple(results))


# --------------------------------------------------------------------------- domain confusion probe

@torch.no_grad()
def features_of(extractor, images: torch.Tensor, batch: int = 256) -> torch.Tensor:
    return torch.cat([extractor(images[i:i + batch]) for i in range(0, len(images), batch)])


def _held_out_accuracy(probe: Discriminator, src_held, tgt_held) -> float:
    with torch.no_grad():
        hits = (probe.logit(src_held) > 0).sum() + (probe.logit(tgt_held) <= 0).sum()
    return float(hits) / (len(src_held) + len(tgt_held))


def _fresh_probe(dim: int, hidden: int, seed: int) -> Discriminator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Discriminator(dim, hidden).double()


def probe_domain_accuracy(src_train, tgt_train, src_held, tgt_held, seed: int = 0, epochs: int = 200,
                          hidden: int = 64, lr: float = 1e-3) -> float:
    """Strong probe: full-batch Adam on centred, globally rescaled features.

    Close to a separability ceiling. Deterministic features keep domain
    information at any scale, so this stays high whenever the extractor is
    still injective along the domain direction.
    """
    src_train, tgt_train = src_train.double(), tgt_train.double()
    x = torch.cat([src_train, tgt_train])
    mu = x.mean(0)
    sd = (x - mu).pow(2).sum(1).mean().sqrt().clamp_min(1e-8)
    x = (x - mu) / sd
    y = torch.cat([torch.ones(len(src_train)), torch.zeros(len(tgt_train))]).double()
    probe = _fresh_probe(x.shape[1], hidden, seed)
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    for _ in range(epochs):
        opt.zero_grad()
        Fn.binary_cross_entropy_with_logits(probe.logit(x), y).backward()
        opt.step()
    return _held_out_accuracy(probe, (src_held.double() - mu) / sd, (tgt_held.double() - mu) / sd)


def discriminator_probe_accuracy(src_train, tgt_train, src_held, tgt_held, seed: int = 0, epochs: int = 40,
                                 hidden: int = 64, lr: float = 0.01, momentum: float = 0.9,
                                 batch: int = 32) -> float:
    """Freeze-and-probe with a fresh copy of the domain discriminator.

    Same architecture and the same optimiser family as Q during training
    (minibatch SGD with momentum on raw features), so the number answers
    whether a newly trained discriminator of that kind is still confused.
    """
    x = torch.cat([src_train, tgt_train]).double()
    y = torch.cat([torch.ones(len(src_train)), torch.zeros(len(tgt_train))]).double()
    probe = _fresh_probe(x.shape[1], hidden, seed)
    opt = torch.optim.SGD(probe.parameters(), lr=lr, momentum=momentum)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        perm = torch.from_numpy(rng.permutation(len(x)))
        for i in range(0, max(1, len(x) - batch + 1), batch):
            idx = perm[i:i + batch]
            opt.zero_grad()
            Fn.binary_cross_entropy_with_logits(probe.logit(x[idx]), y[idx]).backward()
            opt.step()
    return _held_out_accuracy(probe, src_held.double(), tgt_held.double())


# --------------------------------------------------------------------------- Grad-CAM

@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray
    target_layer: str


def _as_batch(image) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(image))
    if t.ndim == 3 and t.shape[-1] == 3:
        t = t.permute(2, 0, 1)
    return t[None].contiguous()


def gradcam_map(state: ModelState, image, target_layer: str | None = None, target_class: int = 1) -> Heatmap:
    layers = GRADCAM_LAYERS.get(state.cfg.kind, ())
    target_layer = target_layer or (layers[0] if layers else None)
    if target_class not in (0, 1):
        raise ConfigurationError("target_class must be 0 or 1")
    dtype = next(state.G.parameters()).dtype
    x = _as_batch(image).to(dtype)
    maps: dict[str, torch.Tensor] = {}
    with torch.enable_grad():
        f = state.F_prime(x, maps)
        if target_layer not in maps:
            raise ConfigurationError(f"unknown Grad-CAM layer {target_layer!r}; available: {sorted(maps)}")
        act = maps[target_layer]
        score = classify(state.G, f)[0, target_class]
        grad, = torch.autograd.grad(score, act, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(act)
    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = Fn.relu((weights * act).sum(dim=1, keepdim=True)).detach()
    cam = Fn.interpolate(cam, size=x.shape[-2:], mode="bilinear", align_corners=False)[0, 0]
    lo, hi = cam.min(), cam.max()
    cam = torch.zeros_like(cam) if hi <= lo else (cam - lo) / (hi - lo)
    return Heatmap(cam.double().numpy(), target_layer)


def save_heatmap_png(heatmap: Heatmap, path: str | Path) -> Path:
    from PIL import Image

    path = Path(path)
    arr = np.round(np.clip(heatmap.values, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)
    return path


# --------------------------------------------------------------------------- report files

def summary_table(reports: Sequence[EvalReport], source_id: str | None = None) -> str:
    """Markdown table, one row per report; the source column is marked ``(src)``."""
    ids = [d.id for d in reports[0].domains] if reports else []
    source_id = source_id or (ids[0] if ids else None)
    head = ["stage"] + [f"{i} (src)" if i == source_id else f"{i} (tgt)" for i in ids]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in reports:
        cells = [r.stage] + [f"{100 * r.auc_of(i):.2f}" for i in ids]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def emit_report(report: EvalReport, trace, out_dir: str | Path, heatmaps: Sequence = (),
                overwrite: bool = False, history: Sequence[EvalReport] = ()) -> list[Path]:
    """Write report.json, trace.csv, summary.md and optional heatmap PNGs.

    ``heatmaps`` holds ``(domain, index, class, Heatmap)`` tuples.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if not overwrite and (out / "report.json").exists():
            raise ReportIOError(f"refusing to overwrite existing report in {out}")
        written = []
        for name, text in (("report.json", report.to_json()),
                           ("trace.csv", trace.to_csv()),
                           ("summary.md", f"# Run {report.run_id}\n\nAUC (%)\n\n"
                                          + summary_table([*history, report]))):
            (out / name).write_text(text)
            written.append(out / name)
        for domain, index, cls, hm in heatmaps:
            written.append(save_heatmap_png(hm, out / f"{domain}_{index}_{cls}.png"))
    except ReportIOError:
        raise
    except OSError as exc:
        raise ReportIOError(f"cannot write report to {out}: {exc}") from exc
    return written


def load_report(path: str | Path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))
