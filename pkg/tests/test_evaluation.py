import json
from fractions import Fraction

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import assume, given, strategies as st
from PIL import Image

from biadapt.evaluation import (
    REPORT_FILES, ConfigurationError, DomainResult, EvalReport, Heatmap, ReportIOError, UndefinedMetricError, auc,
    discriminator_probe_accuracy, emit_report, evaluate_domains, gradcam_map, load_report, probe_domain_accuracy,
    summary_table,
)
from biadapt.nets import BackboneConfig, build_model_state
from biadapt.trainer import StepRecord, TrainTrace

scores_labels = st.integers(2, 50).flatmap(lambda n: st.tuples(
    st.lists(st.integers(-20, 20), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n)))


def brute(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    return sum(Fraction(1) if p > q else Fraction(1, 2) if p == q else Fraction(0)
               for p in pos for q in neg) / (len(pos) * len(neg))


# ---------------------------------------------------------------- AUC

def test_auc_examples():
    assert auc([0.9, 0.8, 0.3, 0.1], [1, 0, 1, 0]) == 0.75
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.9, 0.8, 0.3, 0.1], [0, 0, 1, 1]) == 0.0
    assert auc([0.5] * 6, [0, 1] * 3) == 0.5


@given(scores_labels)
def test_auc_matches_bruteforce_exactly(sl):
    s, y = sl
    assume(0 < sum(y) < len(y))
    assert auc(s, y) == float(brute(s, y))


@given(scores_labels)
def test_auc_invariants(sl):
    s, y = sl
    assume(0 < sum(y) < len(y))
    s = np.asarray(s, float)
    a = auc(s, y)
    assert auc(np.exp(s / 10), y) == pytest.approx(a, abs=1e-12)
    assert auc(s ** 3 + 2 * s, y) == pytest.approx(a, abs=1e-12)
    assert a + auc(-s, y) == pytest.approx(1.0, abs=1e-12)
    perm = np.random.default_rng(0).permutation(len(s))
    assert auc(s[perm], np.asarray(y)[perm]) == a


def test_auc_errors():
    with pytest.raises(UndefinedMetricError):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetricError):
        auc([0.1, 0.2], [0, 2])
    with pytest.raises(ValueError):
        auc([0.1, 0.2, 0.3], [0, 1])


def test_untrained_models_score_near_chance(tiny_backbone, small_scenario):
    domains = [small_scenario.source, *small_scenario.targets]
    means = []
    for seed in range(5):
        rep = evaluate_domains(build_model_state(tiny_backbone, seed=seed), domains, "forward")
        means.append(np.mean([d.auc for d in rep.domains]))
    assert 0.35 <= np.mean(means) <= 0.65


def test_evaluate_requires_labels(tiny_backbone, small_scenario):
    st_ = build_model_state(tiny_backbone)
    with pytest.raises(ValueError):
        evaluate_domains(st_, [small_scenario.targets[0].unlabeled()])


def test_evaluate_report_fields(tiny_backbone, small_scenario):
    domains = [small_scenario.source, *small_scenario.targets]
    rep = evaluate_domains(build_model_state(tiny_backbone), domains, "forward", "r1", "abc")
    assert (rep.run_id, rep.stage, rep.config_digest) == ("r1", "forward", "abc")
    assert [d.id for d in rep.domains] == [d.domain_id for d in domains]
    assert all(d.n_test == len(dom.test) for d, dom in zip(rep.domains, domains))


# ---------------------------------------------------------------- probes

def _blobs(shift, n=200, d=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(n, d, generator=g, dtype=torch.float64)
    b = torch.randn(n, d, generator=g, dtype=torch.float64)
    b[:, 0] += shift
    return a[:150], b[:150], a[150:], b[150:]


@pytest.mark.parametrize("probe", [probe_domain_accuracy, discriminator_probe_accuracy])
def test_probes_separate_and_confuse(probe):
    assert probe(*_blobs(6.0)) > 0.95
    assert abs(probe(*_blobs(0.0)) - 0.5) < 0.12


def test_probe_is_deterministic():
    args = _blobs(1.0)
    assert discriminator_probe_accuracy(*args, seed=3) == discriminator_probe_accuracy(*args, seed=3)
    assert probe_domain_accuracy(*args, seed=3) == probe_domain_accuracy(*args, seed=3)


# ---------------------------------------------------------------- Grad-CAM

def test_gradcam_shape_and_range(tiny_backbone):
    st_ = build_model_state(tiny_backbone, seed=1)
    img = np.random.default_rng(0).random((32, 32, 3)).astype(np.float32)
    for layer in ("freq_conv", "visual_tokens"):
        hm = gradcam_map(st_, img, layer)
        assert hm.values.shape == (32, 32) and hm.target_layer == layer
        assert hm.values.min() >= 0.0 and hm.values.max() <= 1.0
    assert gradcam_map(st_, img).target_layer == "freq_conv"


def test_gradcam_zero_classifier_gives_zero_map(tiny_backbone):
    st_ = build_model_state(tiny_backbone)
    for p in st_.G.parameters():
        nn.init.zeros_(p)
    hm = gradcam_map(st_, np.full((32, 32, 3), 0.5, np.float32))
    assert not hm.values.any()


def test_gradcam_hand_oracle():
    """One-channel CNN: the map must be ReLU(w * activation) rescaled."""
    cfg = BackboneConfig(kind="tiny_cnn", freq_channels=4)
    st_ = build_model_state(cfg, seed=0, dtype=torch.float64)
    img = np.random.default_rng(1).random((32, 32, 3))
    x = torch.tensor(img).permute(2, 0, 1)[None]
    maps = {}
    f = st_.F_prime(x, maps)
    act = maps["cnn_conv"]
    score = st_.G(f)[0, 1]
    grad, = torch.autograd.grad(score, act)
    cam = torch.relu((grad.mean(dim=(2, 3), keepdim=True) * act).sum(1, keepdim=True))
    cam = torch.nn.functional.interpolate(cam, size=(32, 32), mode="bilinear", align_corners=False)[0, 0].detach()
    if cam.max() > cam.min():
        cam = (cam - cam.min()) / (cam.max() - cam.min())
    np.testing.assert_allclose(gradcam_map(st_, img, "cnn_conv").values, cam.numpy(), atol=1e-12)


def test_gradcam_errors(tiny_backbone):
    st_ = build_model_state(tiny_backbone)
    img = np.zeros((32, 32, 3), np.float32)
    with pytest.raises(ConfigurationError):
        gradcam_map(st_, img, "nope")
    with pytest.raises(ConfigurationError):
        gradcam_map(st_, img, target_class=2)


# ---------------------------------------------------------------- report files

def _report(stage="backward"):
    return EvalReport("run7", stage, "d1", (DomainResult("src", 10, 0.75), DomainResult("tgt", 12, 0.625)))


def _trace():
    return TrainTrace([StepRecord(0, 0, 0.5, -1.2, 0.0, 0.5), StepRecord(0, 1, 0.25, -1.3, 0.0, 0.75)])


def test_emit_report_files_and_round_trip(tmp_path):
    hm = Heatmap(np.linspace(0, 1, 64).reshape(8, 8), "freq_conv")
    written = emit_report(_report(), _trace(), tmp_path, heatmaps=[("tgt", 0, 1, hm)], history=[_report("forward")])
    assert {p.name for p in written} == set(REPORT_FILES) | {"tgt_0_1.png"}
    assert load_report(tmp_path / "report.json") == _report()
    assert json.loads((tmp_path / "report.json").read_text())["domains"][1]["auc"] == 0.625
    assert (tmp_path / "trace.csv").read_text().splitlines()[0] == "epoch,step,loss_ce,loss_adv,loss_sd,disc_acc"
    summary = (tmp_path / "summary.md").read_text()
    assert "src (src)" in summary and "tgt (tgt)" in summary and "62.50" in summary
    png = np.asarray(Image.open(tmp_path / "tgt_0_1.png"))
    assert png.shape == (8, 8) and png.min() == 0 and png.max() == 255


def test_emit_report_refuses_overwrite(tmp_path):
    emit_report(_report(), _trace(), tmp_path)
    with pytest.raises(ReportIOError):
        emit_report(_report(), _trace(), tmp_path)
    emit_report(_report("forward"), _trace(), tmp_path, overwrite=True)
    assert load_report(tmp_path / "report.json").stage == "forward"


def test_emit_report_unwritable_target(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ReportIOError):
        emit_report(_report(), _trace(), blocker / "sub")


def test_summary_table_marks_source():
    table = summary_table([_report("forward"), _report()], source_id="src")
    lines = table.strip().splitlines()
    assert lines[0] == "| stage | src (src) | tgt (tgt) |"
    assert lines[2] == "| forward | 75.00 | 62.50 |"
    assert summary_table([]).startswith("| stage |")
