import json
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from biadapt.cli import (
    EXIT_DIVERGED, EXIT_ERROR, EXIT_IO, EXIT_OK, VARIANTS, build_scenario, main, run_ablation, run_experiment,
)
from biadapt.config import ConfigError, KNOWN_KEYS, parse_text, preset_spec, serialize, with_overrides
from biadapt.evaluation import load_report

TINY = """\
# small enough to train in a few seconds
run_id: tiny
n_per_class: 16
T1: 1
T2: 1
batch_forward: 8
batch_backward: 8
visual_layers: 1
freq_layers: 1
embed_dim: 16
freq_channels: 8
freq_depth: 1
heads: 2
disc_hidden: 8
"""


@pytest.fixture
def tiny_spec(tmp_path):
    return replace(parse_text(TINY), out_dir=str(tmp_path / "runs"))


@pytest.fixture
def tiny_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


# ---------------------------------------------------------------- config parsing

def test_empty_config_is_desk_preset():
    assert parse_text("") == preset_spec("desk")
    assert parse_text("# only a comment\n\n") == preset_spec("desk")


def test_parse_values_land_in_the_right_place():
    spec = parse_text("target_kinds: local_warp, region_noise\ntau: 0.25\nT1: 3\nbackbone: tiny_cnn\n"
                      "side: 64\nteacher_grad: yes\nlr_disc: none\ndata_seed: 7\n")
    assert spec.scenario.target_kinds == ("local_warp", "region_noise")
    assert spec.train.weights.tau == 0.25 and spec.train.T1 == 3 and spec.train.teacher_grad
    assert spec.train.lr_disc is None and spec.scenario.data_seed == 7
    assert spec.backbone.kind == "tiny_cnn" and spec.backbone.image_side == 64
    assert spec.scenario.seeds(0) == (107, (207, 307))


@pytest.mark.parametrize("text, fragment", [
    ("colour: red\n", "unknown key"),
    ("T1: 2\nT1: 3\n", "duplicate key"),
    ("T1: two\n", "expected an integer"),
    ("tau: 0\n", "tau"),
    ("tau: -1\n", "tau"),
    ("teacher_grad: maybe\n", "boolean"),
    ("just words\n", "expected 'key: value'"),
    ("adapter: DANN\n", "adapter"),
    ("target_kinds: cartoon\n", "manipulation kind"),
    ("preset: huge\n", "unknown preset"),
])
def test_parse_errors(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_text(text)


def test_baseline_preset_has_no_adaptation():
    spec = preset_spec("baseline")
    assert spec.train.adapter == "none" and spec.train.weights.alpha2 == 0.0
    assert parse_text("preset: baseline\n") == spec


_overrides = st.fixed_dictionaries({}, optional={
    "T1": st.integers(0, 50), "T2": st.integers(0, 50), "seed": st.integers(0, 10**6),
    "lr_forward": st.floats(1e-6, 1.0), "tau": st.floats(0.01, 10.0), "alpha2": st.floats(0.0, 5.0),
    "adapter": st.sampled_from(["none", "GRL", "MMD", "FA"]),
    "backward_objective": st.sampled_from(["none", "SD", "ENT"]),
    "target_kinds": st.lists(st.sampled_from(["local_warp", "region_noise", "full_synth"]), min_size=1,
                             max_size=3).map(tuple),
    "data_seed": st.none() | st.integers(0, 99), "teacher_grad": st.booleans(),
    "lr_disc": st.none() | st.floats(1e-5, 1.0), "heatmaps": st.integers(0, 5),
})


@settings(max_examples=40)
@given(_overrides, st.sampled_from(["desk", "baseline"]))
def test_serialize_round_trip(delta, preset):
    spec = with_overrides(preset_spec(preset), delta)
    assert parse_text(serialize(spec)) == spec
    assert serialize(parse_text(serialize(spec))) == serialize(spec)


def test_serialize_writes_every_key():
    keys = {ln.split(":", 1)[0] for ln in serialize(preset_spec()).splitlines()}
    assert keys == KNOWN_KEYS


def test_overrides():
    spec = with_overrides(preset_spec(), {"T1": 5, "adapter": "GRL", "target_kinds": ("full_synth",)})
    assert (spec.train.T1, spec.train.adapter, spec.scenario.target_kinds) == (5, "GRL", ("full_synth",))
    with pytest.raises(ConfigError):
        with_overrides(preset_spec(), {"nope": 1})
    for delta in VARIANTS.values():
        with_overrides(preset_spec(), delta)


def test_digest_ignores_out_dir_only():
    a = preset_spec()
    assert a.digest() == replace(a, out_dir="elsewhere").digest()
    assert a.digest() != a.with_seed(1).digest()


def test_duplicate_target_kinds_get_unique_ids():
    spec = with_overrides(parse_text(TINY), {"target_kinds": ("local_warp", "local_warp")})
    sc = build_scenario(spec)
    assert [d.domain_id for d in sc.targets] == ["local_warp", "local_warp_1"]


# ---------------------------------------------------------------- experiments

def test_run_experiment_writes_everything(tiny_spec, tmp_path):
    res = run_experiment(tiny_spec, tmp_path / "a")
    assert res.status == EXIT_OK
    out = tmp_path / "a"
    for stage in ("baseline", "forward", "backward"):
        assert (out / f"{stage}.pt").is_file()
        rep = load_report(out / stage / "report.json")
        assert rep == res.reports[stage] and rep.stage == stage
        assert [d.id for d in rep.domains] == ["patch_swap", "local_warp"]
    man = json.loads((out / "manifest.json").read_text())
    assert man["config_digest"] == tiny_spec.digest()
    assert man["seeds"] == {"train": 0, "source_data": 100, "target_data": [200]}
    assert parse_text((out / "config.txt").read_text()) == tiny_spec
    assert "| backward |" in (out / "backward" / "summary.md").read_text()
    assert not (out / "error.json").exists()


def test_run_experiment_heatmaps(tiny_spec, tmp_path):
    res = run_experiment(replace(tiny_spec, heatmaps=1, train=replace(tiny_spec.train, T1=0, T2=0)), tmp_path)
    assert res.status == EXIT_OK
    assert len(list((tmp_path / "backward").glob("*.png"))) == 2


def test_divergence_exit_code(tiny_spec, tmp_path):
    spec = with_overrides(tiny_spec, {"lr_forward": 1e8, "T1": 3})
    res = run_experiment(spec, tmp_path)
    assert res.status == EXIT_DIVERGED
    err = json.loads((tmp_path / "error.json").read_text())
    assert err["error"] == "divergence" and "record" in err


def test_io_exit_code(tiny_spec, tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("not a directory")
    assert run_experiment(tiny_spec, blocker).status == EXIT_IO


def test_ablation_grid(tiny_spec, tmp_path):
    res = run_ablation(tiny_spec, ["+FA", "full BA"], seeds=(0,), out_dir=tmp_path)
    rows = res.rows()
    assert [r["variant"] for r in rows] == ["+FA", "full BA"]
    fa, ba = rows
    assert fa["backward_source"] is None and fa["backward_target"] is None
    assert ba["backward_target"] is not None
    # same forward configuration, so the forward run is shared
    assert fa["forward_target"] == ba["forward_target"]
    csv_lines = (tmp_path / "ablation.csv").read_text().splitlines()
    assert csv_lines[1].split(",")[5:7] == ["", ""]
    assert (tmp_path / "ablation.md").read_text().startswith("AUC (%)")


def test_ablation_marks_failed_cells(tiny_spec):
    variants = {"ok": {"adapter": "none"}, "bad": {"lr_forward": 1e8, "T1": 3}}
    res = run_ablation(tiny_spec, variants, seeds=(0,))
    status = {r["variant"]: r["status"] for r in res.rows()}
    assert status["ok"] == "ok"
    assert status["bad"].startswith("failed 1/1: DivergenceError")


def test_ablation_unknown_variant(tiny_spec):
    with pytest.raises(ConfigError):
        run_ablation(tiny_spec, ["+XYZ"])


# ---------------------------------------------------------------- command line

def test_main_train_evaluate_gradcam(tiny_file, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--config", str(tiny_file), "--out", str(run)]) == EXIT_OK
    assert "status 0" in capsys.readouterr().out
    ev = tmp_path / "ev"
    args = ["evaluate", "--config", str(tiny_file), "--out", str(ev), "--checkpoint", str(run / "backward.pt")]
    assert main(args) == EXIT_OK
    printed = json.loads(capsys.readouterr().out)
    assert printed == json.loads((run / "backward" / "report.json").read_text())
    assert main(args) == EXIT_IO
    assert main(args + ["--overwrite"]) == EXIT_OK
    cam = tmp_path / "cam"
    assert main(["gradcam", "--config", str(tiny_file), "--out", str(cam), "--checkpoint",
                 str(run / "backward.pt"), "-n", "1", "--layer", "visual_tokens"]) == EXIT_OK
    assert len(list(cam.glob("*.png"))) == 2


def test_main_generate(tiny_file, tmp_path):
    assert main(["generate", "--config", str(tiny_file), "--out", str(tmp_path)]) == EXIT_OK
    for d in ("patch_swap", "local_warp"):
        for split in ("train", "test"):
            assert any((tmp_path / d / split / "real").iterdir())


def test_main_ablate(tiny_file, tmp_path, capsys):
    assert main(["ablate", "--config", str(tiny_file), "--out", str(tmp_path), "--variants", "baseline,+FA",
                 "--seeds", "0,1"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "| baseline |" in out and "| +FA |" in out


def test_main_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour: red\n")
    assert main(["train", "--config", str(bad)]) == EXIT_ERROR
    assert "unknown key" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == EXIT_ERROR
