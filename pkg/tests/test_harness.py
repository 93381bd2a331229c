import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from difflab import cli, nn
from difflab.harness import (Config, ConfigError, DatasetSpec, ExperimentReport, StageError, artifact_key,
                             load_config, load_report, make_dataset, parse_config_text, run_pipeline,
                             run_stage, sensitivity_sweep)
from difflab.harness import config as cfgmod
from difflab.harness import pipeline
from difflab.defenses import EntropyReport
from difflab.numerics import RngStream

TINY = """
data.kind = gaussian_mixture
data.dim = 2
data.train_size = 400
data.test_size = 200
diffusion.hidden = 16, 16
diffusion.epochs = 3
classifier.hidden = 16
classifier.surrogate_hidden = 8
classifier.epochs = 3
attack.trigger_steps = 10
backdoor.epochs = 2
poison.epochs = 2
eval.inputs = 100
certify.n_samples = 50
certify.inputs = 5
defend.trials = 2
defend.per_trial = 20
diagnose.mc_samples = 2000
"""


@pytest.fixture(scope="module")
def tiny():
    return parse_config_text(TINY)


@pytest.fixture(scope="module")
def tiny_run(tiny, tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    return run_pipeline(tiny, out), out


# -- config ---------------------------------------------------------------------------------

def test_defaults_and_parsing():
    c = parse_config_text("seed = 3\nattack.alpha = 0.1  # comment\n\ncertify.radii = 0, 0.5\n")
    assert c["seed"] == 3 and c["attack.alpha"] == 0.1 and c["certify.radii"] == (0.0, 0.5)
    assert c["diffusion.T"] == 100
    assert c.overrides() == {"seed": 3, "attack.alpha": 0.1, "certify.radii": (0.0, 0.5)}


@pytest.mark.parametrize("text", ["nonsense.key = 1", "seed = abc", "seed 3", "seed = 1\nseed = 2",
                                  "attack.alpha = 1.5", "data.kind = mnist", "purify.T_bar = 500",
                                  "poison.rate = 0", "attack.target_class = 9", "diffusion.beta_start = nan",
                                  "run.stages = purify-eval, frobnicate", "backdoor.entangle_noise = maybe"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_config_error_names_line():
    with pytest.raises(ConfigError, match=":2:"):
        parse_config_text("seed = 1\nbogus = 2\n", "x.cfg")


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.cfg")


def test_config_dump_roundtrip(tiny):
    c = tiny.with_overrides(attack__alpha=0.07, backdoor__entangle_noise=False)
    assert parse_config_text(c.dumps()) == c
    assert c["backdoor.entangle_noise"] is False


@given(st.floats(0.0, 1.0), st.integers(0, 10 ** 6), st.booleans())
def test_config_roundtrip_property(alpha, seed, flag):
    c = Config({"attack.alpha": alpha, "seed": seed, "backdoor.entangle_noise": flag})
    assert parse_config_text(c.dumps()) == c


def test_digest_ignores_execution_keys(tiny):
    assert tiny.digest() == tiny.replace({"run.n_jobs": 4, "run.stages": ("diagnose",)}).digest()
    assert tiny.digest() != tiny.replace({"seed": 1}).digest()


def test_sweep_key():
    assert cfgmod.sweep_key("T_bar") == "purify.T_bar"
    with pytest.raises(ConfigError):
        cfgmod.sweep_key("gamma")


# -- content addressing --------------------------------------------------------------------

def test_artifact_keys_follow_dependencies(tiny):
    keys = {n: artifact_key(tiny, n) for n in pipeline.ARTIFACTS}
    changed = {n: artifact_key(tiny.replace({"attack.alpha": 0.2}), n) for n in pipeline.ARTIFACTS}
    assert changed["diffusion"] == keys["diffusion"] and changed["classifiers"] == keys["classifiers"]
    assert changed["trigger"] != keys["trigger"]
    assert changed["backdoor"] != keys["backdoor"] and changed["poison"] != keys["poison"]
    # evaluation-only settings touch nothing trained
    evald = tiny.replace({"eval.inputs": 50, "certify.sigma": 0.5, "purify.T_bar": 5})
    assert all(artifact_key(evald, n) == keys[n] for n in pipeline.ARTIFACTS)
    # a data change invalidates everything
    data = tiny.replace({"data.spread": 0.2})
    assert all(artifact_key(data, n) != keys[n] for n in pipeline.ARTIFACTS)


def test_nonadversarial_key_depends_on_pgd(tiny):
    na = tiny.replace({"backdoor.variant": "nonadversarial"})
    assert artifact_key(na, "backdoor") != artifact_key(tiny, "backdoor")
    assert artifact_key(na.replace({"pgd.epsilon": 0.05}), "backdoor") != artifact_key(na, "backdoor")
    assert artifact_key(tiny.replace({"pgd.epsilon": 0.05}), "backdoor") == artifact_key(tiny, "backdoor")


# -- datasets -----------------------------------------------------------------------------------

def test_one_dimensional_two_class_threshold():
    d = make_dataset(DatasetSpec(kind="gaussian_mixture", dim=1, classes=2, centers=((-3.0,), (3.0,)),
                                 spread=1.0, train_size=2000, test_size=2000, seed=0))
    pred = (d.x_test[:, 0] > 0).astype(int)
    assert np.mean(pred == d.y_test) >= 0.99


@pytest.mark.parametrize("kind", ["gaussian_mixture", "image_like"])
def test_dataset_deterministic_and_balanced(kind):
    spec = DatasetSpec(kind=kind, dim=64 if kind == "image_like" else 2, train_size=403, test_size=101, seed=5)
    a, b = make_dataset(spec), make_dataset(spec)
    assert np.array_equal(a.x_train, b.x_train) and np.array_equal(a.y_test, b.y_test)
    for y in (a.y_train, a.y_test):
        counts = np.bincount(y, minlength=4)
        assert counts.max() - counts.min() <= 1
    assert not np.array_equal(a.x_train, make_dataset(DatasetSpec(**{**spec.__dict__, "seed": 6})).x_train)


def test_default_mixture_separation():
    spec = DatasetSpec(kind="gaussian_mixture", dim=2)
    c = spec.class_centers()
    gaps = [np.linalg.norm(c[i] - c[j]) for i in range(4) for j in range(i + 1, 4)]
    assert min(gaps) >= 4 * spec.spread


def test_image_like_layout():
    d = make_dataset(DatasetSpec(dim=64, train_size=400, test_size=40))
    # latent block repeats each coordinate
    block = d.x_train[:, :8].reshape(-1, 2, 4)
    assert np.allclose(block - block[:, :, :1], 0, atol=0.2)
    assert d.x_train.min() >= -1 and d.x_train.max() <= 1


@pytest.mark.parametrize("kw", [{"kind": "audio"}, {"classes": 1}, {"train_size": 2}, {"dim": 4}])
def test_dataset_spec_validation(kw):
    with pytest.raises(ValueError):
        DatasetSpec(**kw)


# -- reports ------------------------------------------------------------------------------------

def _report():
    return ExperimentReport(1, {"seed": 1}, {"a.asr": 0.25, "b.clean_acc": 1.0}, {"n": 10},
                            {"benign": EntropyReport([1.0, 1.2], 1.1, 10, 100, 4)},
                            {"kl": [0.5, 0.25]}, {"stage": 1.5})


def test_report_json_roundtrip(tmp_path):
    rep = _report()
    path = rep.write(tmp_path / "sub", "r")
    back = load_report(path)
    assert back.to_dict() == rep.to_dict()
    assert json.loads(path.read_text())["format"] == "difflab-report/1"
    rows = list(csv.reader(open(path.with_suffix(".csv"))))
    assert rows[0] == ["section", "name", "value"]
    assert ["metrics", "a.asr", "0.25"] in rows and ["entropy", "benign.trial1", "1.2"] in rows


@pytest.mark.parametrize("bad", [{"metrics": {"x": 1.5}}, {"metrics": {"x": math.nan}},
                                 {"counts": {"n": -1}}, {"counts": {"n": 1.5}},
                                 {"diagnostics": {"k": [math.inf]}}, {"timings": {"s": -1.0}}])
def test_report_validation(bad):
    with pytest.raises(ValueError):
        ExperimentReport(0, {}, **bad)


def test_report_rejects_foreign_json():
    with pytest.raises(ValueError):
        ExperimentReport.from_dict({"format": "other"})


# -- pipeline -----------------------------------------------------------------------------------

def test_full_chain_metrics(tiny_run):
    rep, out = tiny_run
    for name in ("none", "benign", "backdoor"):
        for q in ("clean_acc", "robust_acc", "asr"):
            assert f"{name}.{q}" in rep.metrics
    assert "backdoor.certified.trigger@0.25" in rep.metrics
    assert set(rep.entropy) == {"benign", "backdoor"}
    assert "kl.gaussian_monte_carlo" in rep.diagnostics
    assert rep.counts["eval.inputs"] == 100 and rep.counts["certify.inputs"] == 5
    assert all(math.isfinite(v) for _, _, v in rep.csv_rows())
    assert load_report(out / "report.json").to_dict() == rep.to_dict()
    assert (out / "certify" / "backdoor-trigger.csv").exists()
    # config echo reproduces the run
    assert Config(rep.config) == Config(dict(rep.config))


def test_rerun_is_bit_exact(tiny, tiny_run, tmp_path):
    rep, out = tiny_run
    again = run_pipeline(tiny, out, write=False)
    fresh = run_pipeline(tiny.replace({"run.n_jobs": 3}), tmp_path, write=False)
    assert again.results() == rep.results() == fresh.results()


def test_benign_chain_matches_full_chain(tiny, tiny_run):
    rep, out = tiny_run
    benign = run_pipeline(tiny.replace({"run.chain": "benign"}), out, write=False)
    assert not any(k.startswith("backdoor.") for k in benign.metrics)
    for k, v in benign.metrics.items():
        assert rep.metrics[k] == v
    assert benign.entropy["benign"] == rep.entropy["benign"]


def test_poison_chain(tiny, tiny_run):
    _, out = tiny_run
    rep = run_pipeline(tiny.replace({"poison.enabled": True, "run.stages": ("purify-eval",)}), out, write=False)
    assert "poison.asr" in rep.metrics


def test_stage_requires_prerequisites(tiny, tmp_path):
    with pytest.raises(StageError) as info:
        run_stage("backdoor", tiny, tmp_path)
    assert info.value.artifact in ("diffusion", "trigger", "classifiers")
    assert info.value.producer in ("train-diffusion", "make-trigger", "train-classifier")


def test_stage_sequence(tiny, tmp_path):
    for stage in ("train-classifier", "train-diffusion", "make-trigger", "backdoor"):
        rep, path = run_stage(stage, tiny, tmp_path)
        assert path == tmp_path / "reports" / f"{stage}.json" and path.exists()
    assert "target.test_acc" in load_report(tmp_path / "reports" / "train-classifier.json").metrics
    rep, _ = run_stage("purify-eval", tiny, tmp_path)
    assert "backdoor.asr" in rep.metrics
    # changing a backdoor setting leaves the evaluation without its artifact
    with pytest.raises(StageError) as info:
        run_stage("purify-eval", tiny.replace({"backdoor.lam": 0.5}), tmp_path)
    assert info.value.artifact == "backdoor"


def test_interrupted_build_is_ignored(tiny, tmp_path):
    store = pipeline.ArtifactStore(tmp_path)
    key = artifact_key(tiny, "diffusion")
    store.path("diffusion", key).mkdir(parents=True)
    assert not store.has("diffusion", key)
    with pytest.raises(StageError):
        run_stage("make-trigger", tiny, tmp_path)


def test_adversarial_classifier_defense(tiny, tiny_run):
    _, out = tiny_run
    rep = run_pipeline(tiny.replace({"defend.adv_epochs": 1, "run.stages": ("defend",)}), out, write=False)
    assert "none.adv_classifier.robust_acc" in rep.metrics
    assert "backdoor.adv_classifier.asr" in rep.metrics


# -- sweeps -------------------------------------------------------------------------------------

def test_empty_sweep(tiny, tmp_path):
    assert sensitivity_sweep(tiny, "alpha", [], tmp_path) == []


def test_sweep_writes_series(tiny, tiny_run):
    _, out = tiny_run
    reps = sensitivity_sweep(tiny, "T_bar", [4, 8], out)
    assert len(reps) == 2 and reps[0].config["purify.T_bar"] == 4
    rows = list(csv.DictReader(open(out / "sweep" / "T_bar.csv")))
    assert {r["value"] for r in rows} == {"4.0", "8.0"}
    assert list(rows[0]) == ["parameter", "value", "metric", "result"]
    assert (out / "sweep" / "T_bar=8.json").exists()


def test_sweep_unknown_parameter(tiny, tmp_path):
    with pytest.raises(ConfigError):
        sensitivity_sweep(tiny, "gamma", [1], tmp_path)


# -- CLI -----------------------------------------------------------------------------------------

def test_cli_exit_codes(tmp_path, capsys):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY)
    out = tmp_path / "out"
    assert cli.main(["make-trigger", "--config", str(cfg), "--out", str(out)]) == 3
    assert "train-classifier" in capsys.readouterr().err
    assert cli.main(["train-classifier", "--config", str(cfg), "--out", str(out), "--seed", "4"]) == 0
    printed = capsys.readouterr().out.strip()
    assert printed.endswith("train-classifier.json")
    assert load_report(printed).seed == 4

    bad = tmp_path / "bad.cfg"
    bad.write_text("attack.alpha = 7\n")
    assert cli.main(["diagnose", "--config", str(bad)]) == 2
    assert cli.main(["diagnose", "--config", str(tmp_path / "missing.cfg")]) == 2
    with pytest.raises(SystemExit) as info:
        cli.main(["frobnicate", "--config", str(cfg)])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        cli.main(["diagnose"])
    assert info.value.code == 2


def test_cli_run_and_sweep(tmp_path, capsys):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY + "run.stages = diagnose\nsweep.parameter = T_bar\nsweep.values = 3\n")
    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    assert capsys.readouterr().out.strip() == str(out / "report.json")
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(out)]) == 0
    assert capsys.readouterr().out.strip() == str(out / "sweep" / "T_bar.csv")


def test_classifier_stage_reports_accuracy(tiny, tmp_path):
    rep, _ = run_stage("train-classifier", tiny, tmp_path)
    target = nn.load_mlp(next((tmp_path / "artifacts").glob("classifiers-*")) / "target.npz")
    d = make_dataset(pipeline.dataset_spec(tiny))
    assert rep.metrics["target.test_acc"] == np.mean(nn.predict(target, d.x_test) == d.y_test)
    assert RngStream(0) == RngStream(0)


def test_nonadversarial_variant_uses_unoptimized_trigger(tiny, tmp_path):
    na = tiny.replace({"backdoor.variant": "nonadversarial", "run.stages": ("purify-eval",)})
    assert artifact_key(na, "trigger") != artifact_key(tiny, "trigger")
    run = pipeline.Run(na, tmp_path)
    trig = run.get("trigger", "test")
    d = run.data
    init = pipeline.atk.Trigger.random(2, RngStream(na["seed"]).derive("trigger").derive("init"),
                                       na["attack.alpha"], None, d.bounds)
    assert np.array_equal(trig.pattern, init.pattern)
    rep = run_pipeline(na, tmp_path, write=False)
    assert "backdoor.asr" in rep.metrics
