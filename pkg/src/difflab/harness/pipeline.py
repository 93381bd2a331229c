"""Stage orchestration with content-addressed checkpoints.

Trained objects are *artifacts*.  Each one lives under
``<out>/artifacts/<name>-<key>/`` where ``key`` hashes the config keys the
artifact depends on plus the keys of its upstream artifacts, so editing any
relevant setting gives every downstream artifact a new address.

Stages either build one artifact (``train-diffusion``, ``train-classifier``,
``make-trigger``, ``backdoor``, ``poison``) or evaluate (``purify-eval``,
``certify``, ``defend``, ``diagnose``) and return a partial report.  Run on
its own, a stage refuses to build missing prerequisites and raises
:class:`StageError`; :func:`run_pipeline` builds whatever is missing.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import attacks as atk
from .. import certification as cert
from .. import defenses as dfn
from .. import diffusion as dif
from .. import nn
from ..numerics import RngStream
from .config import DEFAULTS, Config, ConfigError, as_config, sweep_key
from .datasets import DatasetSpec, LabeledData, make_dataset
from .report import ExperimentReport, write_sweep_csv

log = logging.getLogger(__name__)

DEFAULT_OUT = Path("difflab-out")
MANIFEST = "manifest.json"


class StageError(RuntimeError):
    """A stage's prerequisite artifact has not been built."""

    def __init__(self, stage: str, artifact: str, path: Path, producer: str):
        self.stage, self.artifact, self.path, self.producer = stage, artifact, path, producer
        super().__init__(f"stage {stage!r} needs artifact {artifact!r} at {path}; "
                         f"run the {producer!r} stage first")


@dataclass(frozen=True)
class ArtifactSpec:
    producer: str
    keys: tuple[str, ...]
    upstream: tuple[str, ...] = ()


ARTIFACTS = {
    "classifiers": ArtifactSpec("train-classifier", ("seed", "data", "classifier", "attack.surrogates")),
    "diffusion": ArtifactSpec("train-diffusion", ("seed", "data", "diffusion")),
    "trigger": ArtifactSpec("make-trigger", ("seed", "attack"), ("classifiers",)),
    "backdoor": ArtifactSpec("backdoor", ("seed", "backdoor"), ("diffusion", "trigger")),
    "poison": ArtifactSpec("poison", ("seed", "poison.rate", "poison.epochs", "poison.lr"), ("diffusion", "trigger")),
    "adv-classifier": ArtifactSpec("defend", ("seed", "defend.adv_epochs", "pgd"), ("classifiers",)),
}
BUILD_STAGES = {spec.producer: name for name, spec in ARTIFACTS.items() if spec.producer != "defend"}
EVAL_STAGES = ("purify-eval", "certify", "defend", "diagnose")


def artifact_key(cfg: Config, name: str) -> str:
    spec = ARTIFACTS[name]
    keys = spec.keys
    if cfg["backdoor.variant"] == "nonadversarial":
        # the variant trains against PGD examples and keeps its trigger unoptimized
        keys = keys + {"backdoor": ("pgd",), "trigger": ("backdoor.variant",)}.get(name, ())
    parts = {"artifact": name, "config": cfg.digest(*keys)}
    upstream = spec.upstream + (("classifiers",) if name == "backdoor"
                                and cfg["backdoor.variant"] == "nonadversarial" else ())
    for up in upstream:
        parts[up] = artifact_key(cfg, up)
    return hashlib.sha256(json.dumps(parts, sort_keys=True).encode()).hexdigest()[:16]


class ArtifactStore:
    """Directory of finished artifacts; a directory counts only once its
    manifest exists, so an interrupted build is never mistaken for a result."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, name: str, key: str) -> Path:
        return self.root / "artifacts" / f"{name}-{key}"

    def has(self, name: str, key: str) -> bool:
        return (self.path(name, key) / MANIFEST).exists()

    def save(self, name: str, key: str, writer, meta: dict) -> Path:
        final = self.path(name, key)
        tmp = final.with_name(final.name + f".tmp{os.getpid()}")
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        writer(tmp)
        (tmp / MANIFEST).write_text(json.dumps({"artifact": name, "key": key, **meta}, indent=1))
        if final.exists():
            shutil.rmtree(final)
        tmp.rename(final)
        return final


# -- per-artifact save/load ---------------------------------------------------

def _save_classifiers(obj, d: Path):
    target, surrogates = obj
    nn.save_mlp(target, d / "target.npz")
    for i, s in enumerate(surrogates):
        nn.save_mlp(s, d / f"surrogate{i}.npz")


def _load_classifiers(d: Path, cfg: Config):
    return (nn.load_mlp(d / "target.npz"),
            [nn.load_mlp(d / f"surrogate{i}.npz") for i in range(cfg["attack.surrogates"])])


_IO = {
    "classifiers": (_save_classifiers, _load_classifiers),
    "diffusion": (lambda m, d: dif.save_model(m, d / "model.npz"), lambda d, c: dif.load_model(d / "model.npz")),
    "trigger": (lambda t, d: t.save(d / "trigger.json"), lambda d, c: atk.Trigger.load(d / "trigger.json")),
    "backdoor": (lambda m, d: dif.save_model(m, d / "model.npz"), lambda d, c: dif.load_model(d / "model.npz")),
    "poison": (lambda m, d: dif.save_model(m, d / "model.npz"), lambda d, c: dif.load_model(d / "model.npz")),
    "adv-classifier": (lambda m, d: nn.save_mlp(m, d / "target.npz"), lambda d, c: nn.load_mlp(d / "target.npz")),
}


def dataset_spec(cfg: Config) -> DatasetSpec:
    return DatasetSpec(kind=cfg["data.kind"], dim=cfg["data.dim"], classes=cfg["data.classes"],
                       spread=cfg["data.spread"], radius=cfg["data.radius"],
                       train_size=cfg["data.train_size"], test_size=cfg["data.test_size"],
                       seed=cfg["seed"], repeat=cfg["data.repeat"],
                       code_amplitude=cfg["data.code_amplitude"], pixel_noise=cfg["data.pixel_noise"])


def attack_mode(cfg: Config) -> atk.AttackMode:
    if cfg["attack.mode"] == "targeted":
        return atk.AttackMode.targeted_at(cfg["attack.target_class"])
    return atk.AttackMode()


def pgd_config(cfg: Config) -> atk.PgdConfig:
    return atk.PgdConfig(cfg["pgd.epsilon"], cfg["pgd.step_size"], cfg["pgd.iterations"])


@dataclass
class Run:
    """State shared by the stages of one invocation."""
    cfg: Config
    out: Path
    build_missing: bool = True
    store: ArtifactStore = field(init=False)
    _cache: dict = field(init=False, default_factory=dict)
    timings: dict = field(init=False, default_factory=dict)
    _data: LabeledData | None = field(init=False, default=None)

    def __post_init__(self):
        self.out = Path(self.out)
        self.store = ArtifactStore(self.out)

    @property
    def rng(self) -> RngStream:
        return RngStream(self.cfg["seed"])

    @property
    def n_jobs(self) -> int:
        return self.cfg["run.n_jobs"]

    @property
    def data(self) -> LabeledData:
        if self._data is None:
            self._data = make_dataset(dataset_spec(self.cfg))
        return self._data

    @property
    def clip(self):
        return self.data.spec.clip if self.cfg["data.kind"] == "image_like" else None

    @property
    def full_chain(self) -> bool:
        return self.cfg["run.chain"] == "full"

    def get(self, name: str, stage: str, build: bool | None = None):
        """Load artifact ``name``; build it (and its upstream) if allowed."""
        if name in self._cache:
            return self._cache[name]
        key = artifact_key(self.cfg, name)
        path = self.store.path(name, key)
        if not self.store.has(name, key):
            allowed = self.build_missing if build is None else build
            if not allowed:
                raise StageError(stage, name, path, ARTIFACTS[name].producer)
            t0 = time.perf_counter()
            obj = _BUILDERS[name](self, stage)
            self.store.save(name, key, lambda d: _IO[name][0](obj, d),
                            {"config": self.cfg.section(*ARTIFACTS[name].keys)})
            self.timings[f"build.{name}"] = time.perf_counter() - t0
            log.info("built %s in %.1fs", path, self.timings[f"build.{name}"])
        obj = _IO[name][1](path, self.cfg)
        self._cache[name] = obj
        return obj

    def diffusion_models(self, stage: str) -> list[tuple[str, dif.DiffusionModel]]:
        models = [("benign", self.get("diffusion", stage))]
        if self.full_chain:
            models.append(("backdoor", self.get("backdoor", stage)))
            if self.cfg["poison.enabled"]:
                models.append(("poison", self.get("poison", stage)))
        return models


# -- builders -------------------------------------------------------------------

def _build_classifiers(run: Run, stage: str):
    cfg, d = run.cfg, run.data
    rng = run.rng.derive("classifier")
    width, classes = d.x_train.shape[1], cfg["data.classes"]

    def fit(dims, *label):
        m = nn.Mlp.init([width, *dims, classes], rng.derive(*label, "init"), "relu")
        return nn.train_classifier(m, d.x_train, d.y_train, epochs=cfg["classifier.epochs"],
                                   rng=rng.derive(*label, "train"), lr=cfg["classifier.lr"])

    target = fit(cfg["classifier.hidden"], "target")
    surrogates = [fit(cfg["classifier.surrogate_hidden"], "surrogate", i)
                  for i in range(cfg["attack.surrogates"])]
    return target, surrogates


def _build_diffusion(run: Run, stage: str):
    cfg, d = run.cfg, run.data
    rng = run.rng.derive("diffusion")
    sched = dif.build_schedule(cfg["diffusion.T"], cfg["diffusion.beta_start"], cfg["diffusion.beta_end"])
    model = dif.DiffusionModel.create(d.x_train.shape[1], rng.derive("init"), sched,
                                      hidden=cfg["diffusion.hidden"], activation=cfg["diffusion.activation"],
                                      clip=run.clip, baseline_data=d.x_train,
                                      standardize=cfg["diffusion.standardize"])
    return dif.train_denoiser(model, d.x_train, cfg["diffusion.epochs"], rng.derive("train"),
                              lr=cfg["diffusion.lr"], batch_size=cfg["diffusion.batch_size"])


def trigger_support(cfg: Config, width: int):
    size = cfg["attack.trigger_size"]
    return None if size >= 1.0 else (0, max(1, int(round(size * width))))


def _build_trigger(run: Run, stage: str):
    cfg, d = run.cfg, run.data
    _, surrogates = run.get("classifiers", stage)
    rng = run.rng.derive("trigger")
    width = d.x_train.shape[1]
    bounds = run.clip or d.bounds
    init = atk.Trigger.random(width, rng.derive("init"), cfg["attack.alpha"],
                              trigger_support(cfg, width), bounds)
    if cfg["backdoor.variant"] == "nonadversarial":
        return init
    return atk.optimize_trigger(surrogates, d.x_train, attack_mode(cfg), init, cfg["attack.trigger_steps"],
                                rng.derive("search"), labels=d.y_train, lr=cfg["attack.trigger_lr"],
                                bounds=bounds)


def _backdoor_config(cfg: Config, epochs: int | None = None) -> atk.BackdoorConfig:
    return atk.BackdoorConfig(cfg["backdoor.lam"], cfg["backdoor.truncation"], cfg["backdoor.entangle_noise"],
                              cfg["backdoor.epochs"] if epochs is None else epochs,
                              cfg["diffusion.batch_size"], cfg["backdoor.lr"])


def _build_backdoor(run: Run, stage: str):
    cfg, d = run.cfg, run.data
    benign = run.get("diffusion", stage)
    trig = run.get("trigger", stage)
    rng = run.rng.derive("backdoor")
    if cfg["backdoor.variant"] == "nonadversarial":
        _, surrogates = run.get("classifiers", stage)
        pgd = atk.PgdConfig(cfg["pgd.epsilon"], cfg["pgd.step_size"], cfg["pgd.iterations"], attack_mode(cfg))
        return atk.backdoor_train_nonadversarial(benign, d.x_train, trig, surrogates[0], _backdoor_config(cfg),
                                                 rng, labels=d.y_train, pgd=pgd)
    return atk.backdoor_train(benign, d.x_train, trig, _backdoor_config(cfg), rng)


def _build_poison(run: Run, stage: str):
    cfg, d = run.cfg, run.data
    benign = run.get("diffusion", stage)
    trig = run.get("trigger", stage)
    rng = run.rng.derive("poison")
    x_poisoned, _ = atk.poison_dataset(d.x_train, trig, cfg["poison.rate"], rng.derive("select"))
    return dif.train_denoiser(benign, x_poisoned, cfg["poison.epochs"], rng.derive("train"),
                              lr=cfg["poison.lr"], batch_size=cfg["diffusion.batch_size"], cosine_lr=True)


def _build_adv_classifier(run: Run, stage: str):
    cfg, d = run.cfg, run.data
    rng = run.rng.derive("adv-classifier")
    m = nn.Mlp.init([d.x_train.shape[1], *cfg["classifier.hidden"], cfg["data.classes"]], rng.derive("init"))
    return atk.adversarial_train_classifier(m, d.x_train, d.y_train, pgd_config(cfg),
                                            epochs=cfg["defend.adv_epochs"], rng=rng.derive("train"),
                                            lr=cfg["classifier.lr"])


_BUILDERS = {"classifiers": _build_classifiers, "diffusion": _build_diffusion, "trigger": _build_trigger,
             "backdoor": _build_backdoor, "poison": _build_poison, "adv-classifier": _build_adv_classifier}


# -- evaluation stages -------------------------------------------------------------

def _accuracy(classifier, x, y) -> float:
    return float(np.mean(nn.predict(classifier, x) == y))


def _eval_split(run: Run, n: int):
    d = run.data
    n = min(n, len(d.x_test))
    return d.x_test[:n], d.y_test[:n]


def _purifier_metrics(run: Run, classifier, purify_fn, x, y, xa, xr, mode) -> dict[str, float]:
    return {"clean_acc": _accuracy(classifier, purify_fn(x, "clean"), y),
            "robust_acc": _accuracy(classifier, purify_fn(xa, "pgd"), y),
            "asr": atk.measure_asr(classifier, lambda z: purify_fn(z, "trigger"), xr, y, mode)}


def stage_purify_eval(run: Run) -> ExperimentReport:
    """Clean ACC, PGD robust ACC and trigger ASR with no purifier and with
    each diffusion model as purifier."""
    cfg, stage = run.cfg, "purify-eval"
    target, _ = run.get("classifiers", stage)
    trig = run.get("trigger", stage)
    models = run.diffusion_models(stage)
    x, y = _eval_split(run, cfg["eval.inputs"])
    mode = attack_mode(cfg)
    xa = atk.pgd_attack(target, x, y, pgd_config(cfg))
    xr = atk.apply_trigger(x, trig)
    metrics = {f"none.{k}": v for k, v in
               _purifier_metrics(run, target, lambda z, tag: z, x, y, xa, xr, mode).items()}
    for name, model in models:
        prng = run.rng.derive("purify-eval", name, cfg["purify.T_bar"])

        def purify_fn(z, tag, model=model, prng=prng):
            return dif.purify(model, z, cfg["purify.T_bar"], prng.derive(tag), cfg["purify.sampler"],
                              n_jobs=run.n_jobs)

        metrics.update({f"{name}.{k}": v for k, v in
                        _purifier_metrics(run, target, purify_fn, x, y, xa, xr, mode).items()})
    return ExperimentReport(cfg["seed"], {}, metrics, {"eval.inputs": len(x)})


def stage_certify(run: Run) -> ExperimentReport:
    """Certified accuracy per radius on clean and trigger inputs; per-input
    rows go to ``<out>/certify/<model>-<split>.csv``."""
    cfg, stage = run.cfg, "certify"
    target, _ = run.get("classifiers", stage)
    trig = run.get("trigger", stage)
    models = [(n, m) for n, m in run.diffusion_models(stage) if n != "poison"]
    scfg = cert.SmoothingConfig(cfg["certify.sigma"], cfg["certify.n_samples"], cfg["certify.confidence"],
                                sampler=cfg["certify.sampler"])
    x, y = _eval_split(run, cfg["certify.inputs"])
    metrics = {}
    rows_dir = run.out / "certify"
    rows_dir.mkdir(parents=True, exist_ok=True)
    for name, model in models:
        for split, inputs in (("clean", x), ("trigger", atk.apply_trigger(x, trig))):
            outcomes = cert.certify_dataset(target, model, inputs, scfg, run.rng.derive("certify", name, split),
                                            n_jobs=run.n_jobs)
            for r in cfg["certify.radii"]:
                metrics[f"{name}.certified.{split}@{r:g}"] = cert.accuracy_at(outcomes, y, r)
            metrics[f"{name}.certified.{split}.abstain"] = float(np.mean([o.abstained for o in outcomes]))
            cert.write_certification_csv(rows_dir / f"{name}-{split}.csv", outcomes, y)
    return ExperimentReport(cfg["seed"], {}, metrics,
                            {"certify.inputs": len(x), "certify.n_samples": cfg["certify.n_samples"],
                             "certify.timestep": cert.sigma_to_timestep(models[0][1].schedule, cfg["certify.sigma"])})


def stage_defend(run: Run) -> ExperimentReport:
    """Entropy detector on every model, re-projected purification, and
    (when ``defend.adv_epochs > 0``) an adversarially trained classifier."""
    cfg, stage = run.cfg, "defend"
    target, _ = run.get("classifiers", stage)
    trig = run.get("trigger", stage)
    models = run.diffusion_models(stage)
    mode = attack_mode(cfg)
    rep = ExperimentReport(cfg["seed"], {})
    ref_x, _ = _eval_split(run, len(run.data.x_test))
    for name, model in models:
        rep.entropy[name] = dfn.entropy_detect(model, target, ref_x, cfg["defend.entropy_t"], cfg["defend.trials"],
                                               cfg["defend.per_trial"], run.rng.derive("entropy", name),
                                               sampler=cfg["purify.sampler"], num_classes=cfg["data.classes"])
    if "backdoor" in rep.entropy:
        rep.diagnostics["entropy_gap"] = [rep.entropy["benign"].mean - rep.entropy["backdoor"].mean]

    x, y = _eval_split(run, cfg["eval.inputs"])
    xa = atk.pgd_attack(target, x, y, pgd_config(cfg))
    xr = atk.apply_trigger(x, trig)
    for eps_ball in cfg["defend.reproject_eps"]:
        for name, model in models:
            prng = run.rng.derive("reproject", name, repr(eps_ball))

            def purify_fn(z, tag, model=model, prng=prng, eps_ball=eps_ball):
                out = dif.purify(model, z, cfg["purify.T_bar"], prng.derive(tag), cfg["purify.sampler"],
                                 n_jobs=run.n_jobs)
                return dfn.reproject(z, out, eps_ball)

            rep.metrics.update({f"{name}.reproject@{eps_ball:g}.{k}": v for k, v in
                                _purifier_metrics(run, target, purify_fn, x, y, xa, xr, mode).items()})

    if cfg["defend.adv_epochs"] > 0:
        robust = run.get("adv-classifier", stage, build=True)
        xa_r = atk.pgd_attack(robust, x, y, pgd_config(cfg))
        rep.metrics["none.adv_classifier.clean_acc"] = _accuracy(robust, x, y)
        rep.metrics["none.adv_classifier.robust_acc"] = _accuracy(robust, xa_r, y)
        for name, model in models:
            prng = run.rng.derive("adv-classifier", name)

            def purify_fn(z, tag, model=model, prng=prng):
                return dif.purify(model, z, cfg["purify.T_bar"], prng.derive(tag), cfg["purify.sampler"],
                                  n_jobs=run.n_jobs)

            rep.metrics.update({f"{name}.adv_classifier.{k}": v for k, v in
                                _purifier_metrics(run, robust, purify_fn, x, y, xa_r, xr, mode).items()})
    rep.counts["defend.trials"] = cfg["defend.trials"]
    rep.counts["defend.per_trial"] = cfg["defend.per_trial"]
    return rep


def stage_diagnose(run: Run) -> ExperimentReport:
    """KL between clean and trigger distributions along the forward chain
    (closed form on the trigger's mean shift, plus a Monte Carlo check on a
    low-dimensional Gaussian pair) and the time-change variances."""
    cfg, stage = run.cfg, "diagnose"
    trig = run.get("trigger", stage)
    d = run.data
    sched = dif.build_schedule(cfg["diffusion.T"], cfg["diffusion.beta_start"], cfg["diffusion.beta_end"])
    ts = list(cfg["diagnose.timesteps"])
    shift = atk.apply_trigger(d.x_train, trig).mean(axis=0) - d.x_train.mean(axis=0)
    rep = ExperimentReport(cfg["seed"], {})
    rep.diagnostics["kl.trigger_shift"] = dfn.kl_monotonicity_check(shift, sched, ts)

    rng = run.rng.derive("diagnose")
    dim, n = cfg["diagnose.mc_dim"], cfg["diagnose.mc_samples"]
    direction = rng.derive("direction").normal(dim)
    mc_shift = 2.0 * direction / np.linalg.norm(direction)
    p = rng.derive("p").normal((n, dim))
    q = rng.derive("q").normal((n, dim)) + mc_shift
    rep.diagnostics["kl.gaussian_analytic"] = dfn.kl_monotonicity_check(mc_shift, sched, ts)
    rep.diagnostics["kl.gaussian_monte_carlo"] = dfn.kl_monte_carlo(p, q, sched, ts, rng.derive("mc"))
    quarter = [max(1, sched.T // 4), max(1, sched.T // 2), sched.T]
    rep.diagnostics["time_change.timesteps"] = [float(t) for t in quarter]
    rep.diagnostics["time_change.s"] = [dif.time_change(sched, t) for t in quarter]
    rep.counts["diagnose.mc_samples"] = n
    return rep


_EVALUATORS = {"purify-eval": stage_purify_eval, "certify": stage_certify,
               "defend": stage_defend, "diagnose": stage_diagnose}


# -- entry points ------------------------------------------------------------------

def _execute(run: Run, stage: str) -> ExperimentReport:
    t0 = time.perf_counter()
    if stage in BUILD_STAGES:
        name = BUILD_STAGES[stage]
        run.get(name, stage, build=True)
        rep = ExperimentReport(run.cfg["seed"], {})
        rep.counts[f"artifact.{name}"] = 1
        if name == "classifiers":
            target, surrogates = run.get("classifiers", stage)
            rep.metrics["target.test_acc"] = _accuracy(target, run.data.x_test, run.data.y_test)
            for i, s in enumerate(surrogates):
                rep.metrics[f"surrogate{i}.test_acc"] = _accuracy(s, run.data.x_test, run.data.y_test)
    elif stage in _EVALUATORS:
        rep = _EVALUATORS[stage](run)
    else:
        raise ConfigError(f"unknown stage {stage!r}")
    rep.timings[stage] = time.perf_counter() - t0
    return rep


def run_stage(stage: str, config=None, out=None, build_missing: bool = False) -> tuple[ExperimentReport, Path]:
    """Run one stage.  Missing prerequisites raise :class:`StageError`
    unless ``build_missing``.  Writes ``<out>/reports/<stage>.json``."""
    cfg = as_config(config)
    run = Run(cfg, out or DEFAULT_OUT, build_missing)
    rep = _execute(run, stage)
    rep.timings.update(run.timings)
    rep.config = cfg.as_dict()
    rep.validate()
    return rep, rep.write(run.out / "reports", stage)


def run_pipeline(config=None, out=None, write: bool = True, stem: str = "report") -> ExperimentReport:
    """Run every stage in ``run.stages`` (building any artifact they need)
    and merge the results into one report written to ``<out>/<stem>.json``."""
    cfg = as_config(config)
    run = Run(cfg, out or DEFAULT_OUT, build_missing=True)
    rep = ExperimentReport(cfg["seed"], cfg.as_dict())
    for stage in cfg["run.stages"]:
        rep.merge(_execute(run, stage))
    rep.timings.update(run.timings)
    rep.validate()
    if write:
        rep.write(run.out, stem)
    return rep


def sensitivity_sweep(config, parameter: str, values, out=None,
                      stages=("purify-eval",)) -> list[ExperimentReport]:
    """One report per value of ``parameter``; artifacts unaffected by the
    parameter are shared through the store.  Writes each report plus the
    long-format series ``<out>/sweep/<parameter>.csv``."""
    cfg = as_config(config)
    key = sweep_key(parameter)
    # sweep.values is a float list; integer parameters take integral floats
    values = [int(v) if isinstance(DEFAULTS[key], int) and float(v).is_integer() else v for v in values]
    out = Path(out or DEFAULT_OUT)
    reports = []
    for v in values:
        updates = {key: v, "run.stages": stages}
        if parameter == "poison_rate":
            updates["poison.enabled"] = True
        reports.append(run_pipeline(cfg.replace(updates), out, stem=f"sweep/{parameter}={v}"))
    if values:
        write_sweep_csv(out / "sweep" / f"{parameter}.csv", parameter, values, reports)
    return reports
