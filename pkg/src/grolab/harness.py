"""Experiment orchestration: configs, end-to-end pipelines, sweeps.

A single flat ``key = value`` config file (dotted sections, ``#``
comments) describes one experiment: the corpus, the target model, the
defenses to compare, the extraction attack, and the evaluation depths.
``run_experiment`` executes the full protocol per defense arm —
pretrain once, protect (fine-tune or shield), attack, train the
surrogate, evaluate both deployed target and surrogate — and persists
byte-reproducible artifacts: ``summary.csv`` (one row per defense ×
model × k), ``curves.csv`` (joint-training trace), checkpoints, query
logs, and a ``manifest.json`` tying everything to the config hash.

Every stage seed derives from the master seed and a stage label, so
runs are deterministic and adding stages never shifts earlier draws.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .evalmetrics import MetricsReport, evaluate_model, report_to_json
from .extraction import (AttackConfig, OracleHandle, generate_queries,
                         save_query_log, train_surrogate)
from .grodefense import GroConfig, train_with_gro
from .recmodels import (SequenceModel, ce_train_epoch, init_model,
                        save_checkpoint)
from .seeding import derive_seed
from .seqdata import (SplitDataset, dataset_stats, leave_one_out_split,
                      load_interactions, synth_generate)
from .shield import DefenseMode

DEFENSE_ARMS = ("none", "random", "reverse", "gro")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment needs; see ``parse_config``."""

    data_source: str = "synth"
    data_path: str = ""
    data_format: str = "delimited-ratings"
    synth_users: int = 500
    synth_items: int = 200
    synth_avg_len: int = 20
    synth_markov_order: int = 1
    target_architecture: str = "attn_lite"
    target_dim: int = 32
    target_max_len: int = 20
    pretrain_epochs: int = 25
    pretrain_lr: float = 1.0
    pretrain_batch_size: int = 16
    surrogate_architecture: str = "attn_lite"
    defenses: tuple = ("none", "random", "reverse", "gro")
    attack: AttackConfig = field(default_factory=AttackConfig)
    gro: GroConfig = field(default_factory=GroConfig)
    eval_ks: tuple = (1, 5, 10, 20)
    out_dir: str = "runs/experiment"
    seed: int = 0

    def __post_init__(self):
        if self.data_source not in ("synth", "file"):
            raise ValueError(f"unknown data source {self.data_source!r}")
        if self.data_source == "file" and not self.data_path:
            raise ValueError("file data source requires data.path")
        if not self.defenses:
            raise ValueError("defense list must be non-empty")
        for tag in self.defenses:
            if tag not in DEFENSE_ARMS:
                raise ValueError(f"unknown defense {tag!r}")
        if len(set(self.defenses)) != len(self.defenses):
            raise ValueError("defense list must not repeat")
        if not self.eval_ks or any(k < 1 for k in self.eval_ks):
            raise ValueError("eval ks must be positive")


# --------------------------------------------------------- config files

# dotted config key -> (dataclass attribute path, value parser)
def _parse_bool(text: str) -> bool:
    if text.lower() in ("true", "yes", "1"):
        return True
    if text.lower() in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_str_list(text: str) -> tuple:
    return tuple(part.strip() for part in text.split(",") if part.strip())


def _parse_int_list(text: str) -> tuple:
    return tuple(int(part) for part in text.split(",") if part.strip())


_CONFIG_KEYS = {
    "data.source": ("data_source", str),
    "data.path": ("data_path", str),
    "data.format": ("data_format", str),
    "data.synth_users": ("synth_users", int),
    "data.synth_items": ("synth_items", int),
    "data.synth_avg_len": ("synth_avg_len", int),
    "data.synth_markov_order": ("synth_markov_order", int),
    "target.architecture": ("target_architecture", str),
    "target.dim": ("target_dim", int),
    "target.max_len": ("target_max_len", int),
    "target.pretrain_epochs": ("pretrain_epochs", int),
    "target.pretrain_lr": ("pretrain_lr", float),
    "target.pretrain_batch_size": ("pretrain_batch_size", int),
    "attack.architecture": ("surrogate_architecture", str),
    "attack.n_queries": ("attack.n_queries", int),
    "attack.k_response": ("attack.k_response", int),
    "attack.max_query_len": ("attack.max_query_len", int),
    "attack.strategy": ("attack.strategy", str),
    "attack.margin_pair": ("attack.margin_pair", float),
    "attack.margin_negative": ("attack.margin_negative", float),
    "attack.negatives_per_position": ("attack.negatives_per_position", int),
    "attack.lr": ("attack.lr", float),
    "attack.epochs": ("attack.epochs", int),
    "attack.surrogate_dim": ("attack.surrogate_dim", int),
    "attack.surrogate_max_len": ("attack.surrogate_max_len", int),
    "gro.k": ("gro.k", int),
    "gro.swap_weight": ("gro.swap_weight", float),
    "gro.swap_margin": ("gro.swap_margin", float),
    "gro.margin_pair": ("gro.margin_pair", float),
    "gro.margin_negative": ("gro.margin_negative", float),
    "gro.negatives_per_position": ("gro.negatives_per_position", int),
    "gro.lr_target": ("gro.lr_target", float),
    "gro.lr_student": ("gro.lr_student", float),
    "gro.epochs": ("gro.epochs", int),
    "gro.batch_size": ("gro.batch_size", int),
    "eval.ks": ("eval_ks", _parse_int_list),
    "run.defenses": ("defenses", _parse_str_list),
    "run.out": ("out_dir", str),
    "run.seed": ("seed", int),
}


class ConfigError(ValueError):
    """Unparseable or unknown configuration input."""


def parse_config(text: str) -> ExperimentConfig:
    """Parse flat ``key = value`` lines into an ExperimentConfig."""
    top: dict = {}
    nested: dict = {"attack": {}, "gro": {}}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        attr, parser = _CONFIG_KEYS[key]
        try:
            parsed = parser(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}")
        if "." in attr:
            section, name = attr.split(".")
            nested[section][name] = parsed
        else:
            top[attr] = parsed
    try:
        if nested["attack"]:
            top["attack"] = AttackConfig(**nested["attack"])
        if nested["gro"]:
            top["gro"] = GroConfig(**nested["gro"])
        return ExperimentConfig(**top)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())


def config_to_text(cfg: ExperimentConfig) -> str:
    """Inverse of ``parse_config``; emits every key in a fixed order."""
    lines = []
    for key, (attr, _) in _CONFIG_KEYS.items():
        if "." in attr:
            section, name = attr.split(".")
            value = getattr(getattr(cfg, section), name)
        else:
            value = getattr(cfg, attr)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    """Stable digest of the fully resolved configuration."""
    return hashlib.blake2b(config_to_text(cfg).encode(),
                           digest_size=16).hexdigest()


# ------------------------------------------------------------- pipeline

@dataclass
class RunArtifacts:
    """Filesystem layout and in-memory results of one experiment."""

    out_dir: Path
    manifest: dict
    summary_rows: list
    reports: dict

    @property
    def failed_stages(self) -> list:
        return [s for s in self.manifest["stages"]
                if s["status"] == "failed"]


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage tag."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


def prepare_split(cfg: ExperimentConfig):
    """Load or synthesize the corpus and split it leave-one-out."""
    if cfg.data_source == "file":
        data = load_interactions(cfg.data_path, cfg.data_format)
    else:
        data = synth_generate(cfg.synth_users, cfg.synth_items,
                              cfg.synth_avg_len, cfg.synth_markov_order,
                              seed=derive_seed(cfg.seed, "data"))
    return data, leave_one_out_split(data)


def pretrain_target(cfg: ExperimentConfig, split: SplitDataset,
                    architecture: str | None = None) -> SequenceModel:
    """Cross-entropy pretraining of the deployable target model."""
    model = init_model(architecture or cfg.target_architecture,
                       split.num_items, cfg.target_dim, cfg.target_max_len,
                       seed=derive_seed(cfg.seed, "target-init"))
    for epoch in range(cfg.pretrain_epochs):
        ce_train_epoch(model, split, cfg.pretrain_lr,
                       cfg.pretrain_batch_size,
                       seed=derive_seed(cfg.seed, "pretrain", epoch))
    return model


def _write_summary(path: Path, rows) -> None:
    lines = ["defense,model,k,hr,ndcg"]
    for defense, model_tag, k, hr, ndcg in rows:
        lines.append(f"{defense},{model_tag},{k},{hr!r},{ndcg!r}")
    path.write_text("\n".join(lines) + "\n")


def _report_rows(defense: str, model_tag: str, report: MetricsReport):
    return [(defense, model_tag, k, report.metrics[k][0],
             report.metrics[k][1]) for k in sorted(report.metrics)]


def deploy_arm(cfg: ExperimentConfig, split: SplitDataset,
               target: SequenceModel, defense: str, out: Path):
    """Turn the pretrained target into one deployed defense arm.

    Returns (deployed model, shield mode, artifact names). The gro arm
    fine-tunes a clone of the target and deploys it with no shield; the
    other arms deploy the target behind an output shield.
    """
    artifacts = []
    if defense == "gro":
        gro_cfg = replace(cfg.gro, seed=derive_seed(cfg.seed, "gro"))
        curve_path = out / "curves.csv"
        deployed = train_with_gro(target, split, gro_cfg, curve_path)
        artifacts.append(curve_path.name)
        shield_mode = DefenseMode("none")
    else:
        deployed = target
        shield_mode = DefenseMode(defense,
                                  seed=derive_seed(cfg.seed, "shield"))
    ckpt = out / f"target_{defense}.ckpt"
    save_checkpoint(deployed, ckpt)
    artifacts.append(ckpt.name)
    return deployed, shield_mode, artifacts


def attack_arm(cfg: ExperimentConfig, deployed: SequenceModel,
               shield_mode: DefenseMode, defense: str, out: Path):
    """Query the deployed arm and distill a surrogate from the log.

    Returns (surrogate, query log, artifact names). The attack and
    surrogate seeds are shared across arms so that defenses are
    compared on paired attack randomness.
    """
    artifacts = []
    attack_cfg = replace(cfg.attack, seed=derive_seed(cfg.seed, "attack"))
    oracle = OracleHandle(deployed, shield_mode, attack_cfg.k_response)
    log = generate_queries(oracle, attack_cfg)
    log_path = out / f"queries_{defense}.jsonl"
    save_query_log(log, log_path)
    artifacts.append(log_path.name)

    surrogate = train_surrogate(log, cfg.surrogate_architecture, attack_cfg)
    surrogate_ckpt = out / f"surrogate_{defense}.ckpt"
    save_checkpoint(surrogate, surrogate_ckpt)
    artifacts.append(surrogate_ckpt.name)
    return surrogate, log, artifacts


def run_defense_arm(cfg: ExperimentConfig, split: SplitDataset,
                    target: SequenceModel, defense: str, out: Path):
    """Protect, attack, and evaluate one defense arm.

    Returns (target report, surrogate report, artifact names).
    """
    deployed, shield_mode, artifacts = deploy_arm(cfg, split, target,
                                                  defense, out)
    surrogate, _, attack_artifacts = attack_arm(cfg, deployed, shield_mode,
                                                defense, out)
    artifacts.extend(attack_artifacts)
    target_report = evaluate_model(deployed, split, shield_mode, cfg.eval_ks,
                                   label=defense)
    surrogate_report = evaluate_model(surrogate, split, DefenseMode("none"),
                                      cfg.eval_ks, label=defense)
    return target_report, surrogate_report, artifacts


def run_experiment(cfg: ExperimentConfig) -> RunArtifacts:
    """Full pipeline over every configured defense arm.

    A failed stage is recorded in the manifest under its stage tag and
    the remaining arms still run; artifacts produced before the failure
    are kept.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.cfg").write_text(config_to_text(cfg))
    manifest = {"config_hash": config_hash(cfg), "stages": [],
                "artifacts": ["config.resolved.cfg"]}
    rows: list = []
    reports: dict = {}

    def finish() -> RunArtifacts:
        _write_summary(out / "summary.csv", rows)
        manifest["artifacts"].append("summary.csv")
        (out / "manifest.json").write_text(
            json.dumps(manifest, indent=2) + "\n")
        return RunArtifacts(out, manifest, rows, reports)

    try:
        data, split = prepare_split(cfg)
        manifest["stages"].append({"stage": "data", "status": "ok"})
    except Exception as exc:
        manifest["stages"].append({"stage": "data", "status": "failed",
                                   "error": str(exc)})
        return finish()
    stats = dataset_stats(data)
    (out / "dataset.json").write_text(json.dumps({
        "num_users": stats.num_users, "num_items": stats.num_items,
        "avg_length": stats.avg_length, "density": stats.density},
        indent=2) + "\n")
    manifest["artifacts"].append("dataset.json")

    try:
        target = pretrain_target(cfg, split)
        save_checkpoint(target, out / "target_pretrained.ckpt")
        manifest["artifacts"].append("target_pretrained.ckpt")
        manifest["stages"].append({"stage": "pretrain", "status": "ok"})
    except Exception as exc:
        manifest["stages"].append({"stage": "pretrain", "status": "failed",
                                   "error": str(exc)})
        return finish()

    for defense in cfg.defenses:
        stage = f"defense:{defense}"
        try:
            target_report, surrogate_report, names = run_defense_arm(
                cfg, split, target, defense, out)
        except Exception as exc:
            manifest["stages"].append({"stage": stage, "status": "failed",
                                       "error": str(exc)})
            continue
        manifest["stages"].append({"stage": stage, "status": "ok"})
        manifest["artifacts"].extend(names)
        reports[defense] = {"target": target_report,
                            "surrogate": surrogate_report}
        rows.extend(_report_rows(defense, "target", target_report))
        rows.extend(_report_rows(defense, "surrogate", surrogate_report))
        (out / f"metrics_{defense}.json").write_text(
            "[\n" + report_to_json(target_report) + ",\n" +
            report_to_json(surrogate_report) + "\n]\n")
        manifest["artifacts"].append(f"metrics_{defense}.json")
    return finish()


SWEEP_AXES = ("lambda", "n_queries")


def sweep(cfg: ExperimentConfig, axis: str, values) -> list:
    """One ``run_experiment`` per axis value; failures don't stop it.

    Writes a merged ``sweep.csv`` under ``cfg.out_dir`` with the axis
    value prefixed to every summary row.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    root = Path(cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    merged = ["axis,value,defense,model,k,hr,ndcg"]
    results = []
    for value in values:
        label = repr(float(value)) if axis == "lambda" else str(int(value))
        sub = root / f"sweep_{axis}_{label}"
        try:
            if axis == "lambda":
                point = replace(cfg,
                                gro=replace(cfg.gro, swap_weight=float(value)),
                                out_dir=str(sub))
            else:
                point = replace(cfg,
                                attack=replace(cfg.attack,
                                               n_queries=int(value)),
                                out_dir=str(sub))
            artifacts = run_experiment(point)
        except Exception as exc:
            results.append((value, exc))
            continue
        results.append((value, artifacts))
        for defense, model_tag, k, hr, ndcg in artifacts.summary_rows:
            merged.append(f"{axis},{label},{defense},{model_tag},{k},"
                          f"{hr!r},{ndcg!r}")
    (root / "sweep.csv").write_text("\n".join(merged) + "\n")
    return results
