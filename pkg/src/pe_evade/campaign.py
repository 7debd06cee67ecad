"""
Experiment drivers: target-model training over a corpus, agent campaigns with
an agent arm and a random arm on the same holdout, adversarial retraining and
the fingerprint audit.

A campaign directory ends up holding::

    report.json        machine-readable evaluation report
    report.txt         the same numbers as aligned text tables
    config.txt         resolved configuration (key = value)
    model.json         target model (when trained by the campaign)
    agent.json         agent checkpoint
    training_log.jsonl one record per training episode
    evaders/           harvested evasive variants + manifest.json
"""

from __future__ import annotations

import dataclasses
import datetime as _dt
import json
import os
import statistics
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .agent import PolicyParams, TrainedAgent, agent_episode, train_agent
from .corpus import CorpusEntry, holdout_split, load_manifest, read_sample
from .env import EVADED, SKIPPED, EnvConfig, Episode, EvasionEnv, LabelOracle, random_policy
from .errors import ConfigError, NoEvaders
from .features import BLOCK_SLICES, FEATURE_DIM, block_of, extract
from .gbdt import (
    GbdtModel,
    GbdtParams,
    LabeledDataset,
    ModelOracle,
    calibrate_threshold,
    roc_auc,
    train,
    validation_rows,
)
from .mutations import ActionKind, EngineConfig, action_space, validity_audit

REPORT_VERSION = 1
EVADER_MANIFEST = "manifest.json"


# -- configuration ----------------------------------------------------------------


@dataclass
class CampaignConfig:
    corpus: str = ""
    output: str = "campaign"
    model: str = ""  # empty: train one on the non-holdout part of the corpus
    holdout: int = 200
    budget: int = 50000
    max_turns: int = 10
    reward: float = 10.0
    threshold: float = 0.9
    target_fpr: Optional[float] = None  # when set, overrides threshold by calibration
    seed: int = 0
    packer: Optional[str] = None
    actions: Optional[List[str]] = None  # restrict the action set
    temperature: float = 1.0
    gamma: float = 0.95
    batch_size: int = 32
    learning_rate: float = 1e-3
    target_refresh: int = 100
    hidden: int = 64
    capacity: int = 5000
    selection: str = "softmax"
    gbdt_rounds: int = 100
    gbdt_depth: int = 5
    fingerprint_threshold: float = 0.25

    def validate(self, corpus_size: Optional[int] = None) -> None:
        if self.budget < self.max_turns:
            raise ConfigError("budget must be >= max_turns")
        if self.max_turns < 1 or self.reward <= 0:
            raise ConfigError("max_turns must be >= 1 and reward > 0")
        if self.holdout < 1:
            raise ConfigError("holdout must be >= 1")
        if corpus_size is not None and self.holdout >= corpus_size:
            raise ConfigError(f"holdout ({self.holdout}) must be smaller than the corpus ({corpus_size})")
        if self.target_fpr is not None and not 0 < self.target_fpr < 1:
            raise ConfigError("target_fpr must lie in (0, 1)")
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold must lie in (0, 1)")
        for name in self.actions or []:
            try:
                ActionKind(name)
            except ValueError:
                raise ConfigError(f"unknown action {name!r}") from None
        try:
            self.policy_params()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def policy_params(self) -> PolicyParams:
        return PolicyParams(
            temperature=self.temperature,
            gamma=self.gamma,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            target_refresh=self.target_refresh,
            hidden=self.hidden,
            capacity=self.capacity,
            selection=self.selection,
        )

    def engine(self) -> EngineConfig:
        return EngineConfig(packer_path=self.packer) if self.packer else EngineConfig.from_env()

    def env_config(self) -> EnvConfig:
        engine = self.engine()
        if self.actions:
            actions = [ActionKind(a) for a in self.actions]
        else:
            actions = action_space(engine)
        return EnvConfig(max_turns=self.max_turns, reward=self.reward, seed=self.seed, engine=engine, actions=actions)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if isinstance(value, list):
                value = ",".join(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "CampaignConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment."""
        types = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _coerce(key, value, cls)
        return cls(**values)

    @classmethod
    def load(cls, path: str) -> "CampaignConfig":
        try:
            with open(path) as f:
                return cls.from_text(f.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None


def _coerce(key: str, value: str, cls) -> object:
    default = {f.name: f.default for f in dataclasses.fields(cls)}[key]
    try:
        if key == "actions":
            return [a.strip() for a in value.split(",") if a.strip()]
        if key in ("target_fpr",):
            return None if value.lower() in ("", "none") else float(value)
        if key == "packer":
            return value or None
        if isinstance(default, bool):
            return value.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None


# -- data helpers -----------------------------------------------------------------


def featurize(corpus_dir: str, entries: Sequence[CorpusEntry], provenance: str = "original") -> LabeledDataset:
    X = np.stack([extract(read_sample(corpus_dir, e)) for e in entries]) if entries else np.zeros((0, FEATURE_DIM))
    return LabeledDataset(X, [e.label for e in entries], [e.id for e in entries], [provenance] * len(entries))


def train_target_model(
    data: LabeledDataset,
    params: Optional[GbdtParams] = None,
    threshold: float = 0.9,
    target_fpr: Optional[float] = None,
    excluded_ids: Sequence[str] = (),
) -> GbdtModel:
    """Train, then optionally move the threshold to hit ``target_fpr`` on the validation rows."""
    params = params or GbdtParams()
    model = train(data, params, threshold=threshold)
    if target_fpr is not None:
        _, ho = validation_rows(data, params)
        model.threshold = calibrate_threshold(model, data.subset(ho), target_fpr).threshold
    model.excluded_ids = sorted(excluded_ids)
    return model


# -- evaluation -------------------------------------------------------------------


def summarize_arm(episodes: Sequence[Episode], action_names: Sequence[str]) -> dict:
    """Evasion-rate table row for one policy arm."""
    played = [e for e in episodes if e.outcome != SKIPPED]
    evaded = [e for e in played if e.outcome == EVADED]
    success_actions = Counter(a.value for e in evaded for a in e.actions)
    all_actions = Counter(a.value for e in played for a in e.actions)
    lengths = Counter(len(e.steps) for e in evaded)
    dominant = None
    if success_actions:
        top = max(success_actions.values())
        dominant = next(a for a in action_names if success_actions.get(a) == top)
    return {
        "n_holdout": len(episodes),
        "skipped": len(episodes) - len(played),
        "skip_reasons": dict(sorted(Counter(e.skip_reason for e in episodes if e.outcome == SKIPPED).items())),
        "played": len(played),
        "evaded": len(evaded),
        "evasion_rate": len(evaded) / len(played) if played else 0.0,
        "dominant_mutation": dominant,
        "median_mutations_to_evade": float(statistics.median(len(e.steps) for e in evaded)) if evaded else None,
        "successful_action_histogram": {a: success_actions.get(a, 0) for a in action_names},
        "action_histogram": {a: all_actions.get(a, 0) for a in action_names},
        "mutations_to_evade_histogram": {str(k): lengths[k] for k in sorted(lengths)},
    }


def evaluate_arms(
    env_factory,
    agent: TrainedAgent,
    holdout: Sequence[Tuple[str, bytes]],
    seed: int,
) -> Dict[str, List[Episode]]:
    """Run the agent arm and the uniform-random arm on the same holdout."""
    env = env_factory()
    agent_rng = np.random.default_rng([seed, 1])
    random_rng = np.random.default_rng([seed, 2])
    return {
        "agent": [agent_episode(env, agent, data, sid, agent_rng) for sid, data in holdout],
        "random": [random_policy(env, data, random_rng, sid) for sid, data in holdout],
    }


def audit_summary(pairs: Sequence[Tuple[bytes, bytes]]) -> dict:
    """Aggregate validity audits over (original, mutated) pairs."""
    fingerprints: Counter = Counter()
    failures = 0
    for original, mutated in pairs:
        report = validity_audit(original, mutated)
        if not report.ok:
            failures += 1
        for fp in report.fingerprints:
            fingerprints[fp.split(":", 1)[0]] += 1
    return {"n": len(pairs), "audit_failures": failures, "fingerprints": dict(sorted(fingerprints.items()))}


# -- campaign ---------------------------------------------------------------------


def _write_json(path: str, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")


def write_evaders(out_dir: str, evaders, corpus_dir: Optional[str], corpus_files: Dict[str, str]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i, (sid, data, actions) in enumerate(evaders):
        name = f"{i:05d}_{sid}.exe"
        with open(os.path.join(out_dir, name), "wb") as f:
            f.write(data)
        rows.append({"file": name, "sample_id": sid, "original": corpus_files.get(sid), "actions": actions})
    _write_json(
        os.path.join(out_dir, EVADER_MANIFEST),
        {"corpus": os.path.abspath(corpus_dir) if corpus_dir else None, "evaders": rows},
    )


def load_evaders(evaders_dir: str) -> Tuple[dict, List[Tuple[dict, bytes]]]:
    with open(os.path.join(evaders_dir, EVADER_MANIFEST)) as f:
        manifest = json.load(f)
    out = []
    for row in manifest["evaders"]:
        with open(os.path.join(evaders_dir, row["file"]), "rb") as f:
            out.append((row, f.read()))
    return manifest, out


def format_report(report: dict) -> str:
    """Aligned text tables: evasion rates per arm, then dominant mutations."""
    arms = report["arms"]
    lines = [
        f"Evasion rate on {arms['agent']['n_holdout']} holdout samples "
        f"(budget {report['training']['mutations']} mutations, max {report['config']['max_turns']} per sample)",
        "",
        f"{'arm':<8} {'evaded':>7} {'played':>7} {'skipped':>8} {'rate':>8}",
    ]
    for name in ("agent", "random"):
        a = arms[name]
        lines.append(f"{name:<8} {a['evaded']:>7} {a['played']:>7} {a['skipped']:>8} {a['evasion_rate']:>8.1%}")
    lines += ["", "Dominant successful mutation (median mutations to evade)", ""]
    for name in ("agent", "random"):
        a = arms[name]
        dom = a["dominant_mutation"] or "-"
        med = a["median_mutations_to_evade"]
        lines.append(f"{name:<8} {dom} ({'-' if med is None else f'{med:g}'})")
    lines += ["", f"{'action':<34} {'agent':>7} {'random':>7}"]
    for action in arms["agent"]["successful_action_histogram"]:
        lines.append(
            f"{action:<34} {arms['agent']['successful_action_histogram'][action]:>7} "
            f"{arms['random']['successful_action_histogram'][action]:>7}"
        )
    audit = report["training_evader_audit"]
    lines += [
        "",
        f"training evaders: {audit['n']}, audit failures: {audit['audit_failures']}",
        "fingerprints: " + (", ".join(f"{k}={v}" for k, v in audit["fingerprints"].items()) or "none"),
        f"holdout/training overlap: {report['holdout_overlap']}",
    ]
    return "\n".join(lines) + "\n"


def run_campaign(config: CampaignConfig, oracle: Optional[LabelOracle] = None) -> str:
    """Train an agent within the budget, evaluate both arms, write all artifacts. Returns the output dir.

    ``oracle`` replaces the GBDT target (rigged experiments); by default the
    model named in the config is loaded, or trained on the non-holdout files.
    """
    try:
        entries = load_manifest(config.corpus)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load corpus {config.corpus!r}: {exc}") from None
    config.validate(len(entries))
    os.makedirs(config.output, exist_ok=True)
    rest, holdout = holdout_split(entries, config.holdout, config.seed)
    holdout_ids = {e.id for e in holdout}

    model_training_ids: List[str] = []
    model_info = None
    if oracle is None:
        if config.model:
            model = GbdtModel.load(config.model)
            leaked = holdout_ids - set(model.excluded_ids)
            if leaked:
                raise ConfigError(f"model was trained without withholding {len(leaked)} holdout samples")
            model_training_ids = [e.id for e in rest]
        else:
            data = featurize(config.corpus, rest)
            params = GbdtParams(n_rounds=config.gbdt_rounds, max_depth=config.gbdt_depth, seed=config.seed)
            model = train_target_model(data, params, config.threshold, config.target_fpr, sorted(holdout_ids))
            model.save(os.path.join(config.output, "model.json"))
            model_training_ids = list(data.ids)
        oracle = ModelOracle(model)
        model_info = {"threshold": model.threshold, "holdout_auc": model.metrics.holdout_auc, "n_trees": len(model.trees)}

    env_config = config.env_config()

    def factory():
        return EvasionEnv(oracle, env_config)

    train_entries = [e for e in rest if e.label == 1]
    train_samples = [(e.id, read_sample(config.corpus, e)) for e in train_entries]
    result = train_agent(factory, train_samples, config.budget, config.policy_params(), seed=config.seed)
    agent = result.agent
    agent.save(os.path.join(config.output, "agent.json"))
    with open(os.path.join(config.output, "training_log.jsonl"), "w") as f:
        for record in agent.log:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    corpus_files = {e.id: e.file for e in entries}
    write_evaders(os.path.join(config.output, "evaders"), result.evaders, config.corpus, corpus_files)

    held = [(e.id, read_sample(config.corpus, e)) for e in holdout]
    arms = evaluate_arms(factory, agent, held, config.seed)
    originals = dict(train_samples)
    training_ids = {e.id for e in train_entries} | set(model_training_ids)
    report = {
        "report_version": REPORT_VERSION,
        "generated_at": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "config": dataclasses.asdict(config),
        "actions": agent.actions,
        "policy_params": dataclasses.asdict(agent.params),
        "target_model": model_info,
        "training": {
            "mutations": result.steps,
            "budget": config.budget,
            "episodes": sum(1 for e in result.episodes if e.outcome != SKIPPED),
            "skipped": sum(1 for e in result.episodes if e.outcome == SKIPPED),
            "evaders": len(result.evaders),
        },
        "arms": {name: summarize_arm(eps, agent.actions) for name, eps in arms.items()},
        "training_evader_audit": audit_summary([(originals[sid], data) for sid, data, _ in result.evaders]),
        "holdout_overlap": len(holdout_ids & training_ids),
        "holdout_ids": sorted(holdout_ids),
    }
    _write_json(os.path.join(config.output, "report.json"), report)
    with open(os.path.join(config.output, "report.txt"), "w") as f:
        f.write(format_report(report))
    with open(os.path.join(config.output, "config.txt"), "w") as f:
        f.write(config.to_text())
    return config.output


def strip_timestamps(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "generated_at"}


# -- hardening --------------------------------------------------------------------


@dataclass
class HardeningReport:
    n_evaders: int
    before: dict
    after: dict
    auc_before: Optional[float]
    auc_after: Optional[float]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _arm_rate(env: EvasionEnv, agent: TrainedAgent, holdout, seed: int) -> dict:
    rng = np.random.default_rng([seed, 1])
    episodes = [agent_episode(env, agent, data, sid, rng) for sid, data in holdout]
    return summarize_arm(episodes, agent.actions)


def adversarial_retrain(
    model: GbdtModel,
    evaders: Sequence[bytes],
    original: LabeledDataset,
    agent: Optional[TrainedAgent] = None,
    holdout: Sequence[Tuple[str, bytes]] = (),
    env_config: Optional[EnvConfig] = None,
    seed: int = 0,
) -> Tuple[GbdtModel, HardeningReport]:
    """Append evaders as malicious rows and retrain with the same params and validation rows.

    The frozen ``agent`` is replayed on ``holdout`` against both models;
    rates count only samples the respective model flags malicious at reset.
    """
    if not evaders:
        raise NoEvaders("adversarial retraining needs at least one evader")
    params = model.params or GbdtParams()
    _, ho = validation_rows(original, params)
    X_adv = np.stack([extract(b) for b in evaders])
    ids = [f"adv_{i:05d}" for i in range(len(evaders))]
    data = original.extend(X_adv, [1] * len(evaders), ids, "adversarial")
    hardened = train(data, params, threshold=model.threshold, holdout_idx=ho)
    hardened.excluded_ids = list(model.excluded_ids)

    auc_before = None
    if len(ho) and len(np.unique(original.y[ho])) == 2:
        auc_before = roc_auc(original.y[ho], model.predict_proba(original.X[ho]))
    auc_after = hardened.metrics.holdout_auc

    before = after = {}
    if agent is not None and holdout:
        env_config = env_config or EnvConfig(seed=seed)
        before = _arm_rate(EvasionEnv(ModelOracle(model), env_config), agent, holdout, seed)
        after = _arm_rate(EvasionEnv(ModelOracle(hardened), env_config), agent, holdout, seed)
    return hardened, HardeningReport(len(evaders), before, after, auc_before, auc_after)


def harden_campaign(campaign_dir: str, output: Optional[str] = None) -> HardeningReport:
    """Retrain a campaign's target model on its harvested evaders and replay its frozen agent."""
    with open(os.path.join(campaign_dir, "config.txt")) as f:
        config = CampaignConfig.from_text(f.read())
    model_path = config.model or os.path.join(campaign_dir, "model.json")
    model = GbdtModel.load(model_path)
    agent = TrainedAgent.load(os.path.join(campaign_dir, "agent.json"))
    _, evaders = load_evaders(os.path.join(campaign_dir, "evaders"))
    entries = load_manifest(config.corpus)
    rest, holdout = holdout_split(entries, config.holdout, config.seed)
    original = featurize(config.corpus, rest)
    held = [(e.id, read_sample(config.corpus, e)) for e in holdout]
    hardened, report = adversarial_retrain(
        model, [b for _, b in evaders], original, agent, held, config.env_config(), config.seed
    )
    output = output or campaign_dir
    os.makedirs(output, exist_ok=True)
    hardened.save(os.path.join(output, "model_hardened.json"))
    _write_json(os.path.join(output, "harden_report.json"), report.to_dict())
    return report


# -- fingerprints -----------------------------------------------------------------


def fingerprint_report(evaders_dir: str, corpus_dir: Optional[str] = None, threshold: float = 0.25) -> dict:
    """Where do evaders differ systematically from the files they came from?

    Audit fingerprints are tallied, and feature bin ``j`` is flagged when the
    mean paired shift ``extract(evader) - extract(original)`` exceeds
    ``threshold`` times the spread of bin ``j`` over the corpus's malicious
    files (any shift at all when that spread is zero).
    """
    empty = {
        "n_evaders": 0,
        "threshold": threshold,
        "fingerprints": {},
        "audit_failures": 0,
        "flagged_bins": [],
        "flagged_blocks": {},
    }
    if not os.path.exists(os.path.join(evaders_dir, EVADER_MANIFEST)):
        return empty
    manifest, evaders = load_evaders(evaders_dir)
    if not evaders:
        return empty
    corpus_dir = corpus_dir or manifest.get("corpus")
    if corpus_dir is None:
        raise ConfigError("fingerprint report needs the source corpus")
    entries = {e.file: e for e in load_manifest(corpus_dir)}
    pairs = []
    for row, data in evaders:
        pairs.append((read_sample(corpus_dir, entries[row["original"]]), data))
    audit = audit_summary(pairs)

    deltas = np.stack([extract(m) - extract(o) for o, m in pairs])
    reference = featurize(corpus_dir, [e for e in entries.values() if e.label == 1]).X
    spread = reference.std(axis=0)
    shift = deltas.mean(axis=0)
    flagged = np.flatnonzero(np.abs(shift) > np.maximum(threshold * spread, 1e-12))
    bins = [
        {
            "index": int(j),
            "block": block_of(int(j)),
            "offset": int(j - BLOCK_SLICES[block_of(int(j))].start),
            "mean_shift": float(shift[j]),
            "reference_std": float(spread[j]),
        }
        for j in flagged
    ]
    return {
        "n_evaders": len(pairs),
        "threshold": threshold,
        "fingerprints": audit["fingerprints"],
        "audit_failures": audit["audit_failures"],
        "flagged_bins": bins,
        "flagged_blocks": dict(sorted(Counter(b["block"] for b in bins).items())),
    }
