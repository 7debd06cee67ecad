import json
import os

import numpy as np
import pytest

from pe_evade.campaign import (
    CampaignConfig,
    adversarial_retrain,
    fingerprint_report,
    run_campaign,
    strip_timestamps,
    summarize_arm,
)
from pe_evade.cli import main
from pe_evade.corpus import load_manifest, write_rigged_corpus
from pe_evade.env import EVADED, FAILED, Episode, SectionNameOracle
from pe_evade.errors import ConfigError, NoEvaders
from pe_evade.gbdt import GbdtParams, LabeledDataset, train
from pe_evade.mutations import ActionKind


def test_config_round_trip():
    cfg = CampaignConfig(corpus="c", budget=123, target_fpr=0.01, actions=["section_rename", "overlay_append"])
    again = CampaignConfig.from_text(cfg.to_text())
    assert again == cfg


def test_config_comments_and_errors():
    cfg = CampaignConfig.from_text("# header\nbudget = 40  # trailing\n\nseed=3\n")
    assert cfg.budget == 40 and cfg.seed == 3
    with pytest.raises(ConfigError):
        CampaignConfig.from_text("bogus = 1")
    with pytest.raises(ConfigError):
        CampaignConfig.from_text("budget = lots")
    with pytest.raises(ConfigError):
        CampaignConfig.from_text("no equals sign")


@pytest.mark.parametrize(
    "overrides",
    [dict(budget=5), dict(holdout=0), dict(target_fpr=1.5), dict(actions=["teleport"]), dict(temperature=0), dict(threshold=1.0)],
)
def test_config_validation(overrides):
    with pytest.raises(ConfigError):
        CampaignConfig(**overrides).validate(100)


def test_holdout_must_fit_corpus():
    with pytest.raises(ConfigError):
        CampaignConfig(holdout=50).validate(50)


def test_summarize_arm():
    R, A = ActionKind.SECTION_RENAME, ActionKind.SECTION_ADD
    eps = [
        Episode("a", [(A, None), (R, None)], EVADED),
        Episode("b", [(R, None)], EVADED),
        Episode("c", [(A, None)] * 10, FAILED),
        Episode("d", [], "skipped", skip_reason="initially-benign"),
    ]
    s = summarize_arm(eps, [a.value for a in (ActionKind.IMPORTS_APPEND, R, A)])
    assert s["played"] == 3 and s["evaded"] == 2 and s["skipped"] == 1
    assert s["evasion_rate"] == pytest.approx(2 / 3)
    assert s["dominant_mutation"] == "section_rename"
    assert s["median_mutations_to_evade"] == 1.5


@pytest.fixture(scope="module")
def smoke(small_corpus, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("smoke"))
    cfg = CampaignConfig(corpus=small_corpus, output=out, holdout=10, budget=300, gbdt_rounds=10, gbdt_depth=3, target_fpr=0.05, seed=1)
    run_campaign(cfg)
    with open(os.path.join(out, "report.json")) as f:
        return out, json.load(f)


def test_smoke_campaign_report(smoke, small_corpus):
    out, report = smoke
    for name in ("report.json", "report.txt", "agent.json", "model.json", "training_log.jsonl", "config.txt"):
        assert os.path.exists(os.path.join(out, name))
    assert report["training"]["mutations"] == 300
    assert report["holdout_overlap"] == 0
    assert set(report["arms"]) == {"agent", "random"}
    for arm in report["arms"].values():
        assert arm["n_holdout"] == 10
        assert arm["played"] + arm["skipped"] == 10
    labels = {e.id: e.label for e in load_manifest(small_corpus)}
    assert all(labels[i] == 1 for i in report["holdout_ids"])
    assert report["training_evader_audit"]["audit_failures"] == 0


def test_fingerprints_on_smoke_evaders(smoke):
    out, report = smoke
    fp = fingerprint_report(os.path.join(out, "evaders"))
    assert fp["n_evaders"] == report["training"]["evaders"]
    assert fp["audit_failures"] == 0


def test_fingerprints_without_evaders(tmp_path):
    fp = fingerprint_report(str(tmp_path))
    assert fp["n_evaders"] == 0 and fp["flagged_bins"] == []


def test_retrain_needs_evaders():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(60, 2350))
    data = LabeledDataset(X, (X[:, 0] > 0).astype(int))
    model = train(data, GbdtParams(n_rounds=3))
    with pytest.raises(NoEvaders):
        adversarial_retrain(model, [], data)


def test_rigged_campaign_with_custom_oracle(tmp_path):
    write_rigged_corpus(str(tmp_path), 30)
    cfg = CampaignConfig(corpus=str(tmp_path), output=str(tmp_path / "out"), holdout=5, budget=100)
    run_campaign(cfg, oracle=SectionNameOracle())
    with open(tmp_path / "out" / "report.json") as f:
        report = json.load(f)
    assert report["target_model"] is None
    assert report["arms"]["random"]["played"] == 5


# -- command line -----------------------------------------------------------------


def test_cli_round_trip(tmp_path, capsys):
    corpus = str(tmp_path / "corpus")
    assert main(["gen-corpus", "--out", corpus, "--benign", "30", "--malicious", "30", "--seed", "2"]) == 0
    model = str(tmp_path / "model.json")
    assert main(["model", "train", "--corpus", corpus, "--out", model, "--holdout", "5", "--rounds", "5", "--fpr", "0.05"]) == 0
    files = [os.path.join(corpus, e.file) for e in load_manifest(corpus)[:3]]
    capsys.readouterr()
    assert main(["model", "score", "--model", model, *files]) == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 3
    assert main(["model", "calibrate", "--model", model, "--corpus", corpus, "--fpr", "0.1"]) == 0
    capsys.readouterr()
    assert main(["features", files[0], "--compact"]) == 0
    blocks = json.loads(capsys.readouterr().out)
    assert sum(len(v) for v in blocks.values()) == 2350
    out = str(tmp_path / "m.exe")
    assert main(["mutate", files[0], "--action", "overlay_append", "--out", out]) == 0
    assert json.loads(capsys.readouterr().out)["ok"]
    run = ["campaign", "run", "--corpus", corpus, "--output", str(tmp_path / "camp"), "--model", model]
    assert main(run + ["--budget", "60", "--holdout", "5"]) == 0
    assert main(["fingerprints", str(tmp_path / "camp" / "evaders"), "--corpus", corpus]) == 0


def test_cli_exit_codes(tmp_path, capsys):
    cfg = tmp_path / "bad.txt"
    cfg.write_text("budget = 1\n")
    assert main(["campaign", "run", "--config", str(cfg), "--corpus", str(tmp_path)]) == 1
    assert main(["campaign", "run"]) == 1
    junk = tmp_path / "junk.exe"
    junk.write_bytes(b"not a pe")
    assert main(["features", str(junk)]) == 2
    assert main(["mutate", str(junk), "--action", "overlay_append", "--out", str(tmp_path / "o")]) == 2
    # a path that does not exist is a usage error, not a runtime failure
    assert main(["features", str(tmp_path / "missing.exe")]) == 1


def test_reports_are_reproducible(small_corpus, tmp_path):
    def go(name):
        cfg = CampaignConfig(corpus=small_corpus, output=str(tmp_path / name), holdout=6, budget=80, gbdt_rounds=4, target_fpr=0.05, seed=5)
        run_campaign(cfg)
        with open(tmp_path / name / "report.json") as f:
            return json.load(f)

    a, b = go("a"), go("b")
    a["config"].pop("output"), b["config"].pop("output")
    assert strip_timestamps(a) == strip_timestamps(b)
