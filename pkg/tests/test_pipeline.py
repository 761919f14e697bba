import json
import os

import numpy as np
import pandas as pd
import pytest

import main
from source import settings
from source.call_vlm import MockVLMClient
from source.coarse_generator import generate_candidates
from source.errors import PromptFileMissing, RunNotFound, StageError
from source.eval_harness import read_scores
from source.interaction_corrector import rerender
from source.pipeline import (
    Components,
    build_components,
    evaluate,
    inspect_attention,
    prepare_prompt,
    replay,
    run_batch,
    run_generate,
)
from source.run_store import load_png, to_uint8

PROMPT = "a man is kicking a ball"
SMALL = dict(T1=4, T2=12, k=3, gamma=2, divergence_tolerance=10.0)
SMALL_SET = ["T1=4", "T2=12", "k=3", "gamma=2", "divergence_tolerance=10"]


class ConstantEmbedder:
    name = "constant"

    def embed_image(self, image):
        return np.array([1.0, 0.0])

    def embed_text(self, text):
        return np.array([1.0, 1.0])


def _read(path):
    with open(path, "rb") as f:
        return f.read()


def test_full_run_is_reproducible(run_config, tmp_path):
    a = run_generate(PROMPT, run_config(**SMALL))
    b = run_generate(PROMPT, run_config(**SMALL, out=str(tmp_path / "again")))

    assert a.manifest["run_id"] == b.manifest["run_id"]
    assert a.manifest["manifest_hash"] == b.manifest["manifest_hash"]
    final = os.path.join(a.path, settings.final_image_name)
    assert _read(final) == _read(os.path.join(b.path, settings.final_image_name))

    results = a.manifest["results"]
    assert results["selected_index"] == 0
    assert results["final"] == ("corrected" if results["needs_correction"] else "rerender")
    artifacts = a.manifest["artifacts"]
    for key in ("candidate_0", "candidate_2", "candidates_manifest", "agent_log", "human_mask", "final", "attention"):
        assert os.path.isfile(os.path.join(a.path, artifacts[key]))
    if results["needs_correction"]:
        assert os.path.isfile(os.path.join(a.path, artifacts["loss_trace"]))
    assert a.manifest["seeds"] == {"base_seed": 0, "candidate_seeds": [0, 1, 2], "chosen_seed": 0}
    assert "out" not in a.manifest["config"]


def test_default_run_manifest_is_plain_json(run_config):
    outcome = run_generate(PROMPT, run_config(**SMALL))
    assert outcome.manifest["modules"] == "g,r,c"
    with open(os.path.join(outcome.path, settings.manifest_name), encoding="utf-8") as f:
        loaded = json.load(f)
    results = loaded["results"]
    assert type(results["needs_correction"]) is bool
    assert all(type(v) is float for v in results["extracted_box"] + results["proposed_box"])
    assert loaded["manifest_hash"] == outcome.manifest["manifest_hash"]


def test_coarse_only_run_never_calls_the_agents(run_config):
    cfg = run_config(**SMALL, modules="g")
    vlm = MockVLMClient()
    components = build_components(cfg)
    assert components.vlm is None
    outcome = run_generate(PROMPT, cfg, Components(backbone=components.backbone, vlm=vlm))
    assert vlm.requests == []
    assert outcome.manifest["results"] == {"final": "candidates"}
    assert "final" not in outcome.manifest["artifacts"]
    assert not os.path.exists(os.path.join(outcome.path, settings.agent_log_name))
    assert sorted(os.listdir(os.path.join(outcome.path, settings.candidates_subdir))) == [
        "0.png", "1.png", "2.png", "manifest.json"
    ]


def test_plain_baseline_run(run_config):
    outcome = run_generate(PROMPT, run_config(**SMALL, modules="sd", seed=4))
    assert outcome.manifest["seeds"] == {"base_seed": 4, "candidate_seeds": [4], "chosen_seed": 4}
    assert outcome.manifest["results"]["final"] == "plain"
    assert not any(k.startswith("candidate_") for k in outcome.manifest["artifacts"])


def test_echoed_layout_skips_correction(run_config):
    cfg = run_config(**SMALL, mock_layout="echo")
    outcome = run_generate(PROMPT, cfg)
    results = outcome.manifest["results"]
    assert results["needs_correction"] is False and results["final"] == "rerender"
    assert results["proposed_box"] == pytest.approx(results["extracted_box"], abs=1e-6)

    components = build_components(cfg)
    pair = prepare_prompt(PROMPT, cfg, components.backbone)
    chosen = generate_candidates(pair, cfg.guidance(), components.backbone)[0]
    expected = rerender(chosen, pair, cfg.guidance(), components.backbone).image
    final = load_png(os.path.join(outcome.path, settings.final_image_name))
    assert np.array_equal(final, to_uint8(expected) / 255.0)


def test_agent_failure_is_tagged_and_logged(run_config):
    cfg = run_config(**SMALL)
    components = build_components(cfg)
    components.vlm = MockVLMClient(responder=lambda r: "I cannot tell")
    with pytest.raises(StageError) as info:
        run_generate(PROMPT, cfg, components)
    assert info.value.stage == "reasoning"
    (run_id,) = os.listdir(cfg.out)
    with open(os.path.join(cfg.out, run_id, settings.agent_log_name), encoding="utf-8") as f:
        log = f.read()
    assert log.count("I cannot tell") == settings.AGENT_RETRIES + 1


def test_bad_prompt_fails_in_the_prompt_stage(run_config):
    with pytest.raises(StageError) as info:
        run_generate("kicking ball man", run_config(**SMALL))
    assert info.value.stage == "prompt"


def test_replay_reproduces_the_run(run_config, tmp_path):
    first = run_generate(PROMPT, run_config(**SMALL, seed=3))
    again = replay(os.path.join(first.path, settings.manifest_name), run_config(out=str(tmp_path / "replay")))
    assert again.manifest["manifest_hash"] == first.manifest["manifest_hash"]
    assert _read(os.path.join(again.path, settings.final_image_name)) == _read(
        os.path.join(first.path, settings.final_image_name)
    )


def test_batch_with_a_malformed_line(run_config, tmp_path):
    prompts = tmp_path / "prompts.txt"
    prompts.write_text(
        "# interactions\n" + PROMPT + "\nthis is not a prompt\nwoman|ride|horse\n", encoding="utf-8"
    )
    cfg = run_config(**SMALL, workers=2)
    first = run_batch(str(prompts), cfg)
    assert [r["line"] for r in first["runs"]] == [2, 4]
    assert [(f["line"], f["stage"]) for f in first["failures"]] == [(3, "prompt")]
    ledger = pd.read_csv(first["ledger"], sep="\t")
    assert list(ledger.columns) == ["line", "prompt", "stage", "error"]
    assert ledger["prompt"].tolist() == ["this is not a prompt"]

    second = run_batch(str(prompts), cfg)
    assert second["batch_id"] == first["batch_id"]
    assert second["runs"] == first["runs"]


def test_batch_augments_subjects(run_config, tmp_path):
    prompts = tmp_path / "prompts.txt"
    prompts.write_text(PROMPT + "\n", encoding="utf-8")
    out = run_batch(str(prompts), run_config(**SMALL, modules="g"), augment=2)
    assert len(out["runs"]) == 2
    assert all(r["prompt"].endswith("|kick|ball") for r in out["runs"])


def test_batch_runs_identical_records_once(run_config, tmp_path, monkeypatch):
    monkeypatch.setattr(settings, "SUBJECT_POOL", ["man"])
    prompts = tmp_path / "prompts.txt"
    prompts.write_text(PROMPT + "\n", encoding="utf-8")
    cfg = run_config(**SMALL, workers=3)
    out = run_batch(str(prompts), cfg, augment=3)
    assert [r["prompt"] for r in out["runs"]] == ["man|kick|ball"] * 3
    assert len({r["run_id"] for r in out["runs"]}) == 1
    assert out["failures"] == []
    run_dirs = [d for d in os.listdir(cfg.out) if d != "batches"]
    assert run_dirs == [out["runs"][0]["run_id"]]
    with open(os.path.join(cfg.out, run_dirs[0], settings.manifest_name), encoding="utf-8") as f:
        assert json.load(f)["manifest_hash"] == out["runs"][0]["manifest_hash"]


def test_batch_rejects_empty_files(run_config, tmp_path):
    empty = tmp_path / "empty.txt"
    empty.write_text("# nothing here\n\n", encoding="utf-8")
    with pytest.raises(PromptFileMissing):
        run_batch(str(empty), run_config(**SMALL))


def test_inspect_attention(run_config, tmp_path):
    cfg = run_config(**SMALL)
    outcome = run_generate(PROMPT, cfg)
    run_id = outcome.manifest["run_id"]
    dumps = str(tmp_path / "dumps")

    result = inspect_attention(cfg.out, run_id, step=1, dumps_root=dumps)
    assert result["status"] == "ok"
    assert len(result["files"]) == 2 * 6
    arr_path = os.path.join(dumps, run_id, "1", "cross_8", "5.arr")
    with open(arr_path, "rb") as f:
        assert np.load(f).shape == (8, 8)

    late = inspect_attention(cfg.out, run_id, step=cfg.T2 + 5, dumps_root=dumps)
    assert late["status"] == "warning" and late["files"] == []
    with pytest.raises(RunNotFound):
        inspect_attention(cfg.out, "ffffffffffffffff", step=1, dumps_root=dumps)


def test_evaluate_scores_every_run(run_config):
    cfg = run_config(**SMALL, modules="g")
    a = run_generate(PROMPT, cfg)
    b = run_generate("woman|ride|horse", cfg)
    out = evaluate(cfg.out, ConstantEmbedder())
    assert sorted(out["runs"]) == sorted([a.manifest["run_id"], b.manifest["run_id"]])
    assert os.path.isfile(os.path.join(a.path, settings.scores_name))
    summary = pd.read_csv(out["summary"], sep="\t", comment="#")
    assert summary["count"].tolist() == [2]
    assert summary["clip_score"].iloc[0] == pytest.approx(100.0 / np.sqrt(2.0))


class PromptEmbedder:
    name = "prompt"

    def __init__(self, texts):
        self.texts = texts

    def embed_image(self, image):
        return np.array([1.0, 0.0])

    def embed_text(self, text):
        return np.array([1.0, 0.0]) if text in self.texts else np.array([0.0, 1.0])


def test_evaluate_uses_the_runs_gerund_table(run_config):
    cfg = run_config(**SMALL, modules="g", gerund_overrides=(("kick", "punting"),))
    outcome = run_generate("man|kick|ball", cfg)
    assert outcome.manifest["prompt_source"]["full_prompt"] == "a man is punting a ball"
    embedder = PromptEmbedder({"a man is punting a ball", "a person is punting"})
    evaluate(cfg.out, embedder)
    (record,) = read_scores(os.path.join(outcome.path, settings.scores_name))
    assert (record.prompt, record.clip_score, record.verb_clip_score) == ("a man is punting a ball", 100.0, 100.0)


def test_cli_generate_and_errors(tmp_path, capsys):
    out = str(tmp_path / "runs")
    flags = ["--out", out] + [x for s in SMALL_SET for x in ("--set", s)]

    assert main.main(["generate", PROMPT, *flags]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["run_id"] in os.listdir(out)

    assert main.main(["generate", "kicking ball man", *flags]) == 1
    assert "\"status\": \"error\"" in capsys.readouterr().err
    assert main.main(["evaluate", "--out", out]) == 1
    assert main.main(["inspect-attention", "--out", out, "--run", "0000000000000000", "--step", "1"]) == 1


def test_cli_inspect_attention(tmp_path, capsys):
    out = str(tmp_path / "runs")
    flags = ["--out", out] + [x for s in SMALL_SET for x in ("--set", s)]
    assert main.main(["generate", PROMPT, *flags]) == 0
    run_id = json.loads(capsys.readouterr().out)["run_id"]
    dumps = str(tmp_path / "dumps")
    assert main.main(["inspect-attention", "--out", out, "--run", run_id, "--step", "2", "--dumps", dumps]) == 0
    assert json.loads(capsys.readouterr().out)["status"] == "ok"


def test_cli_replay_of_a_broken_manifest(tmp_path, capsys):
    broken = tmp_path / "manifest.json"
    broken.write_text(json.dumps({"run_id": "0123456789abcdef", "modules": "g"}), encoding="utf-8")
    assert main.main(["generate", "--from-manifest", str(broken), "--out", str(tmp_path / "runs")]) == 1
    assert "invalid run manifest" in capsys.readouterr().err
