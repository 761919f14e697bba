# pipeline.py
# Run orchestration: M_g -> M_r -> M_c with ablation switches, artifacts
# under runs/<id>/, batch runs with an error ledger, attention dumps and
# scoring of finished runs.
import os
import hashlib
import logging
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from contextlib import contextmanager
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from source import settings
from source.attention_engine import aggregate_token_map, map_resolution
from source.call_vlm import MockVLMClient, OpenAIVLMClient, VLMClient
from source.coarse_generator import generate_candidates, plain_sample
from source.config import PipelineConfig, from_dict
from source.diffusion_backbone import DiffusionBackbone, build_backbone
from source.errors import HOIGenError, StageError
from source.eval_harness import (
    Embedder,
    ScoreRecord,
    build_embedder,
    score_run,
    write_report,
    write_scores,
)
from source.interaction_corrector import corrected_generate, rerender, write_loss_trace
from source.prompt_engine import PromptPair, augment_subjects, load_prompt_file, parse_triplet, render_prompts
from source.reasoning_agents import (
    AgentTranscript,
    KeypointDetector,
    LayoutAgent,
    MediaPipeKeypointDetector,
    PoseSelectionAgent,
    StubKeypointDetector,
    extract_object_box,
    human_box,
    human_mask,
    scripted_responder,
)
from source.run_store import (
    canonical_json,
    compute_run_id,
    find_run,
    list_runs,
    load_attention,
    load_png,
    read_manifest,
    run_dir,
    save_attention,
    save_heatmap_png,
    save_mask_png,
    save_png,
    write_json,
    write_manifest,
    write_table,
)

logger = logging.getLogger(__name__)

LEDGER_COLUMNS = ["line", "prompt", "stage", "error"]


@contextmanager
def stage(name: str):
    """Tag any failure inside the block with its pipeline stage."""
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, e) from e


@dataclass
class Components:
    backbone: DiffusionBackbone
    vlm: Optional[VLMClient] = None
    detector: Optional[KeypointDetector] = None
    embedder: Optional[Embedder] = None


def build_components(cfg: PipelineConfig) -> Components:
    with stage("render"):
        backbone = build_backbone(cfg.backbone, cfg.model_id, cfg.device, cfg.attention_resolutions)
    vlm = detector = None
    if "r" in cfg.module_set:
        with stage("reasoning"):
            if cfg.vlm == "mock":
                vlm = MockVLMClient(responder=scripted_responder(cfg.mock_layout))
            else:
                vlm = OpenAIVLMClient(
                    model=cfg.vlm_model,
                    api_key_env=cfg.vlm_api_key_env,
                    cache_dir=cfg.vlm_cache,
                    min_interval=cfg.vlm_min_interval,
                    max_retries=cfg.vlm_max_retries,
                )
            detector = StubKeypointDetector() if cfg.keypoints == "stub" else MediaPipeKeypointDetector()
    with stage("evaluate"):
        embedder = build_embedder(cfg.embedder, cfg.clip_model, cfg.device)
    return Components(backbone=backbone, vlm=vlm, detector=detector, embedder=embedder)


@dataclass
class RunOutcome:
    manifest: Dict[str, Any]
    path: str
    score: Optional[ScoreRecord] = None


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _sha256_file(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def prepare_prompt(text: str, cfg: PipelineConfig, backbone: DiffusionBackbone) -> PromptPair:
    with stage("prompt"):
        triplet = parse_triplet(text, cfg.gerund_table)
        return render_prompts(triplet, backbone.tokenize, cfg.gerund_table)


def run_generate(
    prompt: str,
    cfg: PipelineConfig,
    components: Optional[Components] = None,
) -> RunOutcome:
    """One prompt through the enabled modules; every artifact lands in runs/<id>/."""
    components = components or build_components(cfg)
    backbone = components.backbone
    guidance = cfg.guidance()
    modules = cfg.module_set
    started = _now()

    pair = prepare_prompt(prompt, cfg, backbone)
    seeds = [cfg.seed] if modules == ("sd",) else [cfg.seed + i for i in range(guidance.k)]
    run_id = compute_run_id(cfg.output_relevant(), prompt, seeds, cfg.modules)
    rd = run_dir(cfg.out, run_id, create=True)
    logger.info("Run %s: %r with modules %s", run_id, pair.full_prompt, cfg.modules)

    artifacts: Dict[str, str] = {}
    results: Dict[str, Any] = {}
    final_image: Optional[np.ndarray] = None
    attention_trace = []
    chosen_seed: Optional[int] = None

    def artifact(key: str, name: str) -> str:
        artifacts[key] = name
        return os.path.join(rd, name)

    if modules == ("sd",):
        with stage("render"):
            final_image, sample = plain_sample(pair, guidance, backbone, cfg.seed, cfg.record_attention)
        attention_trace = sample.attention_trace
        chosen_seed = cfg.seed
        results["final"] = "plain"
    else:
        with stage("coarse"):
            candidates = generate_candidates(
                pair, guidance, backbone, base_seed=cfg.seed, record_attention=cfg.record_attention
            )
        for c in candidates:
            save_png(c.preview, artifact(f"candidate_{c.index}", f"{settings.candidates_subdir}/{c.index}.png"))
        write_json(
            artifact("candidates_manifest", f"{settings.candidates_subdir}/{settings.manifest_name}"),
            {
                "full_prompt": pair.full_prompt,
                "intransitive_prompt": pair.intransitive_prompt,
                "alignment": {str(i): j for i, j in sorted(pair.alignment.items())},
                "candidates": [{"index": c.index, "seed": c.seed} for c in candidates],
            },
        )
        chosen = candidates[0]
        attention_trace = chosen.attention_trace
        results["final"] = "candidates"

        if "r" in modules:
            chosen, suggestion = _reason(pair, candidates, cfg, components, rd, artifact, results)
            if suggestion is not None and suggestion.needs_correction and "c" in modules:
                with stage("correction"):
                    outcome = corrected_generate(
                        chosen, suggestion, pair, guidance, backbone, record_attention=cfg.record_attention
                    )
                write_loss_trace(outcome.loss_trace, artifact("loss_trace", settings.loss_trace_name))
                results["final"] = "corrected"
                if outcome.loss_trace:
                    results["loss_first"] = outcome.loss_trace[0].total
                    results["loss_last"] = outcome.loss_trace[-1].total
            else:
                with stage("render"):
                    outcome = rerender(chosen, pair, guidance, backbone, record_attention=cfg.record_attention)
                results["final"] = "rerender"
            final_image = outcome.image
            attention_trace = outcome.attention_trace
        chosen_seed = chosen.seed

    if final_image is not None:
        path = artifact("final", settings.final_image_name)
        save_png(final_image, path)
        results["final_sha256"] = _sha256_file(path)
    if cfg.record_attention and attention_trace:
        save_attention(artifact("attention", settings.attention_name), attention_trace)

    score = None
    if components.embedder is not None:
        image = final_image if final_image is not None else load_png(os.path.join(rd, artifacts["candidate_0"]))
        with stage("evaluate"):
            score = score_run(run_id, image, pair, components.embedder, gerund_overrides=cfg.gerund_table)
            write_scores([score], artifact("scores", settings.scores_name))

    manifest = write_manifest(
        os.path.join(rd, settings.manifest_name),
        {
            "run_id": run_id,
            "config": cfg.output_relevant(),
            "prompt_source": {
                "text": prompt,
                "triplet": pair.triplet.as_record(),
                "full_prompt": pair.full_prompt,
                "intransitive_prompt": pair.intransitive_prompt,
            },
            "modules": cfg.modules,
            "seeds": {"base_seed": cfg.seed, "candidate_seeds": seeds, "chosen_seed": chosen_seed},
            "results": results,
            "artifacts": artifacts,
            "timestamps": {"started": started, "finished": _now()},
        },
    )
    logger.info("Run %s finished (%s), manifest %s", run_id, results["final"], manifest["manifest_hash"][:12])
    return RunOutcome(manifest=manifest, path=rd, score=score)


def _reason(pair, candidates, cfg, components, rd, artifact, results):
    """M_r: pick a pose, locate the human and the object, ask for a better object box."""
    transcript = AgentTranscript()
    suggestion = None
    try:
        with stage("reasoning"):
            pose_agent = PoseSelectionAgent(components.vlm, retries=cfg.agent_retries)
            index = pose_agent.select(candidates, pair, transcript)
            chosen = candidates[index]
            results["selected_index"] = index

            if pair.object_index is None:
                logger.info("No object in %r; skipping the Layout Agent", pair.full_prompt)
                return chosen, None

            points = components.detector.detect(chosen.preview)
            b_h = human_box(points, cfg.human_box_margin)
            column = pair.object_index + components.backbone.token_offset
            object_map = aggregate_token_map(chosen.final_cross_maps, column)
            b_o = extract_object_box(object_map)
            save_mask_png(
                human_mask(points, int(object_map.shape[0])),
                artifact("human_mask", settings.human_mask_name),
            )

            layout_agent = LayoutAgent(
                components.vlm, threshold=cfg.change_threshold, retries=cfg.agent_retries
            )
            suggestion = layout_agent.suggest(chosen, points, b_h, b_o, pair, transcript)
            results.update({
                "human_box": b_h.as_list(),
                "extracted_box": b_o.as_list(),
                "proposed_box": suggestion.proposed_box.as_list(),
                "iou": float(suggestion.iou),
                "needs_correction": bool(suggestion.needs_correction),
                "visual_attributes": [list(a) for a in suggestion.visual_attributes],
            })
    finally:
        transcript.write(artifact("agent_log", settings.agent_log_name))
    return chosen, suggestion


def replay(manifest_path: str, cfg: Optional[PipelineConfig] = None, components: Optional[Components] = None) -> RunOutcome:
    """Re-execute a run from its manifest; non-output settings (out, workers) come from cfg."""
    manifest = read_manifest(manifest_path)
    base = from_dict(manifest["config"])
    if cfg is not None:
        base = base.with_overrides(out=cfg.out, workers=cfg.workers, vlm_cache=cfg.vlm_cache)
    return run_generate(manifest["prompt_source"]["text"], base, components)


# -----------------------------
# Batch
# -----------------------------
def _batch_records(path: str, augment: int, cfg: PipelineConfig) -> Tuple[List[Tuple[int, str]], List[Dict[str, Any]]]:
    records = load_prompt_file(path)
    if augment <= 0:
        return records, []
    out: List[Tuple[int, str]] = []
    failures: List[Dict[str, Any]] = []
    for lineno, text in records:
        try:
            triplet = parse_triplet(text, cfg.gerund_table)
        except HOIGenError as e:
            failures.append({"line": lineno, "prompt": text, "stage": "prompt", "error": f"{type(e).__name__}: {e}"})
            continue
        for t in augment_subjects([triplet], per_triplet=augment, seed=cfg.seed + lineno):
            out.append((lineno, t.as_record()))
    return out, failures


def run_batch(
    prompt_file: str,
    cfg: PipelineConfig,
    augment: int = 0,
    components_factory=build_components,
) -> Dict[str, Any]:
    """One run per distinct prompt record; failures go to the batch's error ledger."""
    records, failures = _batch_records(prompt_file, augment, cfg)
    batch_id = hashlib.sha256(
        canonical_json({"records": records, "config": cfg.output_relevant(), "augment": augment}).encode("utf-8")
    ).hexdigest()[:16]
    batch_dir = os.path.join(cfg.out, "batches", batch_id)
    os.makedirs(batch_dir, exist_ok=True)

    local = threading.local()

    def job(text: str) -> RunOutcome:
        if getattr(local, "components", None) is None:
            local.components = components_factory(cfg)
        return run_generate(text, cfg, local.components)

    outcomes: Dict[str, RunOutcome] = {}
    errors: Dict[str, Dict[str, str]] = {}
    rows: List[Dict[str, Any]] = []
    # identical records share one run id, so each distinct text runs once
    unique = list(dict.fromkeys(text for _, text in records))
    if len(unique) < len(records):
        logger.info("Batch has %d duplicate records; each distinct prompt runs once", len(records) - len(unique))
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        futures = {pool.submit(job, text): text for text in unique}
        for fut in tqdm(as_completed(futures), total=len(futures), desc="batch", unit="run"):
            text = futures[fut]
            try:
                outcomes[text] = fut.result()
            except StageError as e:
                logger.warning("Prompt %r failed: %s", text, e)
                errors[text] = {"stage": e.stage, "error": str(e)}
            except Exception as e:
                logger.warning("Prompt %r failed: %s", text, e)
                errors[text] = {"stage": "unknown", "error": f"{type(e).__name__}: {e}"}

    for lineno, text in records:
        if text in errors:
            failures.append({"line": lineno, "prompt": text, **errors[text]})
            continue
        o = outcomes[text]
        rows.append({
            "line": lineno,
            "prompt": text,
            "run_id": o.manifest["run_id"],
            "manifest_hash": o.manifest["manifest_hash"],
        })
    failures.sort(key=lambda r: (r["line"], r["prompt"]))
    write_table(pd.DataFrame(rows, columns=["line", "prompt", "run_id", "manifest_hash"]), os.path.join(batch_dir, "runs.tsv"))
    ledger = os.path.join(batch_dir, "ledger.tsv")
    write_table(pd.DataFrame(failures, columns=LEDGER_COLUMNS), ledger)

    scores = [o.score for o in outcomes.values() if o.score is not None]
    if scores:
        write_report(scores, os.path.join(batch_dir, "scores_summary.tsv"))
    logger.info("Batch %s: %d runs, %d failures", batch_id, len(rows), len(failures))
    return {
        "batch_id": batch_id,
        "dir": batch_dir,
        "runs": rows,
        "failures": failures,
        "ledger": ledger,
    }


# -----------------------------
# Inspection and scoring
# -----------------------------
def inspect_attention(
    runs_root: str,
    run_id: str,
    step: int,
    layer: Optional[str] = None,
    dumps_root: str = settings.dumps_path,
) -> Dict[str, Any]:
    """Dump every token map of one step (and layer) as .arr arrays and grayscale .png heatmaps."""
    rd = find_run(runs_root, run_id)
    archive = os.path.join(rd, settings.attention_name)
    if not os.path.isfile(archive):
        return {"status": "warning", "message": "run recorded no attention", "files": []}
    maps = load_attention(archive)
    picked = {key: a for key, a in maps.items() if key[0] == step and (layer is None or key[1] == layer)}
    if not picked:
        steps = sorted({s for s, _ in maps})
        return {
            "status": "warning",
            "message": f"no maps for step {step}" + (f" layer {layer}" if layer else "") + f"; recorded steps {steps}",
            "files": [],
        }

    files: List[str] = []
    for (s, lid), a in sorted(picked.items()):
        out_dir = os.path.join(dumps_root, run_id, str(s), lid)
        os.makedirs(out_dir, exist_ok=True)
        r = map_resolution(a.shape[0])
        for n in range(a.shape[1]):
            grid = a[:, n].reshape(r, r)
            arr_path = os.path.join(out_dir, f"{n}.arr")
            with open(arr_path, "wb") as f:
                np.save(f, grid)
            png_path = os.path.join(out_dir, f"{n}.png")
            save_heatmap_png(grid, png_path)
            files += [arr_path, png_path]
    return {"status": "ok", "files": files}


def evaluate(runs_root: str, embedder: Embedder, run_id: Optional[str] = None) -> Dict[str, Any]:
    """Score one run or every run under runs_root; writes scores.tsv per run and a summary."""
    run_ids = [run_id] if run_id else list_runs(runs_root)
    if run_id:
        find_run(runs_root, run_id)
    records: List[ScoreRecord] = []
    for rid in run_ids:
        rd = run_dir(runs_root, rid)
        manifest = read_manifest(os.path.join(rd, settings.manifest_name))
        image_name = manifest["artifacts"].get("final") or manifest["artifacts"].get("candidate_0")
        if not image_name:
            logger.warning("Run %s has no image to score", rid)
            continue
        with stage("evaluate"):
            gerunds = from_dict(manifest["config"]).gerund_table
            pair = render_prompts(parse_triplet(manifest["prompt_source"]["triplet"], gerunds), gerund_overrides=gerunds)
            record = score_run(rid, load_png(os.path.join(rd, image_name)), pair, embedder, gerund_overrides=gerunds)
            write_scores([record], os.path.join(rd, settings.scores_name))
        records.append(record)
    summary_path = os.path.join(runs_root, "scores_summary.tsv")
    with stage("evaluate"):
        write_report(records, summary_path)
    return {"runs": [r.run_id for r in records], "summary": summary_path}
