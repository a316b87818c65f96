"""End-to-end workflows: trace caching, inference, evaluation, ablations."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from . import __version__
from .backend import MllmBackend, image_digest
from .datakit.manifest import Category, SampleRecord, load_manifest, validate_split
from .datakit.qa import DEFAULT_QA_TEMPLATES, simulate_step1
from .datakit.synth import make_synthetic, qa_rng
from .errors import ChainError, CotSegError
from .metrics import EvalBatch, evaluate, write_eval_report
from .orchestrator import DEFAULT_TEMPLATES, ChainMode, CoTTrace, append_trace_log, run_chain
from .segcore.checkpoint import load_checkpoint
from .segcore.model import PromptableSegmenter, pad_prompts, threshold, to_image_tensor
from .training import InMemoryData, TrainConfig, fit, predict_masks

logger = logging.getLogger(__name__)

PROMPT_ARMS = ("reason", "name", "full")

FULL_SCALE_PROMPT_ABLATION = {
    "reason": {"gIoU": 36.7, "cIoU": 31.4},
    "name": {"gIoU": 50.2, "cIoU": 43.8},
    "full": {"gIoU": 54.8, "cIoU": 49.9},
}
FULL_SCALE_LEVEL_ABLATION = {
    "deepest": {"gIoU": 55.4, "cIoU": 52.5},
    "all": {"gIoU": 59.1, "cIoU": 52.8},
}


def content_hash(paths: Sequence) -> str:
    """sha256 over the bytes of every existing file (directories recursed)."""
    h = hashlib.sha256()
    files = []
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        files.extend(sorted(x for x in p.rglob("*") if x.is_file()) if p.is_dir() else [p] if p.is_file() else [])
    for f in files:
        h.update(str(f.name).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def write_run_manifest(out_dir, command: str, config: dict, seed: int, inputs: Sequence = ()) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": {k: (str(v) if isinstance(v, Path) else v) for k, v in config.items()},
        "inputs_sha256": content_hash(inputs),
    }
    path = out / "run_manifest.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")
    return path


# ---------------------------------------------------------------- caching


@dataclass
class CacheReport:
    written: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)
    digest: str = ""

    @property
    def complete(self) -> int:
        return len(self.written) + len(self.skipped)


def _cache_paths(cache_dir: Path, sid: str) -> dict[str, Path]:
    base = cache_dir / "records"
    return {k: base / f"{sid}.{k}" for k in ("trace.json", "reason.npy", "chain.npy")}


def chain_for_record(record: SampleRecord, backend: MllmBackend, mode=ChainMode.MERGED, templates=DEFAULT_TEMPLATES, qa_seed: int = 0) -> CoTTrace:
    image = record.load_image()
    simulated = None
    if record.category is not Category.REASONING:
        simulated = simulate_step1(record, DEFAULT_QA_TEMPLATES, qa_rng(qa_seed, record.sample_id))
    return run_chain(image, record.text, backend, mode, templates=templates, simulated_step1=simulated)


def cache_traces(
    records: Sequence[SampleRecord],
    backend: MllmBackend,
    out_dir,
    *,
    mode=ChainMode.MERGED,
    templates=DEFAULT_TEMPLATES,
    qa_seed: int = 0,
    concurrency: int = 4,
) -> CacheReport:
    """Run the chain once per sample and store trace plus raw embeddings.

    Samples whose trace file already exists are skipped, so reruns only
    fill gaps left by earlier failures.
    """
    cache = Path(out_dir)
    (cache / "records").mkdir(parents=True, exist_ok=True)
    report = CacheReport()
    todo = []
    for rec in records:
        if _cache_paths(cache, rec.sample_id)["trace.json"].is_file():
            report.skipped.append(rec.sample_id)
        else:
            todo.append(rec)

    def work(rec):
        try:
            return rec, chain_for_record(rec, backend, mode, templates, qa_seed), None
        except CotSegError as exc:
            return rec, None, exc

    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        for rec, trace, exc in pool.map(work, todo):
            if exc is not None:
                report.failed[rec.sample_id] = f"{type(exc).__name__}: {exc}"
                continue
            paths = _cache_paths(cache, rec.sample_id)
            width = trace.chain_result.width
            reason = trace.reason_result.embeddings if trace.reason_result is not None else np.zeros((0, width), np.float32)
            np.save(paths["reason.npy"], np.asarray(reason, dtype=np.float32))
            np.save(paths["chain.npy"], np.asarray(trace.chain_result.embeddings, dtype=np.float32))
            payload = {"sample_id": rec.sample_id, "image_sha256": image_digest(rec.load_image()), "trace": trace.to_json()}
            paths["trace.json"].write_text(json.dumps(payload, sort_keys=True) + "\n")
            report.written.append(rec.sample_id)
    (cache / "failures.json").write_text(json.dumps(report.failed, indent=2, sort_keys=True) + "\n")
    report.digest = cache_digest(cache)
    return report


def cache_digest(cache_dir) -> str:
    return content_hash([Path(cache_dir) / "records"])


def load_cached_prompt(cache_dir, sample_id: str, arm: str = "full") -> tuple[np.ndarray, CoTTrace]:
    paths = _cache_paths(Path(cache_dir), sample_id)
    if not paths["trace.json"].is_file():
        raise CotSegError(f"no cached trace for {sample_id}")
    trace = CoTTrace.from_json(json.loads(paths["trace.json"].read_text())["trace"])
    chain = np.load(paths["chain.npy"])
    if arm == "reason":
        reason = np.load(paths["reason.npy"])
        if reason.shape[0]:
            return reason, trace
        arm = "name"
    spans = [trace.target_token_span] + (list(trace.attribute_token_spans) if arm == "full" else [])
    rows = np.concatenate([chain[s:e] for s, e in spans], axis=0)
    return rows, trace


def load_cached_data(records: Sequence[SampleRecord], cache_dir, arm: str = "full") -> InMemoryData:
    if arm not in PROMPT_ARMS:
        raise ValueError(f"arm must be one of {PROMPT_ARMS}")
    images, prompts, masks = [], [], []
    for rec in records:
        images.append(rec.load_image())
        prompts.append(load_cached_prompt(cache_dir, rec.sample_id, arm)[0])
        masks.append(rec.load_mask())
    return InMemoryData(images, prompts, masks, [r.sample_id for r in records])


# ---------------------------------------------------------------- inference


def overlay(image: np.ndarray, mask: np.ndarray, color=(255, 40, 40), alpha: float = 0.5) -> np.ndarray:
    out = image.astype(np.float64).copy()
    m = mask.astype(bool)
    out[m] = (1 - alpha) * out[m] + alpha * np.asarray(color, dtype=np.float64)
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def segment_image(model: PromptableSegmenter, image: np.ndarray, raw_prompt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(logits, binary mask)`` for one image."""
    model.eval()
    with torch.no_grad():
        prompts, mask = pad_prompts([raw_prompt])
        logits = model(to_image_tensor([image]), prompts, mask)
    return logits[0].numpy(), threshold(logits)[0]


def infer(image_path, query: str, model: PromptableSegmenter, backend: MllmBackend, out_dir, *, mode=ChainMode.MERGED, templates=DEFAULT_TEMPLATES, arm: str = "full") -> dict:
    """Chain -> embeddings -> mask. Writes ``mask.png``, ``trace.jsonl`` and
    ``overlay.png``; on a chain failure the partial trace is still logged."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with Image.open(image_path) as im:
        image = np.asarray(im.convert("RGB"))
    trace_path = out / "trace.jsonl"
    trace_path.write_text("")
    try:
        trace = run_chain(image, query, backend, mode, templates=templates)
    except ChainError as exc:
        if exc.trace is not None:
            append_trace_log(trace_path, exc.trace)
        raise
    append_trace_log(trace_path, trace)
    _, mask = segment_image(model, image, trace.prompt_embeddings(arm))
    Image.fromarray(mask * 255).save(out / "mask.png")
    Image.fromarray(overlay(image, mask)).save(out / "overlay.png")
    return {"trace": trace, "mask": mask, "paths": {k: out / k for k in ("mask.png", "trace.jsonl", "overlay.png")}}


# ---------------------------------------------------------------- evaluation


def evaluate_model(model: PromptableSegmenter, records: Sequence[SampleRecord], cache_dir, arm: str = "full", with_text: bool = True):
    data = load_cached_data(records, cache_dir, arm)
    preds = predict_masks(model, data)
    texts = []
    if with_text and all(r.references for r in records):
        for rec in records:
            _, trace = load_cached_prompt(cache_dir, rec.sample_id, arm)
            texts.append((trace.reason_answer, list(rec.references)))
    batch = EvalBatch([(p, g) for p, g in zip(preds, data.masks.numpy().astype(np.uint8))], texts)
    return evaluate(batch, data.ids)


def evaluate_to_file(model, records, cache_dir, path, arm: str = "full") -> dict:
    rows, aggregate = evaluate_model(model, records, cache_dir, arm)
    write_eval_report(path, rows, aggregate)
    return aggregate


# ---------------------------------------------------------------- ablation


@dataclass
class AblationConfig:
    n_train: int = 500
    n_eval: int = 100
    seed: int = 0
    image_size: int = 64
    d_vis: int = 64
    d_hidden: int = 128
    train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=1e-3, batch_size=16, total_iterations=3000))


def prepare_benchmark(work_dir, cfg: AblationConfig):
    work = Path(work_dir)
    train = make_synthetic(work / "train", cfg.n_train, image_size=cfg.image_size, seed=cfg.seed, id_prefix="tr")
    evals = make_synthetic(work / "eval", cfg.n_eval, image_size=cfg.image_size, seed=cfg.seed + 10_000, id_prefix="ev")
    split = validate_split(train, evals)
    if not split["ok"]:
        raise CotSegError(f"train/eval overlap: {split['overlap'][:5]}")
    from .backend import ScriptedBackend

    for name, recs in (("train", train), ("eval", evals)):
        backend = ScriptedBackend.from_file(work / name / "script.json")
        report = cache_traces(recs, backend, work / name / "cache", concurrency=1)
        if report.failed:
            raise CotSegError(f"{name}: caching failed for {sorted(report.failed)[:5]}")
    return train, evals


def train_arm(cfg: AblationConfig, train, cache_dir, arm: str, scales: str, out_dir=None) -> PromptableSegmenter:
    model = PromptableSegmenter(d_vis=cfg.d_vis, d_hidden=cfg.d_hidden, scales=scales, seed=cfg.seed)
    data = load_cached_data(train, cache_dir, arm)
    fit(cfg.train, data, model, out_dir=out_dir)
    return model


def ablate(suite: str, work_dir, cfg: AblationConfig = AblationConfig()) -> dict:
    """Train and score every arm of ``suite`` ("prompt-steps" or "scales")."""
    work = Path(work_dir)
    if not (work / "eval" / "cache" / "records").is_dir():
        train, evals = prepare_benchmark(work, cfg)
    else:
        train = load_manifest(work / "train" / "manifest.jsonl")
        evals = load_manifest(work / "eval" / "manifest.jsonl")
    if suite == "prompt-steps":
        arms = [(a, a, "all") for a in PROMPT_ARMS]
        reference = FULL_SCALE_PROMPT_ABLATION
    elif suite == "scales":
        arms = [(s, "full", s) for s in ("deepest", "all")]
        reference = FULL_SCALE_LEVEL_ABLATION
    else:
        raise ValueError(f"unknown ablation suite {suite!r}")
    results = {}
    for name, arm, scales in arms:
        t0 = time.perf_counter()
        model = train_arm(cfg, train, work / "train" / "cache", arm, scales)
        _, agg = evaluate_model(model, evals, work / "eval" / "cache", arm, with_text=False)
        results[name] = {"gIoU": agg["gIoU"], "cIoU": agg["cIoU"], "prompt_arm": arm, "scales": scales, "seconds": time.perf_counter() - t0}
        logger.info("%s/%s: gIoU %.4f cIoU %.4f", suite, name, agg["gIoU"], agg["cIoU"])
    return {
        "suite": suite,
        "seed": cfg.seed,
        "n_train": cfg.n_train,
        "n_eval": cfg.n_eval,
        "train_config": asdict(cfg.train),
        "arms": results,
        "full_scale_reference": reference,
    }
