"""Executes an :class:`ExperimentConfig` stage by stage into a run directory."""

from __future__ import annotations

import hashlib
import json
import logging
import platform
import traceback
from dataclasses import asdict
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, StageConfig
from .data import InstructionExample, load_jsonl
from .distill import OnPolicyDistiller, ResidencyManager, mean_teacher_kl
from .env import (AgenticSource, DocumentStore, evaluate_agent, export_traces,
                  make_retrieval_items, oracle_demonstrations)
from .grpo import GRPOTrainer, encode_documents
from .metrics import MetricsWriter
from .model import TinyLM
from .rewards import RewardFunction
from .sft import train_masked, train_sft
from .tasks import (SingleTurnSource, copy_task_examples, evaluate_items,
                    items_from_examples, load_items_jsonl, make_fact_world)

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
FAILED = "FAILED"


class Datasets:
    """Lazily materialises the named datasets of a config."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self._cache: dict[str, Any] = {}

    def _load(self, name: str):
        if name in self._cache:
            return self._cache[name]
        spec = self.cfg.datasets[name]
        p = spec.params
        if spec.kind == "facts":
            obj = make_fact_world(p.get("n_docs", 64), p.get("n_values", 4),
                                  p.get("train_fraction", 0.5), seed=p.get("seed", 0))
        elif spec.kind == "copy":
            obj = copy_task_examples(p.get("n", 256), p.get("seed", 0), p.get("lo", 2), p.get("hi", 5))
        elif spec.kind == "retrieval":
            obj = make_retrieval_items(p.get("n", 256), p.get("n_docs", 16), seed=p.get("seed", 0))
        elif spec.kind == "instructions":
            obj = load_jsonl(self.cfg.resolve(p["path"]))
        elif spec.kind == "tasks":
            obj = load_items_jsonl(self.cfg.resolve(p["path"]))
        else:
            obj = DocumentStore.from_jsonl(self.cfg.resolve(p["path"]))
        self._cache[name] = obj
        return obj

    def kind(self, ref: str) -> str:
        return self.cfg.datasets[ref.partition(".")[0]].kind

    def instructions(self, ref: str) -> list[InstructionExample]:
        name, _, view = ref.partition(".")
        obj, kind = self._load(name), self.kind(ref)
        if kind == "facts":
            keys = obj.train_keys if view == "train" else obj.test_keys
            return [InstructionExample(obj.question(k), obj.values[k]) for k in keys]
        if kind in ("copy", "instructions"):
            return list(obj)
        raise ConfigError(f"{ref} cannot be used as instruction data")

    def tasks(self, ref: str) -> list:
        name, _, view = ref.partition(".")
        obj, kind = self._load(name), self.kind(ref)
        if kind == "facts":
            return obj.items(obj.train_keys if view == "train" else obj.test_keys)
        if kind in ("copy", "instructions"):
            return items_from_examples(obj)
        if kind in ("tasks", "retrieval"):
            return list(obj)
        raise ConfigError(f"{ref} cannot be used as a task set")

    def documents(self, ref: str) -> list[str]:
        name = ref.partition(".")[0]
        obj, kind = self._load(name), self.kind(ref)
        if kind == "facts":
            return [t for _, t in obj.docs]
        if kind == "documents":
            return [t for _, t in obj.documents]
        raise ConfigError(f"{ref} has no documents")


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    return {"deskpost": __version__, "numpy": np.__version__, "python": platform.python_version()}


def write_manifest(run_dir: Path, cfg: ExperimentConfig, status: str, stages_done: list[str]) -> dict:
    files = {}
    for p in sorted(run_dir.rglob("*")):
        if p.is_file() and p.name != MANIFEST:
            files[p.relative_to(run_dir).as_posix()] = sha256_file(p)
    manifest = {"config_hash": cfg.hash(), "seed": cfg.seed, "versions": _versions(),
                "status": status, "stages": stages_done, "files": files}
    (run_dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def stage_dir(run_dir: Path, name: str) -> Path:
    return run_dir / "stages" / name


def _init_model(cfg: ExperimentConfig, stage: StageConfig, run_dir: Path) -> TinyLM:
    if stage.init is None:
        return TinyLM(stage.model or cfg.model)
    ckpt = stage_dir(run_dir, stage.init) / "model.ckpt"
    if not ckpt.exists():
        ckpt = cfg.resolve(stage.init)
    return TinyLM.load(ckpt)


def _load_ref_model(cfg: ExperimentConfig, ref: str, run_dir: Path) -> TinyLM:
    ckpt = stage_dir(run_dir, ref) / "model.ckpt"
    return TinyLM.load(ckpt if ckpt.exists() else cfg.resolve(ref))


def evaluate_stage(model: TinyLM, stage: StageConfig, data: Datasets, out_dir: Path) -> dict:
    results = {}
    for ref in stage.eval:
        items = data.tasks(ref)
        if data.kind(ref) == "retrieval":
            acc, trajs, scores = evaluate_agent(model, items, stage.tools_enabled,
                                                stage.eval_max_new_tokens)
            export_traces(out_dir / f"traces_{ref}.json", trajs)
            report = {"accuracy": acc, "correct": int(round(acc * len(items))), "total": len(items),
                      "records": [{"item_id": str(i), "prompt": it.question,
                                   "reference": it.reference, "response": t.final_answer or "", "score": sc}
                                  for i, (it, t, sc) in enumerate(zip(items, trajs, scores))]}
        else:
            report = evaluate_items(model, items, stage.eval_max_new_tokens).to_json()
        (out_dir / f"eval_{ref}.json").write_text(json.dumps(report, indent=1, sort_keys=True))
        results[ref] = report["accuracy"]
    return results


def run_stage(cfg: ExperimentConfig, stage: StageConfig, data: Datasets, run_dir: Path) -> dict:
    out = stage_dir(run_dir, stage.name)
    out.mkdir(parents=True, exist_ok=True)
    model = _init_model(cfg, stage, run_dir)
    summary: dict[str, Any] = {"stage": stage.name, "kind": stage.kind}
    if stage.kind == "sft":
        if data.kind(stage.data) == "retrieval":
            demos = oracle_demonstrations(data.tasks(stage.data))
            hist = train_masked(model, demos, stage.sft, stage.steps or 0, out)
        else:
            hist = train_sft(model, data.instructions(stage.data), stage.sft, out)
        losses = [h["loss"] for h in hist if "loss" in h]
        summary["final_loss"] = losses[-1] if losses else None
    elif stage.kind == "opd":
        teacher = _load_ref_model(cfg, stage.teacher, run_dir)
        examples = data.instructions(stage.data)
        ledger_path = out / "residency.jsonl"
        distiller = OnPolicyDistiller(model, teacher, stage.distill, examples,
                                      residency=ResidencyManager())
        hist = distiller.train(out)
        writer = MetricsWriter(out, ledger_path.name)
        for ev in distiller.residency.ledger:
            writer.write(asdict(ev))
        writer.close()
        summary["final_loss"] = hist[-1]["loss"] if hist else None
        summary["teacher_kl"] = mean_teacher_kl(model, teacher, examples)
    else:
        reward = RewardFunction(mode=stage.reward_mode, max_len=stage.max_len)
        items = data.tasks(stage.data)
        if stage.kind == "agentic":
            source = AgenticSource(stage.sampling, stage.tools_enabled, reward)
        else:
            source = SingleTurnSource(reward, stage.sampling)
        ce = None
        if stage.ce_data:
            ce = encode_documents(data.documents(stage.ce_data), stage.ce_max_len,
                                  bos=stage.ce_bos)
        trainer = GRPOTrainer(model, source, items, stage.rl, ce_corpus=ce)
        hist = trainer.train(out)
        summary["final_mean_reward"] = hist[-1]["mean_reward"] if hist else None
        if stage.kind == "agentic":
            summary["unmasked_tool_tokens"] = trainer.audit_unmasked_tool_tokens
            export_traces(out / "train_traces_tail.json", source.trajectories[-8:])
    summary["eval"] = evaluate_stage(model, stage, data, out)
    model.save(out / "model.ckpt", {"stage": stage.name})
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


def run_experiment(cfg: ExperimentConfig, run_dir) -> dict:
    """Run every stage; on failure leave partial outputs plus a ``FAILED`` marker."""
    run_dir = Path(run_dir)
    if run_dir.exists() and any(run_dir.iterdir()):
        raise ConfigError(f"run directory {run_dir} is not empty")
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.raw, indent=2, sort_keys=True))
    data = Datasets(cfg)
    done: list[str] = []
    summaries = []
    try:
        for stage in cfg.stages:
            log.info("stage %s (%s)", stage.name, stage.kind)
            summaries.append(run_stage(cfg, stage, data, run_dir))
            done.append(stage.name)
    except Exception:
        (run_dir / FAILED).write_text(traceback.format_exc())
        write_manifest(run_dir, cfg, "failed", done)
        raise
    metrics = MetricsWriter(run_dir, "stages.jsonl")
    for s in summaries:
        metrics.write(s)
    metrics.close()
    return write_manifest(run_dir, cfg, "complete", done)
