"""Experiment configuration: strict JSON schema, unknown keys rejected.

Top level::

    {
      "seed": 0,
      "model": {ModelConfig fields},
      "datasets": {"<name>": {"kind": ..., ...}},
      "stages": [{"name": ..., "kind": "sft" | "opd" | "grpo" | "agentic", ...}]
    }

Dataset kinds and the views stages may reference as ``"<name>.<view>"``:

* ``facts`` (n_docs, n_values, train_fraction, seed): views ``train``, ``test``, ``docs``
* ``copy`` (n, seed, lo, hi): views ``all``
* ``retrieval`` (n, n_docs, seed): views ``all``
* ``instructions`` (path): views ``all``  (InstructionExample JSONL)
* ``tasks`` (path): views ``all``  (``{"prompt", "reference"}`` JSONL)
* ``documents`` (path): views ``docs``  (``{"doc_id", "text"}`` JSONL)

A stage starts from ``init``: ``null`` (fresh weights from ``model``, or the
stage's own ``model`` override), the name of an earlier stage, or a
checkpoint path.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .distill import DistillConfig
from .grpo import ClipConfig, InKConfig, RLConfig
from .model import ModelConfig, SamplingParams
from .sft import SFTConfig


class ConfigError(ValueError):
    """Raised for any invalid configuration; nothing has been written yet."""


STAGE_KINDS = ("sft", "opd", "grpo", "agentic")
DATASET_FIELDS = {
    "facts": {"n_docs", "n_values", "train_fraction", "seed"},
    "copy": {"n", "seed", "lo", "hi"},
    "retrieval": {"n", "n_docs", "seed"},
    "instructions": {"path"},
    "tasks": {"path"},
    "documents": {"path"},
}
DATASET_VIEWS = {
    "facts": {"train", "test", "docs"},
    "copy": {"all"},
    "retrieval": {"all"},
    "instructions": {"all"},
    "tasks": {"all"},
    "documents": {"docs"},
}


def _strict(cls, raw: Any, where: str, **overrides):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**{**raw, **overrides})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _check_keys(raw: dict, allowed: set, where: str, required: set = frozenset()) -> None:
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    missing = set(required) - set(raw)
    if missing:
        raise ConfigError(f"{where}: missing keys {sorted(missing)}")


@dataclass(frozen=True)
class DatasetConfig:
    name: str
    kind: str
    params: dict


@dataclass
class StageConfig:
    name: str
    kind: str
    data: str
    init: str | None = None
    model: ModelConfig | None = None
    teacher: str | None = None
    eval: list[str] = field(default_factory=list)
    sft: SFTConfig | None = None
    steps: int | None = None
    distill: DistillConfig | None = None
    rl: RLConfig | None = None
    ce_data: str | None = None
    ce_max_len: int = 64
    ce_bos: bool = True
    sampling: SamplingParams = SamplingParams(temperature=0.7, max_new_tokens=16)
    reward_mode: str = "accuracy"
    max_len: int | None = None
    tools_enabled: bool = True
    eval_max_new_tokens: int = 16


STAGE_KEYS = {"name", "kind", "data", "init", "model", "teacher", "eval", "config", "steps",
              "ce_data", "ce_max_len", "ce_bos", "sampling", "reward_mode", "max_len", "tools_enabled",
              "eval_max_new_tokens"}


@dataclass
class ExperimentConfig:
    seed: int
    model: ModelConfig
    datasets: dict[str, DatasetConfig]
    stages: list[StageConfig]
    base_dir: Path = Path(".")
    raw: dict = field(default_factory=dict)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p


def _rl_config(raw: dict, where: str, seed: int) -> RLConfig:
    raw = dict(raw)
    clip = raw.pop("clip", None)
    ink = raw.pop("ink", None)
    extra = {}
    if clip is not None:
        extra["clip"] = _strict(ClipConfig, clip, where + ".clip")
    if ink is not None:
        extra["ink"] = _strict(InKConfig, ink, where + ".ink")
    raw.setdefault("seed", seed)
    return _strict(RLConfig, raw, where, **extra)


def _check_ref(cfg_datasets: dict, ref: str, where: str) -> None:
    name, _, view = ref.partition(".")
    if name not in cfg_datasets:
        raise ConfigError(f"{where}: unknown dataset {name!r}")
    kind = cfg_datasets[name].kind
    if view not in DATASET_VIEWS[kind]:
        raise ConfigError(f"{where}: dataset {name!r} of kind {kind!r} has no view {view!r} "
                          f"(choose from {sorted(DATASET_VIEWS[kind])})")


def parse_config(raw: dict, base_dir: Path = Path("."), seed_override: int | None = None) -> ExperimentConfig:
    _check_keys(raw, {"seed", "model", "datasets", "stages"}, "config", {"model", "stages"})
    seed = int(raw.get("seed", 0)) if seed_override is None else int(seed_override)
    model = _strict(ModelConfig, raw["model"], "model", seed=raw["model"].get("seed", seed)
                    if seed_override is None else seed)
    datasets = {}
    for name, spec in (raw.get("datasets") or {}).items():
        where = f"datasets.{name}"
        if not isinstance(spec, dict) or spec.get("kind") not in DATASET_FIELDS:
            raise ConfigError(f"{where}: kind must be one of {sorted(DATASET_FIELDS)}")
        params = {k: v for k, v in spec.items() if k != "kind"}
        _check_keys(params, DATASET_FIELDS[spec["kind"]], where)
        if "path" in DATASET_FIELDS[spec["kind"]]:
            if "path" not in params:
                raise ConfigError(f"{where}: missing path")
            p = Path(params["path"])
            p = p if p.is_absolute() else base_dir / p
            if not p.exists():
                raise ConfigError(f"{where}: file not found: {p}")
        datasets[name] = DatasetConfig(name, spec["kind"], params)
    if not isinstance(raw["stages"], list):
        raise ConfigError("stages: expected a list")
    stages: list[StageConfig] = []
    seen: dict[str, StageConfig] = {}
    for i, st in enumerate(raw["stages"]):
        where = f"stages[{i}]"
        _check_keys(st, STAGE_KEYS, where, {"name", "kind", "data"})
        name, kind = st["name"], st["kind"]
        if kind not in STAGE_KINDS:
            raise ConfigError(f"{where}: kind must be one of {STAGE_KINDS}")
        if name in seen:
            raise ConfigError(f"{where}: duplicate stage name {name!r}")
        _check_ref(datasets, st["data"], where + ".data")
        for ref in st.get("eval", []):
            _check_ref(datasets, ref, where + ".eval")
        for key in ("init", "teacher"):
            ref = st.get(key)
            if ref is None or ref in seen:
                continue
            p = Path(ref)
            p = p if p.is_absolute() else base_dir / p
            if not p.exists():
                raise ConfigError(f"{where}.{key}: {ref!r} is neither an earlier stage nor "
                                  "an existing checkpoint")
        kw: dict[str, Any] = {"name": name, "kind": kind, "data": st["data"],
                              "init": st.get("init"), "teacher": st.get("teacher"),
                              "eval": list(st.get("eval", []))}
        if "model" in st:
            kw["model"] = _strict(ModelConfig, st["model"], where + ".model",
                                  seed=st["model"].get("seed", seed))
        for key in ("steps", "ce_data", "ce_max_len", "ce_bos", "reward_mode", "max_len",
                    "tools_enabled", "eval_max_new_tokens"):
            if key in st:
                kw[key] = st[key]
        if "sampling" in st:
            kw["sampling"] = _strict(SamplingParams, st["sampling"], where + ".sampling")
        conf = dict(st.get("config", {}))
        conf.setdefault("seed", seed)
        if kind == "sft":
            kw["sft"] = _strict(SFTConfig, conf, where + ".config")
        elif kind == "opd":
            if st.get("teacher") is None:
                raise ConfigError(f"{where}: opd stage needs a teacher")
            kw["distill"] = _strict(DistillConfig, conf, where + ".config")
        else:
            kw["rl"] = _rl_config(conf, where + ".config", seed)
            if kw["rl"].ink is not None and kw["rl"].ink.rho > 0 and not st.get("ce_data"):
                raise ConfigError(f"{where}: InK with rho > 0 needs ce_data")
        if kw.get("ce_data"):
            _check_ref(datasets, kw["ce_data"], where + ".ce_data")
        if kw.get("reward_mode", "accuracy") not in ("accuracy", "weighted"):
            raise ConfigError(f"{where}: reward_mode must be accuracy or weighted")
        if kind == "sft" and kw.get("steps") is not None and kw["steps"] < 0:
            raise ConfigError(f"{where}: steps must be >= 0")
        stage = StageConfig(**kw)
        stages.append(stage)
        seen[name] = stage
    return ExperimentConfig(seed, model, datasets, stages, base_dir, raw)


def load_config(path, seed_override: int | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return parse_config(raw, path.parent, seed_override)
