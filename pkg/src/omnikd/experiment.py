"""Experiment orchestration: one JSON config drives data generation, the
five-stage training ladder, evaluation, attention probing, KD-ratio sweeps,
and report assembly inside a fixed run-directory layout:

    run_dir/
      config.json                 frozen config snapshot
      manifest.json               dataset manifest (vocab, signatures, ...)
      data/<name>.jsonl           generated datasets
      checkpoints/<stage>.ckpt    stage boundary checkpoints
      logs/<stage>.csv            per-step training logs
      eval/*.json, eval/*.csv     metric reports and attention profiles
      run_report.json             assembled summary

All defaults live in the config file, never in code paths; use
`default_config()` to materialize them.
"""

from __future__ import annotations

import copy
import json
import os
import time

import numpy as np

from . import data as D
from .data import DatasetManifest, TriModalSample
from .model import ModelConfig, OmniModel, load_checkpoint, save_checkpoint
from .training import (STAGES, StageConfig, TrainingAborted, run_stage,
                       stage_query_modality)
from . import evaluation as E


class ConfigError(ValueError):
    """Invalid experiment config (CLI exit code 2)."""


class MissingPrerequisiteError(RuntimeError):
    """A required earlier-stage checkpoint is absent (CLI exit code 3)."""


class IncompatibilityError(RuntimeError):
    """Checkpoint and dataset disagree, e.g. vocabulary size (exit code 4)."""


class ArtifactError(RuntimeError):
    """Missing or corrupt run artifact (CLI exit code 5)."""


DATASET_NAMES = ("text_pretrain", "caption_align", "vqa_text", "asr",
                 "vqa_audio", "mmalign", "vqa_eval")

_STAGE_DATASET = {
    "text_pretrain": "text_pretrain",
    "vision_text_align": "caption_align",
    "vision_text_sft": "vqa_text",
    "audio_text_align": "asr",
    "vision_audio_sft": "vqa_audio",
}

VQA_TASKS = ("yesno", "color", "shape", "count")


def default_config(seed: int = 0, output_dir: str = "runs/default") -> dict:
    """The desk-scale default experiment; every knob is explicit."""
    return {
        "seed": seed,
        "output_dir": output_dir,
        "data": {
            "grid_size": 4,
            "k_frames": 3,
            # Audio noise high enough that the audio pathway stays harder
            # than text, low enough that the task remains solvable.
            "sigma": 0.5,
            "audio_dim": 16,
            "yes_target": 0.5,
            "mmalign_train_fraction": 0.1,
            "counts": {
                "text_pretrain": 4000,
                "caption_align": 2000,
                "vqa_text": 8000,
                # Plain transcription samples mixed into vqa_text so the
                # long SFT stage does not erode raw text competence.
                "text_rehearsal": 800,
                "asr": 4000,
                # Vision-audio supervision is deliberately scarce relative
                # to vision-text: that scarcity is the regime distillation
                # from the vision-text path is meant to address.
                "vqa_audio": 1000,
                "mmalign": 600,
                "vqa_eval": 800,
            },
        },
        "model": {
            "d_model": 64,
            "n_layers": 4,
            "n_heads": 4,
            "max_seq_len": 64,
            "enc_hidden": 64,
            "mlp_ratio": 4,
            "init_scale": 0.02,
            "dtype": "float32",
        },
        "stages": [
            {"stage": "text_pretrain", "epochs": 8, "batch_size": 32,
             "base_lr": 1e-3},
            {"stage": "vision_text_align", "epochs": 3, "batch_size": 32,
             "base_lr": 1e-3},
            {"stage": "vision_text_sft", "epochs": 12, "batch_size": 16,
             "base_lr": 1e-3},
            {"stage": "audio_text_align", "epochs": 4, "batch_size": 32,
             "base_lr": 1e-3},
            {"stage": "vision_audio_sft", "epochs": 4, "batch_size": 16,
             "base_lr": 5e-4, "alpha": 0.75, "kd_mode": "token_kl",
             "temperature": 1.0},
        ],
        "eval": {
            "max_new": 8,
            "attention_samples": 64,
        },
    }


def validate_config(cfg: dict) -> dict:
    """Check structure, field domains, and stage ordering; returns cfg."""
    for key in ("seed", "output_dir", "data", "model", "stages", "eval"):
        if key not in cfg:
            raise ConfigError(f"config missing field '{key}'")
    d = cfg["data"]
    for key in ("grid_size", "k_frames", "sigma", "audio_dim", "yes_target",
                "mmalign_train_fraction", "counts"):
        if key not in d:
            raise ConfigError(f"config missing field 'data.{key}'")
    if d["sigma"] < 0:
        raise ConfigError("data.sigma must be >= 0")
    for name in DATASET_NAMES + ("text_rehearsal",):
        if name not in d["counts"]:
            raise ConfigError(f"config missing field 'data.counts.{name}'")
        if int(d["counts"][name]) <= 0:
            raise ConfigError(f"data.counts.{name} must be positive")
    if d["counts"]["mmalign"] % 2 != 0:
        raise ConfigError("data.counts.mmalign must be even")
    stage_names = [s.get("stage") for s in cfg["stages"]]
    expected = [s for s in STAGES if s in stage_names]
    if stage_names != expected or len(set(stage_names)) != len(stage_names):
        raise ConfigError(
            f"stages must follow the ladder order {list(STAGES)}, got {stage_names}")
    for s in cfg["stages"]:
        try:
            StageConfig(**{**s, "seed": int(cfg["seed"])})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"stage '{s.get('stage')}': {exc}") from exc
    try:
        ModelConfig(vocab_size=2, **cfg["model"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from exc
    return cfg


def load_config(path: str) -> dict:
    try:
        with open(path) as f:
            cfg = json.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return validate_config(cfg)


class Experiment:
    """Binds a validated config to a run directory."""

    def __init__(self, cfg: dict, run_dir: str | None = None):
        self.cfg = validate_config(copy.deepcopy(cfg))
        root_override = os.environ.get("OMNIKD_OUTPUT_ROOT")
        run_dir = run_dir or self.cfg["output_dir"]
        if root_override:
            run_dir = os.path.join(root_override, run_dir)
        self.run_dir = run_dir

    # -- paths ---------------------------------------------------------------

    def path(self, *parts) -> str:
        return os.path.join(self.run_dir, *parts)

    @property
    def manifest_path(self) -> str:
        return self.path("manifest.json")

    def dataset_path(self, name: str) -> str:
        return self.path("data", f"{name}.jsonl")

    def checkpoint_path(self, stage: str, tag: str = "") -> str:
        suffix = f"_{tag}" if tag else ""
        return self.path("checkpoints", f"{stage}{suffix}.ckpt")

    def log_path(self, stage: str, tag: str = "") -> str:
        suffix = f"_{tag}" if tag else ""
        return self.path("logs", f"{stage}{suffix}.csv")

    def _ensure_dirs(self) -> None:
        for sub in ("data", "checkpoints", "logs", "eval"):
            os.makedirs(self.path(sub), exist_ok=True)

    def manifest(self) -> DatasetManifest:
        if not os.path.exists(self.manifest_path):
            raise MissingPrerequisiteError(
                f"manifest not found at {self.manifest_path}; run gen-data first")
        return DatasetManifest.load(self.manifest_path)

    # -- data ------------------------------------------------------------------

    def gen_data(self) -> DatasetManifest:
        """Generate every dataset for the configured stages plus the
        alignment probes and the held-out eval split."""
        self._ensure_dirs()
        d = self.cfg["data"]
        seed = int(self.cfg["seed"])
        manifest = D.build_manifest(seed, k_frames=d["k_frames"],
                                    sigma=d["sigma"], audio_dim=d["audio_dim"],
                                    grid_size=d["grid_size"])
        counts = d["counts"]
        mm_frac = d["mmalign_train_fraction"]
        datasets = {
            "text_pretrain": D.gen_asr_dataset(manifest, counts["text_pretrain"],
                                               seed=11),
            "caption_align": D.gen_vqa_dataset(manifest, counts["caption_align"],
                                               seed=12, tasks=("caption",)),
            "vqa_text": D.gen_vqa_dataset(manifest, counts["vqa_text"], seed=13,
                                          tasks=VQA_TASKS,
                                          yes_target=d["yes_target"],
                                          mmalign_fraction=mm_frac)
                        + D.gen_asr_dataset(manifest, counts["text_rehearsal"],
                                            seed=21),
            "asr": D.gen_asr_dataset(manifest, counts["asr"], seed=14),
            "vqa_audio": D.gen_vqa_dataset(manifest, counts["vqa_audio"], seed=15,
                                           tasks=VQA_TASKS,
                                           yes_target=d["yes_target"],
                                           mmalign_fraction=mm_frac),
            "mmalign": D.gen_mmalign(manifest, counts["mmalign"], seed=16),
            "vqa_eval": D.gen_vqa_dataset(manifest, counts["vqa_eval"], seed=17,
                                          tasks=VQA_TASKS,
                                          yes_target=d["yes_target"]),
        }
        for name, samples in datasets.items():
            manifest.counts[name] = len(samples)
            D.write_jsonl(samples, self.dataset_path(name))
        manifest.save(self.manifest_path)
        with open(self.path("config.json"), "w") as f:
            json.dump(self.cfg, f, sort_keys=True, indent=2)
        return manifest

    def load_dataset(self, name: str) -> list[TriModalSample]:
        path = self.dataset_path(name)
        if not os.path.exists(path):
            raise MissingPrerequisiteError(f"dataset '{name}' not found at {path}")
        return D.read_jsonl(path)

    # -- training ----------------------------------------------------------------

    def _stage_cfg(self, stage: str, alpha: float | None = None) -> StageConfig:
        for s in self.cfg["stages"]:
            if s["stage"] == stage:
                kwargs = dict(s)
                if alpha is not None:
                    kwargs["alpha"] = alpha
                return StageConfig(**{**kwargs, "seed": int(self.cfg["seed"])})
        raise ConfigError(f"stage '{stage}' not present in config")

    def _model_config(self, manifest: DatasetManifest) -> ModelConfig:
        return ModelConfig(vocab_size=len(manifest.vocab), **self.cfg["model"])

    def _prerequisite(self, stage: str) -> str | None:
        idx = STAGES.index(stage)
        return STAGES[idx - 1] if idx > 0 else None

    def load_stage_model(self, stage_or_ckpt: str,
                         manifest: DatasetManifest) -> OmniModel:
        path = (stage_or_ckpt if os.path.exists(stage_or_ckpt)
                else self.checkpoint_path(stage_or_ckpt))
        if not os.path.exists(path):
            raise MissingPrerequisiteError(f"checkpoint not found: {path}")
        model, _ = load_checkpoint(path)
        if model.config.vocab_size != len(manifest.vocab):
            raise IncompatibilityError(
                f"checkpoint vocabulary size {model.config.vocab_size} != "
                f"dataset vocabulary size {len(manifest.vocab)}")
        return model

    def train_stage(self, stage: str, alpha: float | None = None,
                    tag: str = "", init_from: str | None = None) -> str:
        """Run one stage, consuming the previous stage's checkpoint.

        `tag` distinguishes checkpoint/log filenames of variant runs (e.g.
        the KD-ratio sweep); `init_from` overrides the prerequisite path.
        """
        self._ensure_dirs()
        manifest = self.manifest()
        cfg = self._stage_cfg(stage, alpha)
        prereq = self._prerequisite(stage)
        if init_from is not None:
            model = self.load_stage_model(init_from, manifest)
        elif prereq is None:
            model = OmniModel(self._model_config(manifest),
                              seed=int(self.cfg["seed"]))
        else:
            prereq_path = self.checkpoint_path(prereq)
            if not os.path.exists(prereq_path):
                raise MissingPrerequisiteError(
                    f"stage '{stage}' requires checkpoint of stage '{prereq}' "
                    f"at {prereq_path}")
            model = self.load_stage_model(prereq_path, manifest)
        dataset = self.load_dataset(_STAGE_DATASET[stage])
        t0 = time.monotonic()
        run_stage(model, cfg, dataset, manifest,
                  log_path=self.log_path(stage, tag),
                  checkpoint_dir=self.path("checkpoints"))
        elapsed = time.monotonic() - t0
        ckpt = self.checkpoint_path(stage, tag)
        save_checkpoint(model, ckpt, stage_tag=stage)
        with open(self.path("logs", f"{stage}{'_' + tag if tag else ''}_time.json"),
                  "w") as f:
            json.dump({"stage": stage, "tag": tag, "seconds": elapsed}, f)
        return ckpt

    def train_all(self, alpha: float | None = None) -> list[str]:
        return [self.train_stage(stage, alpha if stage == "vision_audio_sft" else None)
                for stage in STAGES]

    # -- evaluation -----------------------------------------------------------

    def evaluate(self, ckpt_path: str, modality: str = "both",
                 out_prefix: str = "eval") -> dict:
        """Run accuracy + bias + alignment probes and write the JSON bundle."""
        manifest = self.manifest()
        model = self.load_stage_model(ckpt_path, manifest)
        eval_set = self.load_dataset("vqa_eval")
        mm_set = self.load_dataset("mmalign")
        max_new = int(self.cfg["eval"]["max_new"])
        modalities = ("text", "audio") if modality == "both" else (modality,)
        scores, biases, mmaligns = {}, {}, {}
        for m in modalities:
            scores[m] = E.eval_accuracy(model, eval_set, manifest, m, max_new)
            biases[m] = E.yes_ratio(model, eval_set, manifest, m)
            mmaligns[m] = E.mmalign_eval(model, mm_set, manifest, m)
        ckpt_rel = (os.path.relpath(ckpt_path, self.run_dir)
                    if os.path.isabs(ckpt_path) or ckpt_path.startswith(self.run_dir)
                    else ckpt_path)
        out = {"checkpoint": ckpt_rel, "scores": scores,
               "bias": biases, "mmalign": mmaligns}
        if modality == "both":
            out["eval_result"] = E.make_eval_result(scores["text"], scores["audio"])
        self._ensure_dirs()
        E.write_json(out, self.path("eval", f"{out_prefix}.json"))
        return out

    def probe_attention(self, ckpt_path: str, dataset_name: str, modality: str,
                        n: int, out_name: str) -> str:
        manifest = self.manifest()
        model = self.load_stage_model(ckpt_path, manifest)
        samples = self.load_dataset(dataset_name)
        if n > len(samples):
            print(f"warning: requested {n} samples, dataset has {len(samples)}; "
                  f"clipping")
            n = len(samples)
        profile = E.attention_profile(model, samples, manifest, modality, n,
                                      model_tag=os.path.basename(ckpt_path))
        self._ensure_dirs()
        path = self.path("eval", out_name)
        profile.write_csv(path)
        return path

    # -- KD-ratio sweep ---------------------------------------------------------

    def ablate(self, alphas: list[float]) -> str:
        """Train the final stage once per KD ratio from the same
        audio-aligned checkpoint, evaluate each, and emit a sweep CSV."""
        for a in alphas:
            if not 0.0 <= a <= 1.0:
                raise ConfigError(f"alpha {a} outside [0,1]")
        base_ckpt = self.checkpoint_path("audio_text_align")
        if not os.path.exists(base_ckpt):
            raise MissingPrerequisiteError(
                f"ablation requires checkpoint of stage 'audio_text_align' "
                f"at {base_ckpt}")
        rows = []
        tasks = None
        for a in alphas:
            tag = f"alpha{a:g}"
            ckpt = self.train_stage("vision_audio_sft", alpha=a, tag=tag,
                                    init_from=base_ckpt)
            res = self.evaluate(ckpt, modality="audio",
                                out_prefix=f"eval_{tag}")
            audio = res["scores"]["audio"]
            if tasks is None:
                tasks = sorted(k for k in audio if k != "average")
            rows.append([a] + [audio[t]["accuracy"] for t in tasks]
                        + [audio["average"]])
        path = self.path("eval", "alpha_sweep.csv")
        with open(path, "w") as f:
            f.write("alpha," + ",".join(tasks) + ",average\n")
            for row in rows:
                f.write(",".join(f"{v:.9g}" for v in row) + "\n")
        return path

    # -- report -------------------------------------------------------------------

    def report(self) -> dict:
        """Assemble the run summary, checksumming every referenced artifact.

        Raises ArtifactError listing any missing files.
        """
        artifacts = [self.manifest_path, self.path("config.json")]
        artifacts += [self.dataset_path(n) for n in DATASET_NAMES]
        for sub in ("checkpoints", "logs", "eval"):
            root = self.path(sub)
            if os.path.isdir(root):
                artifacts += [os.path.join(root, f)
                              for f in sorted(os.listdir(root))]
        missing = [p for p in artifacts if not os.path.exists(p)]
        if missing:
            raise ArtifactError("missing artifacts: " + ", ".join(missing))
        # wall-clock files are listed as artifacts but excluded from the
        # checksum table, which must be reproducible across runs
        checksums = {os.path.relpath(p, self.run_dir): D.file_checksum(p)
                     for p in artifacts
                     if os.path.isfile(p) and not p.endswith("_time.json")}
        report = {
            "config": self.cfg,
            "artifact_checksums": checksums,
            "stage_timings": {},
            "eval_files": sorted(f for f in os.listdir(self.path("eval")))
            if os.path.isdir(self.path("eval")) else [],
        }
        logs_dir = self.path("logs")
        if os.path.isdir(logs_dir):
            for f in sorted(os.listdir(logs_dir)):
                if f.endswith("_time.json"):
                    with open(os.path.join(logs_dir, f)) as fh:
                        t = json.load(fh)
                    report["stage_timings"][f[:-len("_time.json")]] = t["seconds"]
        # summary grids from the main eval bundle, if present
        main_eval = self.path("eval", "eval.json")
        if os.path.exists(main_eval):
            with open(main_eval) as f:
                report["summary"] = json.load(f)
        E.write_json(report, self.path("run_report.json"))
        return report
