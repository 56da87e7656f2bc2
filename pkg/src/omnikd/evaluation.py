"""Diagnostics: text-vs-audio accuracy and the gap between them, yes-bias,
paired-caption alignment accuracy, and layer-wise attention-segment
profiles with a scalar profile distance."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import SYSTEM_PROMPT, DatasetManifest, TriModalSample
from .model import OmniModel, SEG_CODE
from .training import make_batches

PROFILE_CHANNELS = (
    "q_to_system", "q_to_vision", "q_to_query",
    "r_to_system", "r_to_vision", "r_to_query", "r_to_response",
)


# ---------------------------------------------------------------------------
# accuracy / gap / bias
# ---------------------------------------------------------------------------

def _decode_answers(model: OmniModel, samples: list[TriModalSample],
                    manifest: DatasetManifest, modality: str,
                    max_new: int = 8) -> list[list[str]]:
    """Greedy-decode each sample's answer; deterministic, batched by shape."""
    answers: dict[int, list[str]] = {}
    index = {id(s): i for i, s in enumerate(samples)}
    for batch in make_batches(samples, 64, manifest):
        query = batch.text_query if modality == "text" else batch.audio_query
        ids = model.generate_greedy(batch.system_ids, batch.vision, query,
                                    modality, manifest.eos_id, max_new)
        for s, out in zip(batch.samples, ids):
            answers[index[id(s)]] = manifest.decode(out)
    return [answers[i] for i in range(len(samples))]


def _match(pred_words: list[str], answer_words: list[str]) -> bool:
    return [w.lower() for w in pred_words] == [w.lower() for w in answer_words]


def eval_accuracy(model: OmniModel, samples: list[TriModalSample],
                  manifest: DatasetManifest, modality: str,
                  max_new: int = 8) -> dict:
    """Per-task percent accuracy under one query modality.

    Scoring is exact match after lowercasing and trimming the end token.
    Returns {task: {"n": count, "accuracy": percent}} plus an "average" key
    (unweighted mean over tasks).
    """
    preds = _decode_answers(model, samples, manifest, modality, max_new)
    per_task: dict[str, list[int]] = {}
    for s, p in zip(samples, preds):
        gold = manifest.decode(s.answer_ids)
        per_task.setdefault(s.task, []).append(1 if _match(p, gold) else 0)
    result = {t: {"n": len(v), "accuracy": 100.0 * sum(v) / len(v)}
              for t, v in sorted(per_task.items())}
    accs = [r["accuracy"] for r in result.values()]
    result["average"] = sum(accs) / len(accs)
    return result


def compute_gap(text_scores: dict, audio_scores: dict) -> dict:
    """Per-task text minus audio accuracy, plus the average of the gaps."""
    t_keys = {k for k in text_scores if k != "average"}
    a_keys = {k for k in audio_scores if k != "average"}
    if t_keys != a_keys:
        raise ValueError(f"task keys differ: {sorted(t_keys)} vs {sorted(a_keys)}")

    def _acc(entry):
        return entry["accuracy"] if isinstance(entry, dict) else float(entry)

    gaps = {k: _acc(text_scores[k]) - _acc(audio_scores[k]) for k in sorted(t_keys)}
    gaps["average"] = sum(gaps.values()) / len(t_keys)
    return gaps


def yes_ratio(model: OmniModel, samples: list[TriModalSample],
              manifest: DatasetManifest, modality: str) -> dict:
    """Fraction of decoded yes answers on a yes/no dataset.

    Decodes that are neither yes nor no count as "no" and are tallied
    separately under "unparseable".
    """
    yn = [s for s in samples if s.task == "yesno"]
    if not yn:
        raise ValueError("yes_ratio requires yesno samples")
    preds = _decode_answers(model, yn, manifest, modality, max_new=3)
    n_yes = sum(1 for p in preds if p and p[0].lower() == "yes")
    n_unparse = sum(1 for p in preds
                    if not p or p[0].lower() not in ("yes", "no"))
    gt_yes = sum(1 for s in yn
                 if manifest.decode(s.answer_ids)[0] == "yes") / len(yn)
    return {
        "modality": modality,
        "n": len(yn),
        "ground_truth_yes_fraction": gt_yes,
        "predicted_yes_fraction": n_yes / len(yn),
        "unparseable": n_unparse,
    }


def mmalign_eval(model: OmniModel, samples: list[TriModalSample],
                 manifest: DatasetManifest, modality: str) -> dict:
    """Two-choice caption probe accuracy per perturbation type.

    A sample is correct iff the decoded option letter equals the stored
    answer; anything unparseable is incorrect. The average is the arithmetic
    mean of the relation and attribute accuracies.
    """
    mm = [s for s in samples if s.task == "mmalign"]
    if not mm:
        raise ValueError("mmalign_eval requires mmalign samples")
    preds = _decode_answers(model, mm, manifest, modality, max_new=3)
    hits: dict[str, list[int]] = {"relation": [], "attribute": []}
    for s, p in zip(mm, preds):
        gold = manifest.decode(s.answer_ids)
        hits[s.meta["perturbation"]].append(1 if _match(p, gold) else 0)
    out = {}
    for kind, v in hits.items():
        out[kind] = 100.0 * sum(v) / len(v) if v else float("nan")
    out["average"] = (out["relation"] + out["attribute"]) / 2.0
    out["n"] = len(mm)
    out["modality"] = modality
    return out


# ---------------------------------------------------------------------------
# attention profiles
# ---------------------------------------------------------------------------

@dataclass
class AttentionProfile:
    """Per-layer mean attention mass routed between token segments."""

    layers: list          # one dict per layer: channel -> value
    meta: dict = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def channel(self, name: str) -> np.ndarray:
        return np.array([layer[name] for layer in self.layers])

    def write_csv(self, path: str) -> None:
        modality = self.meta.get("modality", "")
        with open(path, "w") as f:
            f.write("layer,channel,modality,value\n")
            for i, layer in enumerate(self.layers):
                for ch in PROFILE_CHANNELS:
                    f.write(f"{i},{ch},{modality},{layer[ch]:.9g}\n")

    @classmethod
    def read_csv(cls, path: str) -> "AttentionProfile":
        rows: dict[int, dict] = {}
        modality = ""
        with open(path) as f:
            header = f.readline()
            if header.strip() != "layer,channel,modality,value":
                raise ValueError(f"{path}: unexpected profile CSV header")
            for line in f:
                layer, ch, modality, value = line.strip().split(",")
                rows.setdefault(int(layer), {})[ch] = float(value)
        layers = [rows[i] for i in sorted(rows)]
        return cls(layers=layers, meta={"modality": modality})


def attention_profile(model: OmniModel, samples: list[TriModalSample],
                      manifest: DatasetManifest, modality: str,
                      n_samples: int | None = None,
                      model_tag: str = "") -> AttentionProfile:
    """Mean attention mass per layer from the query (Q) and response (R)
    segments into each earlier segment.

    Heads are aggregated by unweighted mean; response positions use teacher
    forcing on the ground-truth answer. Per sample and layer, each source
    token's attention row is summed over the target segment's columns, then
    averaged over source tokens; sample profiles are averaged at the end.
    """
    if n_samples is not None:
        samples = samples[:n_samples]
    if not samples:
        raise ValueError("attention_profile requires at least one sample")
    sums: list[dict] | None = None
    n_total = 0
    from . import tensor as T
    for batch in make_batches(samples, 64, manifest):
        query = batch.text_query if modality == "text" else batch.audio_query
        with T.no_grad():
            seq = model.assemble(batch.system_ids, batch.vision, query,
                                 batch.response, modality)
            _, captured = model.forward(seq, capture_attention=True)
        segs = seq.segments
        seg_idx = {name: np.nonzero(segs == code)[0]
                   for name, code in SEG_CODE.items()}
        if sums is None:
            sums = [{ch: 0.0 for ch in PROFILE_CHANNELS} for _ in captured]
        b = len(batch.samples)
        for li, attn in enumerate(captured):
            mean_heads = attn.mean(axis=1)  # [B, L, L]
            for src_key, prefix in (("query", "q"), ("response", "r")):
                src = seg_idx[src_key]
                if src.size == 0:
                    continue
                rows = mean_heads[:, src, :]  # [B, n_src, L]
                for tgt_key in ("system", "vision", "query", "response"):
                    ch = f"{prefix}_to_{tgt_key}"
                    if ch not in PROFILE_CHANNELS:
                        continue
                    tgt = seg_idx[tgt_key]
                    if tgt.size == 0:
                        continue
                    mass = rows[:, :, tgt].sum(axis=2).mean(axis=1)  # [B]
                    sums[li][ch] += float(mass.sum())
        n_total += b
    layers = []
    for layer_sums in sums:
        layers.append({ch: layer_sums.get(ch, 0.0) / n_total
                       for ch in PROFILE_CHANNELS})
    return AttentionProfile(layers=layers, meta={
        "modality": modality, "model_tag": model_tag, "n_samples": n_total,
        "head_aggregation": "mean", "response_mode": "teacher_forcing",
    })


def profile_distance(profile_a: AttentionProfile, profile_b: AttentionProfile,
                     layer_range: tuple[int, int] | None = None,
                     channel: str = "q_to_vision") -> float:
    """Mean absolute difference of one profile channel over a layer range.

    The default range is the upper half of layers, where the modality
    divergence concentrates.
    """
    if profile_a.n_layers != profile_b.n_layers:
        raise ValueError(f"layer counts differ: {profile_a.n_layers} "
                         f"vs {profile_b.n_layers}")
    n = profile_a.n_layers
    lo, hi = layer_range if layer_range is not None else (n // 2, n)
    va = profile_a.channel(channel)[lo:hi]
    vb = profile_b.channel(channel)[lo:hi]
    return float(np.abs(va - vb).mean())


# ---------------------------------------------------------------------------
# report containers
# ---------------------------------------------------------------------------

def make_eval_result(text_scores: dict, audio_scores: dict) -> dict:
    """Combine per-modality accuracy tables into one report with gaps."""
    gaps = compute_gap(text_scores, audio_scores)
    tasks = sorted(k for k in text_scores if k != "average")
    per_task = {}
    for t in tasks:
        per_task[t] = {
            "n": text_scores[t]["n"],
            "text_accuracy": text_scores[t]["accuracy"],
            "audio_accuracy": audio_scores[t]["accuracy"],
            "gap": gaps[t],
        }
    return {
        "per_task": per_task,
        "text_average": text_scores["average"],
        "audio_average": audio_scores["average"],
        "gap_average": gaps["average"],
    }


def write_json(obj: dict, path: str) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")
