"""Seeded generator of the tri-modal synthetic universe.

Grid scenes stand in for images, templated word-level questions for text,
and a pseudo-TTS (per-token acoustic signature + Gaussian noise) for audio.
Everything is derived from (seed, config) and serializes byte-identically.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
RELATIONS = ("left", "right", "above", "below")

PAD, EOS = "<pad>", "<eos>"

_QUESTION_WORDS = (
    "is", "there", "a", "what", "color", "shape", "the", "at",
    "row", "col", "how", "many", "describe", "grid",
    "which", "matches", "image", "or", "answer", "question",
)
_NUMBER_WORDS = tuple(str(i) for i in range(17))
_ANSWER_WORDS = ("yes", "no", "A", "B")
_RELATION_WORDS = ("left", "right", "above", "below", "of")
_FILLER_WORDS = (
    "cat", "dog", "sun", "moon", "tree", "rock", "fish", "bird", "sky",
    "sea", "hill", "star", "leaf", "rain", "snow", "wind", "fire", "sand",
    "road", "door", "book", "lamp", "key", "cup", "box",
)

SYSTEM_PROMPT = ("answer", "the", "question")

TASKS = ("yesno", "color", "shape", "count", "caption", "mmalign", "asr")

# feature layout per grid cell: one-hot shape | one-hot color | (row, col)
FEATURE_DIM = len(SHAPES) + len(COLORS) + 2

MANIFEST_VERSION = 1
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def build_vocab() -> list[str]:
    words: list[str] = [PAD, EOS]
    for group in (_QUESTION_WORDS, SHAPES, COLORS, _ANSWER_WORDS,
                  _NUMBER_WORDS, _RELATION_WORDS, _FILLER_WORDS):
        for w in group:
            if w not in words:
                words.append(w)
    return words


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def _round9(x: float) -> float:
    return float(f"{float(x):.9g}")


def _round9_nested(obj):
    if isinstance(obj, float):
        return _round9(obj)
    if isinstance(obj, (list, tuple)):
        return [_round9_nested(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

@dataclass
class Scene:
    """Symbolic grid image: shape/color per cell plus derived features."""

    grid_size: int
    cells: list[list[tuple[str, str]]]  # (shape|"empty", color|"none") per cell

    def nonempty(self) -> list[tuple[int, int, str, str]]:
        out = []
        for r in range(self.grid_size):
            for c in range(self.grid_size):
                s, col = self.cells[r][c]
                if s != "empty":
                    out.append((r, c, s, col))
        return out

    def features(self) -> np.ndarray:
        g = self.grid_size
        f = np.zeros((g * g, FEATURE_DIM), dtype=np.float64)
        for r in range(g):
            for c in range(g):
                s, col = self.cells[r][c]
                i = r * g + c
                if s != "empty":
                    f[i, SHAPES.index(s)] = 1.0
                    f[i, len(SHAPES) + COLORS.index(col)] = 1.0
                f[i, -2] = r / (g - 1)
                f[i, -1] = c / (g - 1)
        return f

    def count_shape(self, shape: str) -> int:
        return sum(1 for _, _, s, _ in self.nonempty() if s == shape)

    def has_pair(self, color: str, shape: str) -> bool:
        return any(s == shape and col == color for _, _, s, col in self.nonempty())

    def to_json(self) -> list:
        return [[list(cell) for cell in row] for row in self.cells]

    @classmethod
    def from_json(cls, data: list) -> "Scene":
        cells = [[(c[0], c[1]) for c in row] for row in data]
        return cls(grid_size=len(cells), cells=cells)


def gen_scene(rng: np.random.Generator, grid_size: int = 4) -> Scene:
    """Each cell is empty with probability 0.5, else uniform shape and color.

    All-empty draws are rerolled so every scene has at least one object.
    """
    if grid_size < 2:
        raise ValueError(f"grid_size must be >= 2, got {grid_size}")
    while True:
        cells = []
        any_filled = False
        for _ in range(grid_size):
            row = []
            for _ in range(grid_size):
                if rng.random() < 0.5:
                    row.append(("empty", "none"))
                else:
                    row.append((SHAPES[rng.integers(len(SHAPES))],
                                COLORS[rng.integers(len(COLORS))]))
                    any_filled = True
            cells.append(row)
        if any_filled:
            return Scene(grid_size=grid_size, cells=cells)


# ---------------------------------------------------------------------------
# manifest / vocabulary / audio
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    """Reproducibility contract: everything needed to regenerate the data."""

    seed: int
    vocab: list[str]
    signatures: dict[str, list[float]]  # per-token acoustic signature, D_a dims
    k_frames: int = 3
    sigma: float = 0.05
    audio_dim: int = 16
    grid_size: int = 4
    counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self._tok2id = {w: i for i, w in enumerate(self.vocab)}

    def token_id(self, word: str) -> int:
        return self._tok2id[word]

    def encode(self, words) -> list[int]:
        return [self._tok2id[w] for w in words]

    def decode(self, ids) -> list[str]:
        return [self.vocab[i] for i in ids]

    @property
    def eos_id(self) -> int:
        return self._tok2id[EOS]

    def signature_matrix(self) -> np.ndarray:
        return np.array([self.signatures[w] for w in self.vocab], dtype=np.float64)

    def canonical(self) -> str:
        body = {
            "version": MANIFEST_VERSION,
            "seed": self.seed,
            "vocab": self.vocab,
            "signatures": {w: [_round9(x) for x in v] for w, v in self.signatures.items()},
            "k_frames": self.k_frames,
            "sigma": _round9(self.sigma),
            "audio_dim": self.audio_dim,
            "grid_size": self.grid_size,
            "counts": dict(sorted(self.counts.items())),
        }
        return json.dumps(body, sort_keys=True, separators=(",", ":"))

    def checksum(self) -> int:
        return fnv1a_64(self.canonical().encode("utf-8"))

    def save(self, path: str) -> None:
        body = json.loads(self.canonical())
        body["checksum"] = self.checksum()
        with open(path, "w") as f:
            json.dump(body, f, sort_keys=True, separators=(",", ":"))

    @classmethod
    def load(cls, path: str) -> "DatasetManifest":
        with open(path) as f:
            body = json.load(f)
        for key in ("version", "seed", "vocab", "signatures", "k_frames",
                    "sigma", "audio_dim", "grid_size", "counts", "checksum"):
            if key not in body:
                raise ValueError(f"manifest missing field '{key}'")
        if body["version"] != MANIFEST_VERSION:
            raise ValueError(f"manifest version mismatch: got {body['version']}, "
                             f"expected {MANIFEST_VERSION}")
        stored = body.pop("checksum")
        m = cls(seed=body["seed"], vocab=body["vocab"], signatures=body["signatures"],
                k_frames=body["k_frames"], sigma=body["sigma"],
                audio_dim=body["audio_dim"], grid_size=body["grid_size"],
                counts=body["counts"])
        if m.checksum() != stored:
            raise ValueError(f"manifest checksum mismatch: stored {stored}, "
                             f"recomputed {m.checksum()}")
        return m


def build_manifest(seed: int, k_frames: int = 3, sigma: float = 0.05,
                   audio_dim: int = 16, grid_size: int = 4) -> DatasetManifest:
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if k_frames < 1:
        raise ValueError(f"k_frames must be >= 1, got {k_frames}")
    vocab = build_vocab()
    rng = np.random.default_rng([seed, 0xACCE55])
    signatures = {
        w: [_round9(x) for x in rng.normal(0.0, 1.0, size=audio_dim)]
        for w in vocab
    }
    return DatasetManifest(seed=seed, vocab=vocab, signatures=signatures,
                           k_frames=k_frames, sigma=sigma, audio_dim=audio_dim,
                           grid_size=grid_size)


def synth_audio(token_ids, manifest: DatasetManifest,
                rng: np.random.Generator) -> np.ndarray:
    """Expand each token to k_frames of signature + N(0, sigma^2) noise."""
    sigs = []
    for t in token_ids:
        if t < 0 or t >= len(manifest.vocab):
            raise ValueError(f"unknown token id {t}")
        sigs.append(manifest.signatures[manifest.vocab[t]])
    base = np.repeat(np.asarray(sigs, dtype=np.float64), manifest.k_frames, axis=0)
    if manifest.sigma > 0:
        base = base + rng.normal(0.0, manifest.sigma, size=base.shape)
    return base


def nearest_signature_decode(frames: np.ndarray, manifest: DatasetManifest) -> list[int]:
    """Table-lookup decoder: average each K-frame group, take the nearest
    acoustic signature. Exact at sigma=0."""
    k = manifest.k_frames
    if frames.shape[0] % k != 0:
        raise ValueError(f"frame count {frames.shape[0]} not divisible by K={k}")
    groups = frames.reshape(-1, k, frames.shape[1]).mean(axis=1)
    table = manifest.signature_matrix()
    dist2 = ((groups[:, None, :] - table[None, :, :]) ** 2).sum(axis=2)
    return [int(i) for i in dist2.argmin(axis=1)]


# ---------------------------------------------------------------------------
# samples
# ---------------------------------------------------------------------------

@dataclass
class TriModalSample:
    """One supervised example: scene + text question + audio question + answer."""

    task: str
    scene: Scene | None
    question_ids: list[int]
    audio_frames: np.ndarray
    answer_ids: list[int]
    meta: dict = field(default_factory=dict)

    def to_json_obj(self) -> dict:
        return {
            "task": self.task,
            "scene_cells": self.scene.to_json() if self.scene is not None else None,
            "question_text_ids": list(self.question_ids),
            "audio_frames": _round9_nested(self.audio_frames.tolist()),
            "answer_ids": list(self.answer_ids),
            "meta": _round9_nested(self.meta),
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "TriModalSample":
        for key in ("task", "scene_cells", "question_text_ids", "audio_frames",
                    "answer_ids", "meta"):
            if key not in obj:
                raise ValueError(f"sample missing field '{key}'")
        scene = Scene.from_json(obj["scene_cells"]) if obj["scene_cells"] else None
        return cls(
            task=obj["task"],
            scene=scene,
            question_ids=[int(i) for i in obj["question_text_ids"]],
            audio_frames=np.asarray(obj["audio_frames"], dtype=np.float64),
            answer_ids=[int(i) for i in obj["answer_ids"]],
            meta=obj["meta"],
        )


def _words_to_sample(task, scene, q_words, a_words, manifest, rng, meta=None):
    q_ids = manifest.encode(q_words)
    a_ids = manifest.encode(a_words)
    frames = synth_audio(q_ids, manifest, rng)
    return TriModalSample(task=task, scene=scene, question_ids=q_ids,
                          audio_frames=frames, answer_ids=a_ids, meta=meta or {})


# --- VQA templates ----------------------------------------------------------

def _yesno(scene: Scene, rng, yes_target: float):
    present = sorted({(col, s) for _, _, s, col in scene.nonempty()})
    absent = [(col, s) for col in COLORS for s in SHAPES if (col, s) not in set(present)]
    if not absent or not present:
        return None
    if rng.random() < yes_target:
        col, s = present[rng.integers(len(present))]
        ans = "yes"
    else:
        col, s = absent[rng.integers(len(absent))]
        ans = "no"
    return ["is", "there", "a", col, s], [ans]


def _color_q(scene: Scene, rng):
    objs = scene.nonempty()
    r, c, s, col = objs[rng.integers(len(objs))]
    q = ["what", "color", "is", "the", s, "at", "row", str(r + 1), "col", str(c + 1)]
    return q, [col]


def _shape_q(scene: Scene, rng):
    objs = scene.nonempty()
    r, c, s, _ = objs[rng.integers(len(objs))]
    q = ["what", "shape", "is", "at", "row", str(r + 1), "col", str(c + 1)]
    return q, [s]


def _count_q(scene: Scene, rng):
    s = SHAPES[rng.integers(len(SHAPES))]
    return ["how", "many", s], [str(scene.count_shape(s))]


def _caption_q(scene: Scene, rng):
    r, c, s, col = scene.nonempty()[0]
    q = ["describe", "the", "grid"]
    a = [col, s, "row", str(r + 1), "col", str(c + 1)]
    return q, a


_TEMPLATES = {
    "yesno": _yesno,
    "color": _color_q,
    "shape": _shape_q,
    "count": _count_q,
    "caption": _caption_q,
}


def symbolic_answer(task: str, scene: Scene, question_words: list[str]) -> list[str] | None:
    """Recompute a sample's answer from its scene and question. Used as the
    independent correctness check for generated data."""
    if task == "yesno":
        col, s = question_words[3], question_words[4]
        return ["yes" if scene.has_pair(col, s) else "no"]
    if task == "color":
        r, c = int(question_words[7]) - 1, int(question_words[9]) - 1
        return [scene.cells[r][c][1]]
    if task == "shape":
        r, c = int(question_words[5]) - 1, int(question_words[7]) - 1
        return [scene.cells[r][c][0]]
    if task == "count":
        return [str(scene.count_shape(question_words[2]))]
    if task == "caption":
        r, c, s, col = scene.nonempty()[0]
        return [col, s, "row", str(r + 1), "col", str(c + 1)]
    return None


def render_question(scene: Scene, task: str, rng: np.random.Generator,
                    yes_target: float = 0.5):
    """Instantiate a question template on a scene; returns (q_words, a_words).

    Unsatisfiable draws return None; callers resample the scene.
    """
    if task == "yesno":
        return _yesno(scene, rng, yes_target)
    if task not in _TEMPLATES:
        raise ValueError(f"unknown template '{task}'")
    return _TEMPLATES[task](scene, rng)


def gen_vqa_dataset(manifest: DatasetManifest, n: int, seed: int,
                    tasks=("yesno", "color", "shape", "count"),
                    yes_target: float = 0.5, mmalign_fraction: float = 0.0,
                    ) -> list[TriModalSample]:
    """Mixed-task VQA samples over fresh scenes, tasks cycled uniformly."""
    samples: list[TriModalSample] = []
    n_mm = int(round(n * mmalign_fraction))
    i = 0
    while len(samples) < n - n_mm:
        rng = np.random.default_rng([manifest.seed, seed, 1, i])
        i += 1
        task = tasks[len(samples) % len(tasks)]
        scene = gen_scene(rng, manifest.grid_size)
        qa = render_question(scene, task, rng, yes_target)
        if qa is None:
            continue
        q, a = qa
        samples.append(_words_to_sample(task, scene, q, a, manifest, rng))
    if n_mm:
        samples.extend(gen_mmalign(manifest, n_mm + n_mm % 2, seed + 7)[:n_mm])
    return samples


# --- MMAlign ----------------------------------------------------------------

def gen_mmalign(manifest: DatasetManifest, n: int, seed: int) -> list[TriModalSample]:
    """Paired-caption probes: a correct scene caption versus a minimally
    perturbed one, asked as a two-choice question.

    Captions use the same single-object form as the caption task
    ("<color> <shape> row R col C"). Half the probes perturb the spatial
    relation of the object to the grid (its coordinates are moved to an
    empty cell) and half perturb the color attribute. The correct option
    is A for exactly half of the samples, and each half is balanced across
    the two perturbation types.
    """
    if n % 2 != 0:
        raise ValueError(f"mmalign count must be even, got {n}")
    samples: list[TriModalSample] = []
    i = 0
    while len(samples) < n:
        rng = np.random.default_rng([manifest.seed, seed, 2, i])
        i += 1
        perturbation = "relation" if len(samples) < n // 2 else "attribute"
        scene = gen_scene(rng, manifest.grid_size)
        objs = scene.nonempty()
        if not objs:
            continue
        r, c, shape, col = objs[int(rng.integers(len(objs)))]
        # descriptions must be unique in the scene so captions are unambiguous
        descs = [(cc, ss) for _, _, ss, cc in objs]
        if descs.count((col, shape)) > 1:
            continue
        correct = [col, shape, "row", str(r + 1), "col", str(c + 1)]
        if perturbation == "relation":
            empty = [(rr, cc)
                     for rr in range(manifest.grid_size)
                     for cc in range(manifest.grid_size)
                     if scene.cells[rr][cc][0] == "empty"]
            if not empty:
                continue
            rr, cc = empty[int(rng.integers(len(empty)))]
            perturbed = [col, shape, "row", str(rr + 1), "col", str(cc + 1)]
        else:
            other = [c2 for c2 in COLORS if c2 != col]
            col2 = other[int(rng.integers(len(other)))]
            # the recolored object must not exist, or the caption could be true
            if (col2, shape) in descs:
                continue
            perturbed = [col2, shape, "row", str(r + 1), "col", str(c + 1)]
        correct_is_a = len(samples) % 2 == 0
        opt_a, opt_b = (correct, perturbed) if correct_is_a else (perturbed, correct)
        q = ["which", "matches", "the", "image", "A", "or", "B",
             "A"] + opt_a + ["B"] + opt_b
        ans = ["A" if correct_is_a else "B"]
        meta = {
            "perturbation": perturbation,
            "caption_correct": correct,
            "caption_perturbed": perturbed,
            "correct_is_a": correct_is_a,
        }
        samples.append(_words_to_sample("mmalign", scene, q, ans, manifest, rng, meta))
    return samples


# --- ASR / text echo --------------------------------------------------------

def gen_asr_dataset(manifest: DatasetManifest, n: int, seed: int,
                    min_len: int = 2, max_len: int = 6) -> list[TriModalSample]:
    """Random sentences over the vocabulary; audio via synth_audio; the
    target is the transcript. No scene attached."""
    content = [w for w in manifest.vocab if w not in (PAD, EOS)]
    samples = []
    for i in range(n):
        rng = np.random.default_rng([manifest.seed, seed, 3, i])
        length = int(rng.integers(min_len, max_len + 1))
        words = [content[int(j)] for j in rng.integers(len(content), size=length)]
        samples.append(_words_to_sample("asr", None, words, words, manifest, rng))
    return samples


# ---------------------------------------------------------------------------
# file IO
# ---------------------------------------------------------------------------

def write_jsonl(samples: list[TriModalSample], path: str) -> None:
    with open(path, "w") as f:
        for s in samples:
            f.write(json.dumps(s.to_json_obj(), sort_keys=True,
                               separators=(",", ":")))
            f.write("\n")


def read_jsonl(path: str) -> list[TriModalSample]:
    samples = []
    with open(path) as f:
        for line_no, line in enumerate(f):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{line_no + 1}: corrupt JSON line") from exc
            samples.append(TriModalSample.from_json_obj(obj))
    return samples


def file_checksum(path: str) -> int:
    with open(path, "rb") as f:
        return fnv1a_64(f.read())
