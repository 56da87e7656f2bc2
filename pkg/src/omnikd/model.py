"""Tiny omnimodal causal transformer.

One shared pre-norm decoder backbone fed by three input routes: text
embeddings, a vision MLP encoder + projector (one token per grid cell), and
an audio MLP encoder + projector (one token per K acoustic frames). The
vision-text route is the teacher path and the vision-audio route the
student path; both literally share the same backbone and output-head
parameter tensors.

Sequences are assembled as contiguous blocks in the fixed order
system | vision | query | response, with learned absolute positional
embeddings over the full sequence.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_MAGIC = b"OKDCKPT1"
CHECKPOINT_VERSION = 1

SEGMENTS = ("system", "vision", "query", "response")
SEG_CODE = {name: i for i, name in enumerate(SEGMENTS)}

GROUPS = ("text_embedding", "vision_encoder", "vision_projector",
          "audio_encoder", "audio_projector", "backbone", "output_head")


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 64
    vision_feat_dim: int = 9
    audio_frame_dim: int = 16
    frames_per_token: int = 3
    enc_hidden: int = 64
    mlp_ratio: int = 4
    init_scale: float = 0.02
    dtype: str = "float64"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class AssembledSequence:
    """Embedded token matrix plus segment labels and block boundaries."""

    emb: Tensor                      # [B, L, d_model]
    segments: np.ndarray             # [L] int codes into SEGMENTS
    bounds: dict                     # segment name -> (start, end)
    batch: int
    length: int


class OmniModel:
    """Parameter container plus the forward passes of both modality routes."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.groups: dict[str, dict[str, Tensor]] = {g: {} for g in GROUPS}
        self.trainable: dict[str, bool] = {g: True for g in GROUPS}
        self._init_params(seed)

    # -- parameters ---------------------------------------------------------

    def _param(self, group: str, name: str, shape, rng, zero=False,
               fan_in: int | None = None):
        c = self.config
        if zero:
            data = np.zeros(shape, dtype=c.np_dtype)
        else:
            # Encoders and projectors use 1/sqrt(fan_in) so that the raw
            # modality features keep their variance through the stack; the
            # small backbone init scale there starves the vision tokens and
            # coordinate lookups can fail to bootstrap on some seeds.
            std = c.init_scale if fan_in is None else 1.0 / np.sqrt(fan_in)
            data = rng.normal(0.0, std, size=shape).astype(c.np_dtype)
        t = Tensor(data, requires_grad=True)
        self.groups[group][name] = t
        return t

    def _init_params(self, seed: int):
        c = self.config
        rng = np.random.default_rng([seed, 0x0D0D])
        d, h = c.d_model, c.enc_hidden
        self._param("text_embedding", "tok", (c.vocab_size, d), rng)
        self._param("vision_encoder", "w1", (c.vision_feat_dim, h), rng,
                    fan_in=c.vision_feat_dim)
        self._param("vision_encoder", "b1", (h,), rng, zero=True)
        self._param("vision_encoder", "w2", (h, h), rng, fan_in=h)
        self._param("vision_encoder", "b2", (h,), rng, zero=True)
        self._param("vision_projector", "w", (h, d), rng, fan_in=h)
        self._param("vision_projector", "b", (d,), rng, zero=True)
        # The audio path keeps the conservative backbone init scale: it is
        # grafted onto an already-trained backbone during the alignment and
        # vision_audio_sft stages, and a small start keeps those stages from
        # immediately overwriting the aligned embedding space.
        ain = c.audio_frame_dim * c.frames_per_token
        self._param("audio_encoder", "w1", (ain, h), rng)
        self._param("audio_encoder", "b1", (h,), rng, zero=True)
        self._param("audio_encoder", "w2", (h, h), rng)
        self._param("audio_encoder", "b2", (h,), rng, zero=True)
        self._param("audio_projector", "w", (h, d), rng)
        self._param("audio_projector", "b", (d,), rng, zero=True)
        self._param("backbone", "pos", (c.max_seq_len, d), rng)
        m = c.mlp_ratio * d
        for i in range(c.n_layers):
            p = f"l{i}."
            self._param("backbone", p + "ln1_g", (d,), rng, zero=True)
            self.groups["backbone"][p + "ln1_g"].data += 1.0
            self._param("backbone", p + "ln1_b", (d,), rng, zero=True)
            for nm in ("wq", "wk", "wv", "wo"):
                self._param("backbone", p + nm, (d, d), rng)
            # no key bias: softmax cancels it, leaving a zero-gradient direction
            for nm in ("bq", "bv", "bo"):
                self._param("backbone", p + nm, (d,), rng, zero=True)
            self._param("backbone", p + "ln2_g", (d,), rng, zero=True)
            self.groups["backbone"][p + "ln2_g"].data += 1.0
            self._param("backbone", p + "ln2_b", (d,), rng, zero=True)
            self._param("backbone", p + "w1", (d, m), rng)
            self._param("backbone", p + "b1", (m,), rng, zero=True)
            self._param("backbone", p + "w2", (m, d), rng)
            self._param("backbone", p + "b2", (d,), rng, zero=True)
        self._param("backbone", "lnf_g", (d,), rng, zero=True)
        self.groups["backbone"]["lnf_g"].data += 1.0
        self._param("backbone", "lnf_b", (d,), rng, zero=True)
        self._param("output_head", "w", (d, c.vocab_size), rng)
        self._param("output_head", "b", (c.vocab_size,), rng, zero=True)

    def parameters(self, groups=None):
        out = []
        for g in (groups or GROUPS):
            for name, t in self.groups[g].items():
                out.append((g, name, t))
        return out

    def set_trainable(self, trainable_groups) -> None:
        wanted = set(trainable_groups)
        unknown = wanted - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups: {sorted(unknown)}")
        for g in GROUPS:
            flag = g in wanted
            self.trainable[g] = flag
            for t in self.groups[g].values():
                t.requires_grad = flag

    def zero_grads(self) -> None:
        for _, _, t in self.parameters():
            t.zero_grad()

    def group_checksum(self, group: str) -> int:
        from .data import fnv1a_64
        h = 0
        for name in sorted(self.groups[group]):
            t = self.groups[group][name]
            h ^= fnv1a_64(name.encode() + t.data.tobytes())
        return h

    # -- encoders -----------------------------------------------------------

    def _mlp_encode(self, x: Tensor, enc: dict, proj: dict) -> Tensor:
        h = T.gelu(T.add_bias(T.matmul(x, enc["w1"]), enc["b1"]))
        h = T.gelu(T.add_bias(T.matmul(h, enc["w2"]), enc["b2"]))
        return T.add_bias(T.matmul(h, proj["w"]), proj["b"])

    def encode_vision(self, features: np.ndarray) -> Tensor:
        """[B, G*G, F] scene features -> [B, G*G, d_model] vision tokens."""
        c = self.config
        features = np.asarray(features, dtype=c.np_dtype)
        if features.shape[-1] != c.vision_feat_dim:
            raise T.ShapeMismatchError("encode_vision", features.shape,
                                       (c.vision_feat_dim,))
        return self._mlp_encode(Tensor(features), self.groups["vision_encoder"],
                                self.groups["vision_projector"])

    def encode_audio(self, frames: np.ndarray) -> Tensor:
        """[B, K*T, D_a] frames -> [B, T, d_model], one token per K frames."""
        c = self.config
        frames = np.asarray(frames, dtype=c.np_dtype)
        k = c.frames_per_token
        if frames.shape[-2] % k != 0:
            raise ValueError(
                f"frame count {frames.shape[-2]} not divisible by K={k}")
        if frames.shape[-1] != c.audio_frame_dim:
            raise T.ShapeMismatchError("encode_audio", frames.shape,
                                       (c.audio_frame_dim,))
        b = frames.shape[0]
        t_tokens = frames.shape[-2] // k
        grouped = frames.reshape(b, t_tokens, k * c.audio_frame_dim)
        return self._mlp_encode(Tensor(grouped), self.groups["audio_encoder"],
                                self.groups["audio_projector"])

    # -- sequence assembly ---------------------------------------------------

    def assemble(self, system_ids, vision_features, query, response_ids,
                 query_modality: str) -> AssembledSequence:
        """Build the system|vision|query|response sequence for a batch.

        `query` is [B, Tq] text ids when query_modality == "text", else
        [B, K*Tq, D_a] audio frames. `vision_features` and `response_ids`
        may be None (no vision block / generation prefix).
        """
        c = self.config
        tok = self.groups["text_embedding"]["tok"]
        parts: list[Tensor] = []
        seg_codes: list[np.ndarray] = []

        system_ids = np.asarray(system_ids, dtype=np.int64)
        if system_ids.ndim == 1:
            batch = None
        else:
            batch = system_ids.shape[0]
        if query_modality == "text":
            query = np.asarray(query, dtype=np.int64)
            batch = query.shape[0]
        elif query_modality == "audio":
            query = np.asarray(query, dtype=c.np_dtype)
            batch = query.shape[0]
        else:
            raise ValueError(f"unknown query modality '{query_modality}'")

        sys_b = np.broadcast_to(system_ids, (batch, system_ids.shape[-1]))
        parts.append(T.embedding(tok, sys_b))
        seg_codes.append(np.full(sys_b.shape[1], SEG_CODE["system"], np.int8))

        if vision_features is not None:
            vis = self.encode_vision(np.asarray(vision_features))
            parts.append(vis)
            seg_codes.append(np.full(vis.shape[1], SEG_CODE["vision"], np.int8))

        if query_modality == "text":
            parts.append(T.embedding(tok, query))
            q_len = query.shape[1]
        else:
            q_tokens = self.encode_audio(query)
            parts.append(q_tokens)
            q_len = q_tokens.shape[1]
        seg_codes.append(np.full(q_len, SEG_CODE["query"], np.int8))

        if response_ids is not None and np.size(response_ids) > 0:
            resp = np.asarray(response_ids, dtype=np.int64)
            parts.append(T.embedding(tok, resp))
            seg_codes.append(np.full(resp.shape[1], SEG_CODE["response"], np.int8))

        segments = np.concatenate(seg_codes)
        length = segments.shape[0]
        if length > c.max_seq_len:
            raise ValueError(
                f"assembled length {length} exceeds max_seq_len {c.max_seq_len} "
                f"(blocks: {[int((segments == i).sum()) for i in range(4)]})")
        emb = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
        emb = T.add_bias(emb, _slice_rows(self.groups["backbone"]["pos"], length))
        bounds = {}
        for name, code in SEG_CODE.items():
            idx = np.nonzero(segments == code)[0]
            if idx.size:
                bounds[name] = (int(idx[0]), int(idx[-1]) + 1)
        return AssembledSequence(emb=emb, segments=segments, bounds=bounds,
                                 batch=batch, length=length)

    # -- transformer forward --------------------------------------------------

    def forward(self, seq: AssembledSequence, capture_attention: bool = False):
        """Causal forward pass. Returns (logits [B, L, V], attention or None).

        Attention capture stores the post-softmax weights per layer as
        [B, n_heads, L, L] numpy arrays without altering the computation.
        """
        c = self.config
        bb = self.groups["backbone"]
        b, length, d = seq.batch, seq.length, c.d_model
        nh, dh = c.n_heads, c.d_model // c.n_heads
        causal = np.triu(np.ones((length, length), dtype=bool), k=1)
        mask = np.broadcast_to(causal, (b, nh, length, length))
        x = seq.emb
        captured: list[np.ndarray] = []
        for i in range(c.n_layers):
            p = f"l{i}."
            xn = T.layer_norm(x, bb[p + "ln1_g"], bb[p + "ln1_b"])
            q = T.add_bias(T.matmul(xn, bb[p + "wq"]), bb[p + "bq"])
            k = T.matmul(xn, bb[p + "wk"])
            v = T.add_bias(T.matmul(xn, bb[p + "wv"]), bb[p + "bv"])
            q = T.transpose(T.reshape(q, (b, length, nh, dh)), (0, 2, 1, 3))
            k = T.transpose(T.reshape(k, (b, length, nh, dh)), (0, 2, 1, 3))
            v = T.transpose(T.reshape(v, (b, length, nh, dh)), (0, 2, 1, 3))
            scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))),
                             1.0 / np.sqrt(dh))
            scores = T.masked_fill(scores, mask, -1e9)
            attn = T.softmax(scores, axis=-1)
            if capture_attention:
                w = attn.data.copy()
                w[..., causal] = 0.0  # exact zeros above the diagonal
                captured.append(w)
            ctx = T.matmul(attn, v)
            ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, length, d))
            proj = T.add_bias(T.matmul(ctx, bb[p + "wo"]), bb[p + "bo"])
            x = T.add(x, proj)
            xn = T.layer_norm(x, bb[p + "ln2_g"], bb[p + "ln2_b"])
            hmid = T.gelu(T.add_bias(T.matmul(xn, bb[p + "w1"]), bb[p + "b1"]))
            mlp_out = T.add_bias(T.matmul(hmid, bb[p + "w2"]), bb[p + "b2"])
            x = T.add(x, mlp_out)
        x = T.layer_norm(x, bb["lnf_g"], bb["lnf_b"])
        head = self.groups["output_head"]
        logits = T.add_bias(T.matmul(x, head["w"]), head["b"])
        return logits, (captured if capture_attention else None)

    # -- decoding --------------------------------------------------------------

    def generate_greedy(self, system_ids, vision_features, query,
                        query_modality: str, eos_id: int, max_new: int = 8):
        """Deterministic greedy decode for a batch of same-length prefixes.

        Returns a list of token-id lists (without the end token). Argmax
        ties resolve to the lowest token id.
        """
        with T.no_grad():
            if query_modality == "text":
                batch = np.asarray(query).shape[0]
            else:
                batch = np.asarray(query).shape[0]
            done = np.zeros(batch, dtype=bool)
            out_ids = [[] for _ in range(batch)]
            resp: np.ndarray | None = None
            for _ in range(max_new):
                seq = self.assemble(system_ids, vision_features, query, resp,
                                    query_modality)
                logits, _ = self.forward(seq)
                last = logits.data[:, -1, :]
                nxt = last.argmax(axis=1).astype(np.int64)
                for j in range(batch):
                    if not done[j]:
                        if nxt[j] == eos_id:
                            done[j] = True
                        else:
                            out_ids[j].append(int(nxt[j]))
                if done.all():
                    break
                step = np.where(done, eos_id, nxt).reshape(batch, 1)
                resp = step if resp is None else np.concatenate([resp, step], axis=1)
            return out_ids


def _slice_rows(t: Tensor, n: int) -> Tensor:
    """First n rows of a 2D parameter, with gradient routed back."""
    out_data = t.data[:n]

    def bw(g):
        gt = np.zeros_like(t.data)
        gt[:n] = g
        return ((t, gt),)

    return T._make(out_data, (t,), bw, "slice_rows")


# ---------------------------------------------------------------------------
# checkpoints: magic | u64 header length | JSON header | raw param bytes
# ---------------------------------------------------------------------------

def save_checkpoint(model: OmniModel, path: str, stage_tag: str = "",
                    rng_state=None) -> None:
    entries = []
    blobs = []
    offset = 0
    for g, name, t in model.parameters():
        raw = np.ascontiguousarray(t.data).tobytes()
        entries.append({
            "group": g, "name": name, "shape": list(t.shape),
            "dtype": str(t.dtype), "offset": offset, "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "stage_tag": stage_tag,
        "rng_state": rng_state,
        "trainable": dict(model.trainable),
        "params": entries,
    }
    hj = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(hj)))
        f.write(hj)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path: str) -> tuple[OmniModel, dict]:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen))
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: checkpoint version {header['version']} "
                             f"unsupported (expected {CHECKPOINT_VERSION})")
        body = f.read()
    config = ModelConfig(**header["config"])
    model = OmniModel(config, seed=0)
    for e in header["params"]:
        t = model.groups[e["group"]][e["name"]]
        arr = np.frombuffer(body[e["offset"]:e["offset"] + e["nbytes"]],
                            dtype=e["dtype"]).reshape(e["shape"]).copy()
        if tuple(arr.shape) != t.shape:
            raise ValueError(f"{path}: shape mismatch for {e['group']}.{e['name']}")
        t.data = arr
    model.set_trainable([g for g, flag in header["trainable"].items() if flag])
    meta = {"stage_tag": header["stage_tag"], "rng_state": header["rng_state"]}
    return model, meta
