"""Demo 3: the self-distillation loss geometry.

One model, two input routes: the vision+text route acts as the teacher, the
vision+audio route as the student. This demo shows (a) the KL term is zero
when the routes agree and grows as the audio noise pushes them apart, and
(b) the alpha-combined loss interpolates exactly between pure SFT and pure
KD, with exact identities at the endpoints.

Run:  python demos/03_self_distillation_losses.py
"""

import numpy as np

from omnikd import data as D
from omnikd import tensor as T
from omnikd.model import ModelConfig, OmniModel
from omnikd.training import (build_batch, loss_combined, loss_self_kd,
                             loss_sft, make_batches)

print("teacher/student divergence vs audio noise:")
for sigma in (0.0, 0.25, 0.5, 1.0):
    manifest = D.build_manifest(seed=0, sigma=sigma)
    samples = D.gen_vqa_dataset(manifest, 32, seed=1)
    model = OmniModel(ModelConfig(vocab_size=len(manifest.vocab), d_model=32,
                                  n_layers=2, n_heads=2, enc_hidden=32,
                                  dtype="float64", init_scale=0.2), seed=0)
    batch = make_batches(samples, 8, manifest)[0]
    with T.no_grad():
        t_seq = model.assemble(batch.system_ids, batch.vision,
                               batch.text_query, batch.response, "text")
        teacher = model.forward(t_seq)[0].data
    seq = model.assemble(batch.system_ids, batch.vision, batch.audio_query,
                         batch.response, "audio")
    logits, _ = model.forward(seq)
    kd = loss_self_kd(teacher, logits, batch.mask)
    self_kl = loss_self_kd(logits.data.copy(), logits, batch.mask)
    print(f"  sigma={sigma:4.2f}  KL(teacher || student) = {float(kd.data):.4f}"
          f"   KL(student || student) = {float(self_kl.data):.2e}")

print("\nalpha sweep of the combined loss (same batch, sigma=0.5):")
manifest = D.build_manifest(seed=0, sigma=0.5)
samples = D.gen_vqa_dataset(manifest, 32, seed=1)
model = OmniModel(ModelConfig(vocab_size=len(manifest.vocab), d_model=32,
                              n_layers=2, n_heads=2, enc_hidden=32,
                              dtype="float64", init_scale=0.2), seed=0)
batch = make_batches(samples, 8, manifest)[0]
with T.no_grad():
    t_seq = model.assemble(batch.system_ids, batch.vision, batch.text_query,
                           batch.response, "text")
    teacher = model.forward(t_seq)[0].data
seq = model.assemble(batch.system_ids, batch.vision, batch.audio_query,
                     batch.response, "audio")
logits, _ = model.forward(seq)
sft = loss_sft(logits, batch.targets, batch.mask)
kd = loss_self_kd(teacher, logits, batch.mask)
for alpha in (0.0, 0.25, 0.5, 0.75, 1.0):
    total = loss_combined(kd, sft, alpha)
    print(f"  alpha={alpha:4.2f}  L = {float(total.data):.4f}")
print(f"  endpoints are exact: alpha=0 is L_SFT ({float(sft.data):.4f}), "
      f"alpha=1 is L_KD ({float(kd.data):.4f})")

print("\nboth KD modes on the same batch:")
for mode in ("token_kl", "gt_logratio"):
    val = loss_self_kd(teacher, logits, batch.mask, kd_mode=mode,
                       targets=batch.targets)
    print(f"  {mode:12s} {float(val.data):.4f}")
