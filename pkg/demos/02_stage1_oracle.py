"""Stage 1: the latent autoencoder and its oracle ceiling.

Trains a small autoencoder for a couple of minutes' worth of desk CPU,
then decodes real (encoder-produced) latents back to tokens. That oracle
evaluation is the ceiling every later refinement stage is judged against:
no refined latent can read better than the real one.
"""

import numpy as np

from draftflow import autoencoder as AE
from draftflow import corpus as C
from draftflow.tensor import no_grad

SEED = 21
corpus = C.generate_corpus(seed=SEED, count=900)
train, val = corpus[:800], corpus[800:]
vocab = C.GrammarConfig().vocabulary()

cfg = AE.AEConfig(vocab_size=vocab.size, d=16, seed=SEED)
print(f"training stage 1: d={cfg.d}, {len(train)} examples, 250 steps")
model, history = AE.train_stage1(
    train, cfg, AE.StageOneTrainConfig(steps=250, val_count=100, seed=SEED))
for row in history:
    print(f"  step {row['step']:4d}  train ce {row['train_loss']:.3f}  "
          f"val ce {row['val_loss']:.3f}")

# the model froze itself at the end of training
print(f"\nfrozen: {model.frozen}, checksum {model.checksum()[:12]}")

rep = AE.oracle_eval(model, val)
print(f"oracle on {len(val)} held-out stories: ce={rep.ce:.3f}  "
      f"p_target={rep.p_target:.3f}  top1={rep.top1:.3f}")

# latents live on a fixed grid of n slots, each one a d-vector; the
# encoder normalizes per slot, so norms sit near sqrt(d)
ids, mask = AE.batchify(val[:8], cfg.m, cfg.n)
with no_grad():
    z = model.encode_array(ids).data
print(f"latent grid {z.shape}, slot norm mean "
      f"{np.linalg.norm(z, axis=-1).mean():.2f} (sqrt(d)={np.sqrt(cfg.d):.2f})")

# round trip one story through the latent space
with no_grad():
    tokens = model.decode_array(z).data.argmax(axis=-1)
row = tokens[0, cfg.m:]
cut = list(row).index(C.EOS) if C.EOS in row else len(row)
print(f"\nstory:   {val[0].raw_text[1]}")
print(f"decoded: {vocab.decode(row[:cut])}")
