"""Draft corruption versus decoder recoverability.

The start model (DraftPrior) encodes a rough draft of the continuation,
mixes it with Gaussian noise, and predicts a start latent for refinement.
This script corrupts drafts by dropping target tokens and measures how
well the frozen decoder still reads the predicted start latents. More
corruption means a less informative draft, so recoverability must fall.
"""

from draftflow import autoencoder as AE
from draftflow import corpus as C
from draftflow import draftprior as DP
from draftflow import diagnostics as D

SEED = 33
corpus = C.generate_corpus(seed=SEED, count=900)
train, val = corpus[:800], corpus[800:]
vocab = C.GrammarConfig().vocabulary()

print("training stage 1 (d=16, 250 steps) ...")
ae, _ = AE.train_stage1(
    train, AE.AEConfig(vocab_size=vocab.size, d=16, seed=SEED),
    AE.StageOneTrainConfig(steps=250, val_count=100, seed=SEED))

print("training the denoising start model (400 steps) ...")
prior, history, curve = DP.train_draftprior(
    ae, train,
    DP.DraftPriorConfig(d=16, m=ae.config.m, n=ae.config.n),
    DP.DraftPriorTrainConfig(steps=400, val_count=100, seed=SEED))
print(f"  final train loss {history[-1]['loss']:.3f}; clean-draft "
      f"p_target {curve[0]['p_target']:.3f}")

# the corruption curve: evaluate the same validation stories at rising
# token-dropout levels, everything else held fixed
rows = DP.corruption_curve(ae, prior, val, (0.0, 0.03, 0.05, 0.10, 0.30),
                           seed=SEED)
print(f"\n{'dropout':>8} {'ce':>8} {'p_target':>9} {'top1':>7}")
for r in rows:
    print(f"{r['dropout']:8.2f} {r['ce']:8.3f} {r['p_target']:9.3f} "
          f"{r['top1']:7.3f}")

# sanity anchors: real latents from above, pure-noise drafts from below
oracle = AE.oracle_eval(ae, val)
print(f"\noracle (real latents): ce {oracle.ce:.3f}  "
      f"p_target {oracle.p_target:.3f}")
blank, _, ids, mask = DP.start_latents(ae, prior, val, 1.0, SEED)
noise = D.recoverability(ae, blank, ids, mask)
print(f"fully dropped drafts:  ce {noise['ce']:.3f}  "
      f"p_target {noise['p_target']:.3f}")
