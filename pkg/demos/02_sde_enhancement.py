"""Score-based enhancement of 1-D signals with the mean-reverting SDE.

Clean waveforms are smoothed and buried in white noise.  The forward process
drifts from the clean signal towards the corrupted one while adding noise, so
the reverse process starts near the corrupted signal and drifts back.  First
the exact score is used (the clean signal is known), which isolates the
sampler; then a small score network is trained on pairs and used instead.

Run with ``python3 demos/02_sde_enhancement.py``.
"""

import numpy as np

from coupled_diffusion.ouve_sde import (
    OuveParams,
    corrupt_signal,
    gaussian_score,
    pc_sample,
    toy_signals,
    train_score_net,
)

p = OuveParams(gamma=1.5, sigma_min=0.05, sigma_max=0.5)
rng = np.random.default_rng(0)


def mse(a, b):
    return float(np.mean((a - b) ** 2))


###############################################################################
# Exact score: how much of the corruption the sampler can undo on its own.

x0 = toy_signals(5, rng=rng)
x_cor = corrupt_signal(x0, rng)
for i in range(len(x0)):
    out = pc_sample(gaussian_score(x0[i], p), x_cor[i], steps=50, snr=0.5, p=p,
                    rng=np.random.default_rng(i))
    print(f"signal {i}: mse {mse(x_cor[i], x0[i]):.4f} -> {mse(out, x0[i]):.4f}")

###############################################################################
# Error falls with the first few steps and then levels off at the floor set by
# sigma_min.  Averaged over many copies, since one draw is dominated by noise.

copies = np.repeat(x_cor[:1], 200, axis=0)
score = gaussian_score(x0[0], p)
for steps in (5, 20, 50, 200):
    out = pc_sample(score, copies, steps, 0.5, p, np.random.default_rng(1))
    print(f"steps={steps:3d}: mean mse {mse(out, x0[0]):.4f}")

###############################################################################
# Learned score.  Denoising score matching on 512 pairs, then the same sampler.

train0 = toy_signals(512, rng=rng)
train_cor = corrupt_signal(train0, rng)
net, losses = train_score_net(train0, train_cor, p, steps=1500, seed=0)
print(f"score loss: first 100 steps {np.mean(losses[:100]):.3f}, last 100 {np.mean(losses[-100:]):.3f}")

test0 = toy_signals(100, rng=rng)
test_cor = corrupt_signal(test0, rng)
out = pc_sample(net, test_cor, 50, 0.5, p, np.random.default_rng(2))
before = ((test_cor - test0) ** 2).mean(1)
after = ((out - test0) ** 2).mean(1)
print(f"learned score on 100 held-out signals: mse {before.mean():.4f} -> {after.mean():.4f}, "
      f"{(after < before).mean():.0%} improved")
