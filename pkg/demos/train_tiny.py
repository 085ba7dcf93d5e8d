"""
Training a small cascade
========================

A two-level model on 32 x 32 patches is fitted to eight pairs with corner
perturbations of up to 8 pixels.  The untrained model predicts the
identity, so its error starts at the identity baseline.  Held-out accuracy
needs thousands of pairs and far longer runs; this only shows the moving
parts.
"""
import time

import numpy as np

from localtrans.data import GenConfig, generate_pairs
from localtrans.network import LocalTrans, ModelConfig
from localtrans.tensor.core import set_default_dtype
from localtrans.train import TrainConfig, Trainer, evaluate

set_default_dtype(np.float32)
pairs = generate_pairs(GenConfig(patch_size=32, rho=8.0, margin=8, augment=False), 8, master_seed=0)

model = LocalTrans(ModelConfig(levels=2, channels=8, height=32, width=32))
before = evaluate(model, pairs)
print("untrained: %.2f px (identity baseline %.2f px)" % (before.mean, before.baseline_mean))

cfg = TrainConfig(steps=300, batch_size=8, lr=3e-3, lr_schedule="cosine", lr_min=3e-5)
trainer = Trainer(model, pairs, cfg)
t0 = time.perf_counter()


def report(t, loss):
    if t.step % 50 == 0:
        print(f"step {t.step:4d}  loss {np.mean(t.history.losses[-50:]):7.3f}  {time.perf_counter() - t0:5.0f}s")


trainer.run(report)

# evaluation uses the batch-norm running statistics, so it lags the training loss
after = evaluate(model, pairs, image_metrics=True)
print("trained: %.2f px, PSNR %.1f dB, SSIM %.3f" % (after.mean, after.psnr, after.ssim))
