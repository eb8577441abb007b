"""Unrolled reconstruction network with a shared-encoder segmentation head.

A scaled-down run (32x32 phantoms, narrow network, few epochs) so it finishes
in a couple of minutes; the acceptance tests use the full-size settings.
"""
import numpy as np

from pmrilab.metrics import dice, predict_labels, snr_db
from pmrilab.phantom import AcquisitionConfig, PhantomSpec, make_dataset, sos, zero_filled
from pmrilab.tensors_io import RunConfig
from pmrilab.unrolled import build_model, predict, train

acq = AcquisitionConfig(noise=0.01, accel=4.0)
spec = PhantomSpec(32, 32)
train_set = [make_dataset(s, acq, spec) for s in range(12)]
test_set = [make_dataset(500 + s, acq, spec) for s in range(4)]

cfg = RunConfig(width=8, unrolls=3, lam=1.0, lr=1e-3, epochs=40, alpha=0.01)


def report(model):
    s, d = [], []
    for ds in test_set:
        gamma, probs = predict(ds, model)
        s.append(snr_db(sos(gamma), ds.reference))
        if probs is not None:
            labels = predict_labels(probs)
            d.append(np.mean([dice(labels, ds.labels, c) for c in (1, 2, 3)]))
    return np.mean(s), (np.mean(d) if d else None)


zf = np.mean([snr_db(sos(zero_filled(ds)), ds.reference) for ds in test_set])
print(f"zero-filled: {zf:.2f} dB")

model = build_model("joint", coils=4, width=cfg.width, unrolls=cfg.unrolls, lam=cfg.lam)
print("parameters:", model.parameter_count(),
      {g: model.parameter_count(g) for g in ("enc", "rec", "seg")})


def progress(epoch, loss):
    if (epoch + 1) % 10 == 0:
        print(f"  epoch {epoch + 1}: loss {loss:.3f}")


_, result = train(train_set, model, cfg, progress)
snr, d = report(model)
print(f"joint model: {snr:.2f} dB, mean Dice {d:.3f}")

# Few-shot: only 10% of the training sets keep their labels. The segmentation
# decoder sees gradients only on those steps; the shared encoder still learns
# from every reconstruction loss.
few = build_model("joint", coils=4, width=cfg.width, unrolls=cfg.unrolls, lam=cfg.lam)
_, result = train(train_set, few, cfg.replace(labelled_fraction=0.1))
snr, d = report(few)
print(f"few-shot (labelled {result.labelled_ids}): {snr:.2f} dB, mean Dice {d:.3f}")
