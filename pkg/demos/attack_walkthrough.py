"""
Two-stage attack on a small surrogate
=====================================

Train a detector on a tiny synthetic corpus, push one fake across the
decision boundary (stage 1) and then pull the perturbation under the
masking threshold while keeping the Real label (stage 2).
"""

import numpy as np

from dcaptcha.attack import AttackConfig, stage1_evade, stage2_imperceptible
from dcaptcha.corpus import SyntheticCorpusSpec, generate
from dcaptcha.features import FeatureSpec
from dcaptcha.models import Dataset, ModelConfig, build_model, predict_labels, train
from dcaptcha.psychoacoustics import global_masking_threshold

corpus = generate(SyntheticCorpusSpec(n_per_task=40, duration_s=1.0), seed=0)
fit = corpus.select(split=["train", "val"])
data = Dataset(corpus.matrix(fit), np.array([c.label for c in fit]))

model, hist = train(build_model(ModelConfig("compact_conv", FeatureSpec("lfcc"), (8, 16), seed=1)),
                    data, epochs=10, batch_size=16, learning_rate=1e-2)
print("train F1 per epoch:", np.round(hist.train_f1, 3))

# a fake the detector catches
fakes = corpus.select(fake=True, split="test")
caught = [c for c in fakes if predict_labels(model, c.samples[None])[0] == 1]
x = caught[0].buffer()
theta = global_masking_threshold(x)

cfg = AttackConfig(stage2_iters=60)
r1 = stage1_evade(model, x, cfg, theta)
print("stage 1 success:", r1.stage1_success,
      "max |delta| %.4f" % np.abs(r1.perturbation.samples).max(),
      "violations %.3f" % r1.perceptual.violation_fraction)

r2 = stage2_imperceptible(model, x, r1, theta, cfg)
print("stage 2 label:", r2.final_prediction.label,
      "violations %.3f" % r2.perceptual.violation_fraction,
      "best iterate", r2.best_index)
