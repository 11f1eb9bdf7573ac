"""End to end at toy scale: corpus, a short DSGAN run, sampling, label
cleanup and the evaluation metrics.  Takes about a minute on one CPU.

    python demos/corpus_to_samples.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from sganlab.dataform import (CorpusConfig, PatchSpec, SectionStack, make_synthetic_corpus, sample_patches,
                              save_stack, split_train_val)
from sganlab.labelops import EditPolicy, edit_labels
from sganlab.metrics import (chi_squared_table, global_stats, gradient_attention, label_share, seg_eval,
                             support_size, torch_segmenter)
from sganlab.trainer import TrainConfig, sample_pipeline, train, train_reconstructor

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
stack = make_synthetic_corpus(CorpusConfig(sections=6), seed=1)
train_s, val_s = split_train_val(stack)
print(f"corpus: {len(train_s)} train / {len(val_s)} val sections of {stack.shape}")

cfg = TrainConfig(variant="dsgan", crop=64, label_factor=16, batch_size=4, max_steps=150,
                  lambda_reg=1.0, lambda_cyc=1.0, seed=0)
ckpt, report = train(cfg, train_s, out_dir=out / "run")
last = report.records[-1]
print(f"trained {report.final_step} steps; last D_x real/fake terms "
      f"{last['x/d/real']:.3f} / {last['x/d/fake']:.3f}")

pairs = sample_pipeline(ckpt, 4, 8, seed=3)
fractions = np.bincount(np.concatenate([l.ravel() for l, _ in pairs]), minlength=3) / sum(l.size for l, _ in pairs)
print("class fractions of generated labels (bg, membrane, mito):", np.round(fractions, 3))

# cleanup: drop dangling membranes and concave mitochondria
cleaned = [edit_labels(l, EditPolicy(mito_policy="remove_concave")) for l, _ in pairs]
print("pixels changed by edit:", [int((a != l).sum()) for a, (l, _) in zip(cleaned, pairs)])
save_stack(SectionStack(np.stack([x for _, x in pairs]), np.stack(cleaned)), out / "samples")

# an independent segmenter fitted on real pairs scores the synthetic pairs
scorer = torch_segmenter(train_reconstructor(train_s, steps=150, seed=9))
real = sample_patches(val_s, PatchSpec(64, 4, 5))
print(f"mean IU real {seg_eval(scorer, real).mean_iu:.1f}, synthetic {seg_eval(scorer, pairs).mean_iu:.1f}")
print("chi2 vs training stats:", {k: round(v, 3) for k, v in
                                  chi_squared_table(global_stats(train_s.labels), global_stats(cleaned)).items()})

share = np.mean([label_share(gradient_attention(ckpt.nets["D_x"], l, x)) for l, x in real])
print(f"share of D_x input gradient on the label channels: {share:.3f}")

est = support_size(lambda s: sample_pipeline(ckpt, 2, 1, seed=s)[0][0], range(4, 41, 4), runs=5,
                   early_exit=True)
print("support estimate:", est.estimate, "(lower bound)" if est.lower_bound else f"from s* = {est.s_star}")
