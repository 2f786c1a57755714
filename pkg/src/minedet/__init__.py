"""Noise-tolerant training-mining for a miniature two-stage detector.

A synthetic detection world supplies images where a few instances per
category carry full box annotations (seeds) and the rest carry only
image-level category labels. The training-mining loop alternates between
retraining the detector and mining new pseudo-boxes from the weakly labeled
pool, with three mechanisms that keep annotation noise from poisoning
training: ensembled extra classification heads (the original heads train on
seed boxes only), background-loss masking on mined images, and a
source-detector distillation head that regularizes the shared feature
extractor.

The usual entry points:

- :func:`minedet.scenegen.generate_world` / :func:`minedet.scenegen.split_seed`
- :func:`minedet.trainer.train_source_detector` /
  :func:`minedet.trainer.run_training_mining`
- :func:`minedet.mining.mine_boxes`
- :func:`minedet.model.detect` for plain inference
- ``minedet`` console script (see :mod:`minedet.cli`)
"""

__version__ = "0.1.0"
