"""Desk-scale laboratory for model-extraction attacks on sequential
recommenders and a gradient-based training-time defense.

Subsystems: interaction data (:mod:`grolab.seqdata`), a minimal
reverse-mode autodiff kernel (:mod:`grolab.ndiff`), toy sequence models
(:mod:`grolab.recmodels`), output-perturbation shields
(:mod:`grolab.shield`), the black-box extraction attacker
(:mod:`grolab.extraction`), the ranking-optimization defense core
(:mod:`grolab.grodefense`), leave-one-out metrics
(:mod:`grolab.evalmetrics`),
and the experiment harness plus CLI (:mod:`grolab.harness`,
:mod:`grolab.cli`).
"""

__version__ = "0.1.0"
