"""ricekit: desk-scale multimodal lesion classification experiments.

Synthetic co-registered cohorts (post-surgery MRI, follow-up MRI, radiation
dose map), a from-scratch 3D residual classifier with verified gradients,
channel-combination ablations with fixed subject-level folds, majority-vote
test scoring, and occlusion-sensitivity interpretability maps.
"""

__version__ = "0.1.0"
