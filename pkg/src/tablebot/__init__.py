"""tablebot: instruction-following behavioral cloning on a toy tabletop.

A from-scratch float32 autodiff tensor library drives a jointly-encoded
vision-language transformer and a history-conditioned policy transformer,
trained on scripted expert demonstrations from a deterministic multi-camera
simulator, with an ablation harness and closed-loop evaluation.
"""

__version__ = "0.1.0"
