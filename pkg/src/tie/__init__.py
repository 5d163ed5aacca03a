"""tie: instruction-conditioned token-pair scoring for information extraction.

A sentence is scored as an |x| x |x| x K grid of span/link decisions, where
the K label channels come from the slots of a per-dataset instruction. The
trainer interleaves batches from multiple source datasets and gates each
layer's update on the sign of its gradient agreement with the previous
batch, then finetunes plainly on a target dataset.
"""

__version__ = "0.1.0"
