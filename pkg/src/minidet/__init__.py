"""minidet: a desk-scale multi-prompt open-vocabulary detection toolbox.

Everything runs on a deterministic synthetic shape-world so that each
mechanism (contrastive multi-prompt training, decoupled inference, the
instance-detection post-processing cascade, the few-shot toolbox, the
data-engine selection and auto-labeling pipelines, and the three-protocol
evaluation suite) can be checked against an oracle or invariant.
"""

__version__ = "0.1.0"
