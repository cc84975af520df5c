"""Dynamic functional-connectivity graphs with masked-autoencoder pretraining.

Pipeline: multivariate time-series -> sliding-window correlation graphs ->
self-supervised encoder pretraining (masked spatial reconstruction plus
temporal reconstruction from flanking snapshots) -> fine-tuned
classification / regression heads, with a synthetic benchmark generator,
ablation harness and CLI.
"""

__version__ = "0.1.0"
