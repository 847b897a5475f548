"""Few-shot classification head for frozen multi-block feature maps.

Library layout:

* ``autodiff``  float64 tensors + reverse-mode tape + gradient checking
* ``fmpack``    the on-disk feature-map pack format (manifest + tensors)
* ``episodes``  task sampling and the synthetic pack generator
* ``head``      attention pooling, cross-attention prototypes, block logits
* ``adapt``     per-task training, evaluation, NCC / cosine baselines
* ``stats``     confidence intervals, paired t-tests, report rendering
* ``cli``       the ``mivhead`` command
"""

__version__ = "0.1.0"
