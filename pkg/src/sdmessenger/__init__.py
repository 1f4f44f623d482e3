"""Semi-supervised segmentation with two-way labeled/unlabeled knowledge delivery.

Modules: ``datagen`` (synthetic corpora), ``dataio`` (paired batches),
``l2u`` (patch copy-paste), ``model`` (messenger encoder and decoder),
``training``, ``metrics``, ``config`` and ``cli``.
"""

__version__ = "0.1.0"
