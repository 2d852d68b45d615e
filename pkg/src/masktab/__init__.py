"""Missingness-aware tabular pretraining toolkit.

Tabular rows are encoded as per-feature tokens with dedicated embeddings for
masked and naturally missing cells, trained with a twin-path hybrid objective
(masked reconstruction + supervised task), an optional mixture-of-experts
reconstruction head, and teacher-to-student embedding distillation.

The MASKTAB_THREADS environment variable bounds BLAS worker threads.  It
defaults to 1 so that repeated runs with the same seed produce bit-identical
artifacts; it must be set before numpy is first imported to take effect.
"""

import os as _os

_threads = _os.environ.setdefault("MASKTAB_THREADS", "1")
for _var in (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
):
    _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
