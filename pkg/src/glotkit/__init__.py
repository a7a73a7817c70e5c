"""Analysis-synthesis toolkit for glottal closure instant detection.

Submodules: dsp (signal primitives), lf_model (glottal pulses),
corpus (dataset generation/persistence), autodiff (tensors, ops,
optimizer), models (analyzer + synthesizer), losses (the five training
losses), trainer (two-step training), gci_eval (extraction + metrics),
cli (command-line interface).
"""

from . import autodiff, cli, corpus, dsp, gci_eval, lf_model, losses, \
    models, trainer

__version__ = "0.1.0"

__all__ = ["autodiff", "cli", "corpus", "dsp", "gci_eval", "lf_model",
           "losses", "models", "trainer", "__version__"]
