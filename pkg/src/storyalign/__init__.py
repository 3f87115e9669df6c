"""Aligning long articles with unordered image sets on top of frozen
embeddings: contrastive objectives on a minimal autodiff tape, projection
head training, corpus curation, retrieval evaluation, and article
illustration.

Submodules load lazily so the CLI can pin thread counts before numpy
initializes.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "autodiff",
    "cli",
    "curation",
    "dataio",
    "errors",
    "illustrate",
    "kernels",
    "objectives",
    "retrieval_eval",
    "sentences",
    "synth",
    "trainer",
)

__all__ = list(_SUBMODULES) + ["__version__"]


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(__all__)
