"""Desk-scale video try-on diffusion lab.

A small numpy library that builds a conditioned video diffusion
transformer end to end: garment-aware spatiotemporal rotary position
embeddings, dual cross-attention garment conditioning, mask-aware
denoising training, deterministic ODE sampling, and few-step student
distillation — all on a procedurally generated toy try-on dataset, with
hand-written backward passes throughout.

Submodules are imported lazily so the command-line entry point can pin
BLAS thread counts before numpy loads.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "attention",
    "cli",
    "conditioning",
    "config",
    "container",
    "data",
    "diffusion",
    "distill",
    "errors",
    "metrics",
    "model",
    "rope",
    "tensor_ops",
    "train",
)


def __getattr__(name):
    if name in _SUBMODULES:
        module = importlib.import_module(f"{__name__}.{name}")
        globals()[name] = module
        return module
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
