"Rates of change of colexification patterns on language phylogenies."

__version__ = "0.1.0"

__all__ = [
    "config",
    "trees",
    "ctmc",
    "likelihood",
    "tables",
    "model",
    "sampler",
    "diagnostics",
    "selection",
    "simval",
    "negbin",
    "ingest",
]
