"""
Reference hyper-parameters, search grids and file-format constants for the metaknn package.
"""

# Retrieval settings selected per domain, keyed by metric. Values are (k, lambda, temperature).
KNN_HYPER = {
    "ip": {
        "it": (8, 0.6, 20.0),
        "law": (4, 0.8, 10.0),
        "medical": (4, 0.7, 20.0),
        "koran": (16, 0.8, 30.0),
        "iwslt": (32, 0.5, 20.0),
    },
    "l2": {
        "it": (8, 0.7, 10.0),
        "law": (4, 0.8, 10.0),
        "medical": (4, 0.8, 10.0),
        "koran": (16, 0.8, 100.0),
        "iwslt": (32, 0.5, 50.0),
    },
}

# Learning rates selected for explicit OPL fine-tuning by validation perplexity.
OPL_LEARNING_RATES = {
    "it": 4e-3,
    "law": 6e-3,
    "medical": 6e-3,
    "koran": 2e-3,
    "iwslt": 1e-3,
}

DEFAULT_DOMAIN = "it"

KNN_GRID_K = (2, 4, 8, 16, 32)
KNN_GRID_LAMBDA = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
KNN_GRID_TEMPERATURE = (5.0, 10.0, 20.0, 50.0, 100.0, 150.0, 200.0)

LR_BASES = (1, 2, 3, 4, 5, 6, 7, 8, 9)
LR_EXPONENTS = (-1, -2, -3, -4)
ALPHA_GRID = (0.0, 0.01, 0.05, 0.1, 0.5, 1.0, 5.0, 10.0)

# Validation interval of full-data fine-tuning, in optimizer steps.
EVAL_EVERY = 50

# Word buckets by domain-specificity gamma = f_id / f_gd: [0,1), [1,2), [2,5), [5,inf).
GAMMA_EDGES = (1.0, 2.0, 5.0)
GAMMA_LABELS = ("0~1", "1~2", "2~5", "5~")

# Word buckets by in-domain frequency rank percentage: top 1%, 1~5%, 5~20%, 20~100%.
FREQUENCY_EDGES = (1.0, 5.0, 20.0)
FREQUENCY_LABELS = ("top 1%", "1~5%", "5~20%", "20~100%")

DATASTORE_MAGIC = b"KNDS"
CONTEXT_MAGIC = b"KNCP"
FORMAT_VERSION = 1
SENTINEL_TOKEN = 0xFFFFFFFF

# Process exit codes of the command line interface.
EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_FORMAT = 4
EXIT_NUMERIC = 5


def default_hyper(metric: str = "ip", domain: str = DEFAULT_DOMAIN) -> tuple[int, float, float]:
    """
    Look up the retrieval settings of a domain.

    Parameters
    ----------
    metric : str
        ``"ip"`` or ``"l2"``.
    domain : str, optional
        Domain name, case insensitive. Unknown domains fall back to the IT settings.

    Returns
    -------
    tuple of (int, float, float)
        ``(k, lambda, temperature)``.
    """
    table = KNN_HYPER[metric.lower()]
    return table.get(domain.lower(), table[DEFAULT_DOMAIN])


def default_lr_grid() -> list[float]:
    """Return the 36 learning rates of the OPL fine-tuning search, base-major."""
    return [float(f"{base}e{exponent}") for exponent in LR_EXPONENTS for base in LR_BASES]
