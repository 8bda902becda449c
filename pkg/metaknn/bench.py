"""Wall-clock comparison of teacher-forced scoring with and without retrieval."""

__all__ = ["bench"]

import logging
import time
from collections.abc import Sequence

import numpy as np
import pandas as pd

from metaknn.datastore import Datastore
from metaknn.prediction import Hyper, Projection, Variant, score_sequence

logger = logging.getLogger(__name__)


def _per_token_seconds(proj, ds, hyper, queries, variant, repeats) -> list[float]:
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        score_sequence(proj, ds, hyper, queries, variant)
        times.append((time.perf_counter() - start) / len(queries))
    return times


def bench(
    ds: Datastore,
    proj: Projection,
    hyper: Hyper,
    queries: Sequence[tuple[np.ndarray, int]],
    repeats: int = 3,
) -> pd.DataFrame:
    """
    Time per-token scoring of the plain projection and of the interpolated kNN variant.

    Each variant is run once untimed to warm caches, then ``repeats`` timed passes over
    ``queries``; the median per-token time is reported. With ``hyper.lam == 0`` the interpolated
    variant skips retrieval and runs the same code path as the plain projection.

    Parameters
    ----------
    ds : Datastore
        Datastore to retrieve from.
    proj : Projection
        Output projection.
    hyper : Hyper
        Retrieval settings of the interpolated variant.
    queries : sequence of (np.ndarray, int)
        Teacher-forced steps.
    repeats : int, optional
        Timed passes per variant, at least 3.

    Returns
    -------
    pd.DataFrame
        Indexed by variant (``nmt``, ``knn-mt``) with columns ``median_s_per_token``,
        ``repeats`` and ``relative_speed`` (plain time over variant time; 1.0 for ``nmt``).
    """
    if repeats < 3:
        raise ValueError(f"repeats {repeats} must be at least 3")
    if len(queries) == 0:
        raise ValueError("bench needs at least one query")
    proj.check_compatible(ds)

    medians = {}
    for variant in (Variant.NMT, Variant.KNN_MT):
        score_sequence(proj, ds, hyper, queries, variant)
        times = _per_token_seconds(proj, ds, hyper, queries, variant, repeats)
        medians[variant.value] = float(np.median(times))
        logger.debug("%s per-token times: %s", variant.value, times)

    report = pd.DataFrame(
        {
            "median_s_per_token": medians,
            "repeats": {name: repeats for name in medians},
            "relative_speed": {name: medians[Variant.NMT.value] / value for name, value in medians.items()},
        }
    )
    report.index.name = "variant"
    logger.info("kNN-MT runs at %.2fx the plain projection speed", report.loc[Variant.KNN_MT.value, "relative_speed"])
    return report
