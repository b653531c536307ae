"""Seed fan-out and runtime helpers.

A single master seed deterministically spawns independent generator
streams keyed by string labels, so no module ever touches ambient
entropy and parallel pieces of an experiment stay reproducible.
"""

import hashlib

import numpy as np


def limit_blas_threads(n=1):
    """Pin BLAS thread pools; the workload is many tiny factorizations.

    Multi-threaded BLAS spends more time synchronizing than computing on
    the small matrices used here (it costs a factor of ~4 wall clock on
    a two-core box), so experiment entry points call this once.
    """
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(limits=n)
    except ImportError:  # pragma: no cover
        pass


def substream(master_seed, *labels):
    """Return a ``numpy.random.Generator`` derived from (seed, labels).

    The same (master_seed, labels) pair always yields the same stream;
    distinct labels yield statistically independent streams.
    """
    digest = hashlib.sha256(
        ("/".join(str(x) for x in labels)).encode("utf-8")
    ).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    seq = np.random.SeedSequence([int(master_seed) & 0xFFFFFFFF, *words])
    return np.random.default_rng(seq)
