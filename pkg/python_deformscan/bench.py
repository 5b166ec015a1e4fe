"""Chronométrage des noyaux principaux par taille de séquence."""

import logging
import time
from typing import Callable, Dict, List, Sequence

import numpy as np
import torch

from .gaussian import gdr_apply, gdr_weights, gkr
from .model import init_parameters
from .serialization import serialize
from .ssm import selective_scan_fn
from .tpff import TriPathBundle, TriPathFusion

logger = logging.getLogger(__name__)

DEFAULT_SIZES = (64, 128, 256)
BENCH_DIM = 16
BENCH_STATE = 4


def _best_time(fn: Callable[[], object], repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def run_bench(sizes: Sequence[int] = DEFAULT_SIZES, repeats: int = 3, seed: int = 0) -> List[Dict]:
    """Meilleur temps sur `repeats` exécutions, en secondes, pour chaque noyau et chaque taille."""
    rng = np.random.default_rng(seed)
    fusion = init_parameters(TriPathFusion(BENCH_DIM, groups=4), seed)
    records = []
    for n in sizes:
        centers = torch.from_numpy(rng.uniform(-1, 1, size=(n, 3)))
        features = torch.from_numpy(rng.standard_normal((n, BENCH_DIM)))
        delta_p = torch.from_numpy(rng.uniform(-0.05, 0.05, size=(n, 3)))
        delta_t = torch.from_numpy(rng.uniform(-1, 1, size=n))
        base = torch.arange(n)
        u = features[None]
        delta = torch.from_numpy(rng.standard_normal((1, n, BENCH_DIM)))
        A = -torch.from_numpy(rng.uniform(0.5, 2.0, size=(BENCH_DIM, BENCH_STATE)))
        B = torch.from_numpy(rng.standard_normal((1, n, BENCH_STATE)))
        C = torch.from_numpy(rng.standard_normal((1, n, BENCH_STATE)))
        bundle = TriPathBundle(u, u.flip(-1), u.flip(1))

        kernels = {
            "serialize": lambda: serialize(centers),
            "gkr": lambda: gkr(features, centers, delta_p, 3, 1.0),
            "gdr": lambda: gdr_apply(gdr_weights(base, delta_t, 0.2), features),
            "scan": lambda: selective_scan_fn(u, delta, A, B, C, delta_softplus=True),
            "tpff": lambda: fusion(bundle),
        }
        with torch.no_grad():
            for name, fn in kernels.items():
                seconds = _best_time(fn, repeats)
                logger.debug("bench %s n=%d: %.6f s", name, n, seconds)
                records.append({"kernel": name, "n": int(n), "seconds": seconds})
    return records
