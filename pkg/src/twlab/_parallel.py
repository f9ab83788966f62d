import os
from concurrent.futures import ThreadPoolExecutor


def resolve_threads(threads=None):
    if threads is None:
        threads = os.environ.get("TWL_THREADS", "1")
    threads = int(threads)
    if threads < 1:
        raise ValueError("threads: must be >= 1")
    return threads


def run_chunks(fn, n, threads=None):
    """Call ``fn(lo, hi)`` over a contiguous split of ``range(n)``.

    The kernels release the GIL and write disjoint rows, so the result does
    not depend on the number of threads.
    """
    threads = min(resolve_threads(threads), max(n, 1))
    if threads == 1 or n == 0:
        fn(0, n)
        return
    bounds = [n * k // threads for k in range(threads + 1)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(fn, lo, hi) for lo, hi in zip(bounds, bounds[1:])]
        for f in futures:
            f.result()
