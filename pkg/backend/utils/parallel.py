#!/usr/bin/env python3
"""
并行工具：joblib 线程池，结果保持输入顺序
"""

import os
from typing import Any, Callable, Iterable, List

from joblib import Parallel, delayed


def resolve_threads(threads: int) -> int:
    """0 或负数表示使用全部核心"""
    if threads and threads > 0:
        return int(threads)
    return os.cpu_count() or 1


def run_ordered(func: Callable[..., Any], items: Iterable[Any], threads: int = 1) -> List[Any]:
    """
    对 items 逐个调用 func，返回与输入同序的结果列表

    线程后端；调用方按返回顺序归约，结果与线程数无关。
    """
    items = list(items)
    n_jobs = resolve_threads(threads)
    if n_jobs == 1 or len(items) <= 1:
        return [func(item) for item in items]
    return Parallel(n_jobs=n_jobs, prefer='threads')(delayed(func)(item) for item in items)
