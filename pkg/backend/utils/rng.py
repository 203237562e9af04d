#!/usr/bin/env python3
"""
计数器式随机数流

每个随机单元（单元格、块、复制、配对）用 (seed, 阶段标签, *key) 单独建流，
结果与调度顺序、线程数无关；不同阶段的键空间互不重叠。
"""

from enum import IntEnum

import numpy as np


class Stage(IntEnum):
    """随机流的阶段标签"""
    INGEST = 1
    SAMPLE = 2
    CLOSURE = 3
    BOOTSTRAP = 4
    FACTORY = 5
    WEIGHTS = 6
    SPECTRAL = 7
    SYNTHETIC = 8


def stream(seed: int, *key: int) -> np.random.Generator:
    """返回 (seed, *key) 对应的 Philox 生成器"""
    entropy = [int(seed)] + [int(k) for k in key]
    if any(v < 0 for v in entropy):
        raise ValueError(f"随机流的种子与键必须非负: {entropy}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
