#!/usr/bin/env python3
"""
I2N File Utilities
输入文件校验、产物原子写入、哈希与溯源头
"""

import hashlib
import io
import json
import os
import re
import tempfile
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd

from utils.errors import I2NError

# CSV 产物首行: "# i2n config_hash=<hash> seed=<seed>"
PROVENANCE_RE = re.compile(r'^#\s*i2n\s+config_hash=(?P<hash>\S+)\s+seed=(?P<seed>-?\d+)\s*$')

FLOAT_FORMAT = '%.17g'


class InputError(I2NError):
    """输入文件缺失或不可读"""
    stage = 'ingest'


def require_file(path: Optional[Union[str, Path]], stage: str = 'ingest', what: str = 'input') -> Path:
    """
    确认输入文件存在

    Raises:
        InputError: code=MissingInput
    """
    if path is None or str(path) == '':
        raise InputError('MissingInput', f"未指定{what}文件", {'what': what}, stage=stage)
    path = Path(path)
    if not path.is_file():
        raise InputError('MissingInput', f"找不到{what}文件: {path}", {'path': str(path), 'what': what},
                         stage=stage)
    return path


def atomic_write_text(path: Union[str, Path], content: str) -> Path:
    """先写临时文件再 rename，避免中断时留下半截产物"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f'.{path.name}.', dir=str(path.parent))
    try:
        with os.fdopen(fd, 'w', encoding='utf-8', newline='\n') as f:
            f.write(content)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def sha256_file(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def provenance_line(config_hash: str, seed: int) -> str:
    return f"# i2n config_hash={config_hash} seed={int(seed)}\n"


def write_csv_artifact(path: Union[str, Path], frame: pd.DataFrame, config_hash: str, seed: int) -> Path:
    """写 CSV 产物：溯源注释行 + 表体，浮点按 %.17g 保证逐位往返"""
    buffer = io.StringIO()
    buffer.write(provenance_line(config_hash, seed))
    frame.to_csv(buffer, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
    return atomic_write_text(path, buffer.getvalue())


def read_provenance(path: Union[str, Path]) -> Optional[Tuple[str, int]]:
    """读取 CSV 产物首行的 (config_hash, seed)，没有溯源头时返回 None"""
    with open(path, 'r', encoding='utf-8') as f:
        first = f.readline().strip()
    match = PROVENANCE_RE.match(first)
    if not match:
        return None
    return match.group('hash'), int(match.group('seed'))


def read_csv_artifact(path: Union[str, Path], **kwargs) -> pd.DataFrame:
    """读取 CSV（跳过 # 注释行，浮点按 round_trip 解析）"""
    return pd.read_csv(path, comment='#', float_precision='round_trip', **kwargs)


def _json_default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"无法序列化为 JSON: {type(value).__name__}")


def dumps_json(payload: Any) -> str:
    return json.dumps(payload, indent=2, ensure_ascii=False, allow_nan=True, default=_json_default)


def write_json_artifact(path: Union[str, Path], payload: Dict[str, Any], config_hash: str, seed: int) -> Path:
    """写 JSON 产物，嵌入 config_hash 与 seed；None 写为 null"""
    body = {'config_hash': config_hash, 'seed': int(seed)}
    body.update(payload)
    return atomic_write_text(path, dumps_json(body) + '\n')


def read_json(path: Union[str, Path]) -> Dict[str, Any]:
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)
