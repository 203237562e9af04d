#!/usr/bin/env python3
"""
I2N YAML Utilities
运行清单 (manifest.yaml) 的生成与读取
"""

from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import yaml


class ManifestDumper(yaml.SafeDumper):
    """
    清单专用 Dumper
    列表缩进、顶级键之间空行
    """

    def increase_indent(self, flow: bool = False, indentless: bool = False):
        return super().increase_indent(flow, False)

    def write_line_break(self, data: Optional[str] = None) -> None:
        super().write_line_break(data)
        # 在顶级键之间添加空行
        if len(self.indents) == 1:
            super().write_line_break()


def clean_yaml_output(yaml_content: str) -> str:
    """
    清理 YAML 输出：去行尾空格，合并连续空行
    """
    lines = [line.rstrip() for line in yaml_content.split('\n')]

    result = []
    prev_empty = False
    for line in lines:
        is_empty = not line.strip()
        if is_empty and prev_empty:
            continue
        result.append(line)
        prev_empty = is_empty

    return '\n'.join(result)


def to_plain(value: Any) -> Any:
    """
    递归地把 numpy 标量/数组、Path、tuple 转成可序列化的内置类型，并丢弃 None
    """
    if isinstance(value, dict):
        return {str(k): to_plain(v) for k, v in value.items() if v is not None}
    if isinstance(value, (list, tuple)):
        return [to_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [to_plain(v) for v in value.tolist()]
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, Path):
        return str(value)
    return value


def dump_manifest(manifest: Dict[str, Any], add_header: bool = True) -> str:
    """
    将运行清单转换为 YAML 字符串

    Args:
        manifest: 清单字典（config / config_hash / seed / stages / artifacts）
        add_header: 是否添加生成信息头

    Returns:
        YAML 格式的字符串（不含时间戳，同配置同种子的两次运行逐字节一致）
    """
    yaml_content = yaml.dump(
        to_plain(manifest),
        Dumper=ManifestDumper,
        default_flow_style=False,
        sort_keys=False,
        allow_unicode=True,
        indent=2,
        width=float('inf')
    )
    yaml_content = clean_yaml_output(yaml_content)

    if add_header:
        header = """# Generated by io2net (I2N)
#
# 运行清单：配置、配置哈希、随机种子以及各阶段产物的 SHA-256
#
"""
        yaml_content = header + yaml_content

    return yaml_content


def load_manifest(path: Union[str, Path]) -> Dict[str, Any]:
    """读取运行清单，文件不存在时返回空字典"""
    path = Path(path)
    if not path.exists():
        return {}
    with open(path, 'r', encoding='utf-8') as f:
        data = yaml.safe_load(f)
    return data or {}


def represent_str(dumper, data):
    """
    自定义字符串表示器
    多行字符串使用块样式，含特殊字符时加双引号
    """
    if '\n' in data:
        return dumper.represent_scalar('tag:yaml.org,2002:str', data, style='|')

    special_chars = [':', '#', '{', '}', '[', ']', ',', '&', '*', '?', '|', '<', '>', '=', '!', '%', '@', '`', '"', "'"]
    if any(c in data for c in special_chars) or data.startswith(('true', 'false', 'yes', 'no', 'on', 'off', 'null')):
        return dumper.represent_scalar('tag:yaml.org,2002:str', data, style='"')

    return dumper.represent_scalar('tag:yaml.org,2002:str', data)


def represent_float(dumper, data):
    """浮点数使用 repr，保证重新读取后逐位一致"""
    if data != data:
        return dumper.represent_scalar('tag:yaml.org,2002:float', '.nan')
    if data in (float('inf'), float('-inf')):
        return dumper.represent_scalar('tag:yaml.org,2002:float', '.inf' if data > 0 else '-.inf')
    return dumper.represent_scalar('tag:yaml.org,2002:float', repr(data))


ManifestDumper.add_representer(str, represent_str)
ManifestDumper.add_representer(float, represent_float)
