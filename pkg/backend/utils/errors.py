#!/usr/bin/env python3
"""
I2N 异常基类

每个阶段模块在自己的文件里派生子类（IngestError、GravityError ...），
CLI 统一捕获 I2NError 并输出机器可读的错误 JSON。
"""

from typing import Any, Dict, Optional


class I2NError(Exception):
    """I2N 错误基类"""

    stage: str = 'i2n'

    def __init__(self, code: str, message: str, details: Optional[Dict[str, Any]] = None,
                 stage: Optional[str] = None):
        super().__init__(message)
        self.code = code
        self.message = message
        self.details = details or {}
        if stage is not None:
            self.stage = stage

    def to_dict(self) -> Dict[str, Any]:
        return {
            'stage': self.stage,
            'code': self.code,
            'message': self.message,
            'details': self.details,
        }

    def __str__(self) -> str:
        return f"[{self.stage}:{self.code}] {self.message}"


class ConfigError(I2NError):
    """配置文件错误"""
    stage = 'config'
