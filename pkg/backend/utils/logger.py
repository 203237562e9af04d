#!/usr/bin/env python3
"""
I2N 日志工具模块 - 生产级日志配置
使用标准 logging 模块，控制台输出 + 可选的轮转文件日志
"""

import sys
import logging
import logging.handlers
from pathlib import Path
from typing import Optional, Union


class I2NLogger:
    """I2N 日志管理器 - 单例模式

    首次创建时只挂控制台处理器；CLI 读取配置后再调用 configure()
    追加 i2n.log / i2n.error.log 两个轮转文件。
    """

    _instance = None
    _initialized = False

    def __new__(cls, *args, **kwargs):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __init__(self,
                 name: str = "I2N",
                 level: int = logging.INFO,
                 max_bytes: int = 10 * 1024 * 1024,  # 10MB
                 backup_count: int = 5):
        if I2NLogger._initialized:
            return

        self.name = name
        self.level = level
        self.max_bytes = max_bytes
        self.backup_count = backup_count
        self.log_dir: Optional[Path] = None

        self._setup_logger()
        I2NLogger._initialized = True

    def _formatter(self) -> logging.Formatter:
        return logging.Formatter(
            '%(asctime)s [%(levelname)s] %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        )

    def _setup_logger(self):
        """配置日志记录器"""
        self.logger = logging.getLogger(self.name)
        self.logger.setLevel(self.level)
        self.logger.propagate = False

        # 避免重复添加处理器
        if self.logger.handlers:
            return

        console_handler = logging.StreamHandler(sys.stdout)
        console_handler.setLevel(self.level)
        console_handler.setFormatter(self._formatter())
        self.logger.addHandler(console_handler)

    def configure(self, log_dir: Optional[Union[str, Path]] = None, level: Optional[int] = None):
        """追加文件日志并调整级别

        Args:
            log_dir: 日志目录，None 表示只输出到控制台
            level: 日志级别
        """
        if level is not None:
            self.set_level(level)

        if log_dir is None:
            return
        log_dir = Path(log_dir)
        if self.log_dir is not None and self.log_dir == log_dir:
            return

        # 切换目录时先移除旧的文件处理器
        for handler in list(self.logger.handlers):
            if isinstance(handler, logging.handlers.RotatingFileHandler):
                self.logger.removeHandler(handler)
                handler.close()

        log_dir.mkdir(parents=True, exist_ok=True)
        self.log_dir = log_dir

        # 文件处理器 - 带轮转
        file_handler = logging.handlers.RotatingFileHandler(
            log_dir / 'i2n.log',
            maxBytes=self.max_bytes,
            backupCount=self.backup_count,
            encoding='utf-8'
        )
        file_handler.setLevel(self.logger.level)
        file_handler.setFormatter(self._formatter())

        # 错误日志单独文件
        error_handler = logging.handlers.RotatingFileHandler(
            log_dir / 'i2n.error.log',
            maxBytes=self.max_bytes,
            backupCount=self.backup_count,
            encoding='utf-8'
        )
        error_handler.setLevel(logging.ERROR)
        error_handler.setFormatter(self._formatter())

        self.logger.addHandler(file_handler)
        self.logger.addHandler(error_handler)

    def debug(self, msg: str, *args, **kwargs):
        self.logger.debug(msg, *args, **kwargs)

    def info(self, msg: str, *args, **kwargs):
        self.logger.info(msg, *args, **kwargs)

    def warning(self, msg: str, *args, **kwargs):
        self.logger.warning(msg, *args, **kwargs)

    def error(self, msg: str, *args, **kwargs):
        self.logger.error(msg, *args, **kwargs)

    def critical(self, msg: str, *args, **kwargs):
        self.logger.critical(msg, *args, **kwargs)

    def set_level(self, level: int):
        """设置日志级别（错误日志文件保持 ERROR）"""
        self.logger.setLevel(level)
        for handler in self.logger.handlers:
            if isinstance(handler, logging.handlers.RotatingFileHandler) and handler.level == logging.ERROR:
                continue
            handler.setLevel(level)


# 全局日志实例
_logger_instance: Optional[I2NLogger] = None


def get_logger() -> I2NLogger:
    """获取全局日志实例"""
    global _logger_instance
    if _logger_instance is None:
        _logger_instance = I2NLogger()
    return _logger_instance


def setup_logging(log_dir: Optional[Union[str, Path]], level: str = 'INFO') -> I2NLogger:
    """按配置初始化日志（CLI 入口调用一次）"""
    instance = get_logger()
    instance.configure(log_dir, getattr(logging, level.upper(), logging.INFO))
    return instance


# 抑制第三方库的日志
logging.getLogger('joblib').setLevel(logging.WARNING)
logging.getLogger('numexpr').setLevel(logging.WARNING)
