#!/usr/bin/env python3
"""
I2N Configuration Management
使用 Pydantic 进行类型安全的配置管理

一个 TOML 文件覆盖全部阶段的参数，命令行参数再覆盖文件值；
环境变量使用 I2N_ 前缀（例如 I2N_SEED=7）。
"""

import hashlib
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from utils.errors import ConfigError
from utils.logger import get_logger

logger = get_logger()

# 不影响结果的字段，不参与配置哈希，也不写进清单
NON_REPRODUCIBLE_FIELDS = {'output_dir', 'log_dir', 'threads', 'log_level'}


class I2NConfig(BaseSettings):
    """I2N 配置模型"""

    model_config = SettingsConfigDict(
        env_prefix='I2N_',
        case_sensitive=False,
        extra='ignore'
    )

    # ---- 输入与输出 ----
    io_table: Optional[str] = Field(default=None, description="投入产出表 CSV（首行为部门编号，买方部门在行）")
    firm_bins: Optional[str] = Field(default=None, description="企业规模分箱表 CSV: sector,bin_low,bin_high,count")
    concordance: Optional[str] = Field(default=None, description="行业代码对照表 CSV: source_code,target_sector（空目标=丢弃）")
    firms: Optional[str] = Field(default=None, description="原始企业表 CSV: firm_id,source_code,size（配合对照表使用）")
    factories: Optional[str] = Field(default=None, description="工厂坐标表 CSV: firm_id,factory_id,lat_deg,lon_deg")
    output_dir: str = Field(default='output', description="运行目录，所有阶段产物写在这里")
    log_dir: str = Field(default='logs', description="日志目录")

    # ---- 运行控制 ----
    seed: int = Field(default=42, description="全局随机种子")
    threads: int = Field(default=0, description="线程数，0 表示使用全部核心")
    log_level: str = Field(default='INFO', description="日志级别: DEBUG/INFO/WARNING/ERROR")

    # ---- 企业抽样 ----
    retain_fraction: float = Field(default=1.0, description="单元格保留比例 r ∈ (0,1]")

    # ---- 引力模型拟合 ----
    target_links: Optional[float] = Field(default=None, description="目标连边数 n_d")
    target_density: Optional[float] = Field(default=None, description="目标密度，n_d = 密度 × N(N-1)")
    sector_tol: float = Field(default=0.05, description="部门流入相对误差带 ε_g")
    bins: int = Field(default=0, description="每个部门的规模分箱数 B，0 表示精确 O(N²) 计算")
    max_iter: int = Field(default=50, description="增广拉格朗日外层迭代上限")
    inner_iter: int = Field(default=500, description="L-BFGS-B 内层迭代上限")
    opt_tol: float = Field(default=1e-6, description="投影梯度最优性容差")
    feas_tol: float = Field(default=1e-6, description="约束可行性容差")
    z_min: float = Field(default=1e-8, description="z 下界")
    z_max: float = Field(default=1e4, description="z 上界")
    alpha_min: float = Field(default=0.05, description="α 下界")
    alpha_max: float = Field(default=0.95, description="α 上界")
    kappa_min: float = Field(default=0.01, description="κ 下界")
    kappa_max: float = Field(default=0.99, description="κ 上界")
    lambda_min: float = Field(default=1e-6, description="λ 下界")
    lambda_max: float = Field(default=1e3, description="λ 上界")
    initial_alpha: float = Field(default=0.5, description="热启动 α")
    initial_kappa: float = Field(default=0.5, description="热启动 κ")
    lambda_from: Optional[str] = Field(default=None, description="固定 λ：读取此前拟合的 params.json")
    bootstrap_replicates: int = Field(default=100, description="bootstrap 复制次数")
    bootstrap_firms: int = Field(default=0, description="每次复制抽取的企业数，0 表示全体")

    # ---- 骨架抽样 ----
    draws: int = Field(default=1, description="骨架抽样次数（流水线用 1，诊断命令可加大）")
    sample_bins: int = Field(default=32, description="抽样时每个部门的常概率上界分箱数")
    confidence: float = Field(default=0.05, description="Bernstein 带的置信水平 δ")

    # ---- 闭包 ----
    theta: float = Field(default=0.5, description="f_η 饱和水平 θ ∈ (0,1)")
    eta: float = Field(default=0.05, description="f_η 速率 η")
    gamma_bar: float = Field(default=0.2, description="候选稀疏化上限 γ̄")
    n0: int = Field(default=50, description="候选稀疏化半饱和规模 n₀")
    eta_g: float = Field(default=1.0, description="候选稀疏化指数 η_g")
    exact_limit: int = Field(default=25, description="候选总数不超过此值时用精确分支定界")

    # ---- 最小能量赋权 ----
    firm_band: float = Field(default=0.10, description="企业流入相对误差带 δ")
    weight_sector_band: float = Field(default=0.10, description="部门合计相对误差带 ε_w")
    self_mean_cap: float = Field(default=0.10, description="自环权重均值上限 η₁")
    self_sq_cap: float = Field(default=0.10, description="自环权重平方均值上限 η₂")
    weight_floor: float = Field(default=1e-6, description="边权下限 ε₀")
    qp_tol: float = Field(default=1e-8, description="对偶上升的原始残差容差")
    qp_max_iter: int = Field(default=20000, description="对偶上升迭代上限")

    # ---- 网络统计 ----
    include_self_loops: bool = Field(default=False, description="统计量是否计入自环")

    # ---- 工厂扩展 ----
    tau_km: float = Field(default=500.0, description="距离核衰减尺度 τ（公里）")

    # ---- 基准测试 ----
    bench_sizes: List[int] = Field(default_factory=lambda: [10_000, 30_000, 100_000], description="基准测试的企业数")
    bench_bins: List[int] = Field(default_factory=lambda: [16], description="基准测试的分箱数（0 表示精确）")
    bench_repeats: int = Field(default=5, description="每个规模重复次数（取中位数）")

    @field_validator('retain_fraction')
    @classmethod
    def validate_retain_fraction(cls, v: float) -> float:
        if not 0.0 < v <= 1.0:
            raise ValueError(f"retain_fraction 必须在 (0,1] 内: {v}")
        return v

    @field_validator('sector_tol', 'firm_band', 'weight_sector_band', 'self_mean_cap', 'self_sq_cap',
                     'tau_km', 'eta', 'gamma_bar', 'eta_g', 'opt_tol', 'feas_tol', 'qp_tol')
    @classmethod
    def validate_positive(cls, v: float) -> float:
        if not v > 0:
            raise ValueError(f"参数必须为正数: {v}")
        return v

    @field_validator('theta', 'confidence')
    @classmethod
    def validate_open_unit(cls, v: float) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError(f"参数必须在 (0,1) 内: {v}")
        return v

    @field_validator('weight_floor')
    @classmethod
    def validate_floor(cls, v: float) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError(f"weight_floor 必须在 (0,1) 内: {v}")
        return v

    @field_validator('bins', 'n0')
    @classmethod
    def validate_nonnegative_int(cls, v: int) -> int:
        if v < 0:
            raise ValueError(f"参数不能为负: {v}")
        return v

    @field_validator('draws', 'sample_bins', 'max_iter', 'inner_iter', 'qp_max_iter', 'bench_repeats',
                     'bootstrap_replicates')
    @classmethod
    def validate_positive_int(cls, v: int) -> int:
        if v < 1:
            raise ValueError(f"参数至少为 1: {v}")
        return v

    @field_validator('log_level')
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        level = v.upper()
        if level not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            raise ValueError(f"未知日志级别: {v}")
        return level

    @field_validator('target_links', 'target_density')
    @classmethod
    def validate_target(cls, v: Optional[float]) -> Optional[float]:
        if v is not None and not v > 0:
            raise ValueError(f"目标连边数/密度必须为正数: {v}")
        return v

    @model_validator(mode='after')
    def validate_boxes(self) -> 'I2NConfig':
        pairs = [('z', self.z_min, self.z_max), ('alpha', self.alpha_min, self.alpha_max),
                 ('kappa', self.kappa_min, self.kappa_max), ('lambda', self.lambda_min, self.lambda_max)]
        for name, low, high in pairs:
            if not 0 < low < high:
                raise ValueError(f"{name} 的上下界无效: [{low}, {high}]")
        if not (self.alpha_min > 0 and self.alpha_max < 1):
            raise ValueError("α 的边界必须落在 (0,1) 内")
        if not (self.kappa_min > 0 and self.kappa_max < 1):
            raise ValueError("κ 的边界必须落在 (0,1) 内")
        return self

    def resolve_target_links(self, n_firms: int) -> float:
        """按 target_links 或 target_density 得到 n_d"""
        if self.target_links is not None:
            return float(self.target_links)
        if self.target_density is not None:
            return float(self.target_density) * n_firms * (n_firms - 1)
        raise ConfigError('MissingTarget', "拟合需要 --target-links 或 --target-density", stage='fit')

    def reproducible_dump(self) -> Dict[str, Any]:
        """参与哈希、写入清单的配置字段"""
        return self.model_dump(mode='json', exclude=NON_REPRODUCIBLE_FIELDS)


def config_hash(config: I2NConfig) -> str:
    """配置哈希：规范化 JSON 的 SHA-256 前 16 位"""
    canonical = json.dumps(config.reproducible_dump(), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:16]


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return '[' + ', '.join(_toml_value(v) for v in value) + ']'
    return json.dumps(str(value), ensure_ascii=False)


class ConfigManager:
    """配置管理器 - 带缓存机制"""

    def __init__(self, config_path: Optional[str] = 'config/config.toml'):
        self.config_path = Path(config_path) if config_path else None
        self._config: Optional[I2NConfig] = None
        self._file_data: Dict[str, Any] = {}
        self._last_modified: float = 0
        self._last_size: int = 0

    def _is_config_changed(self) -> bool:
        """检查配置文件是否发生变化"""
        if self.config_path is None or not self.config_path.exists():
            return True
        stat = self.config_path.stat()
        return stat.st_mtime != self._last_modified or stat.st_size != self._last_size

    def _update_cache_info(self):
        if self.config_path is not None and self.config_path.exists():
            stat = self.config_path.stat()
            self._last_modified = stat.st_mtime
            self._last_size = stat.st_size

    def _read_file(self) -> Dict[str, Any]:
        if self.config_path is None or not self.config_path.exists():
            return {}
        try:
            with open(self.config_path, 'rb') as f:
                data = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError('InvalidConfig', f"配置文件 TOML 解析失败: {e}",
                              {'path': str(self.config_path)}) from e

        # 允许按阶段分表书写，[gravity] sector_tol = 0.05 与顶层 sector_tol 等价
        flat: Dict[str, Any] = {}
        for key, value in data.items():
            if isinstance(value, dict):
                flat.update(value)
            else:
                flat[key] = value

        # 相对路径按配置文件所在目录解析
        base = self.config_path.parent
        for key in ('io_table', 'firm_bins', 'concordance', 'firms', 'factories', 'lambda_from'):
            if flat.get(key):
                p = Path(flat[key])
                if not p.is_absolute():
                    flat[key] = str((base / p).resolve())
        return flat

    def load(self, force: bool = False) -> I2NConfig:
        """加载配置，文件未变化时直接返回缓存"""
        if not force and self._config is not None and not self._is_config_changed():
            return self._config

        self._file_data = self._read_file()
        try:
            self._config = I2NConfig(**self._file_data)
        except ValidationError as e:
            raise ConfigError('InvalidConfig', f"配置校验失败: {e.errors()[0].get('msg')}",
                              {'errors': json.loads(e.json())}) from e
        self._update_cache_info()

        if self._file_data:
            logger.info(f"配置加载成功: {self.config_path}")
        else:
            logger.info("使用默认配置")
        return self._config

    def with_overrides(self, overrides: Dict[str, Any]) -> I2NConfig:
        """命令行参数覆盖配置文件值（None 表示未指定）"""
        base = self.load()
        changes = {k: v for k, v in overrides.items() if v is not None}
        if not changes:
            return base
        merged = dict(self._file_data)
        merged.update(changes)
        try:
            self._config = I2NConfig(**merged)
        except ValidationError as e:
            raise ConfigError('InvalidConfig', f"命令行参数校验失败: {e.errors()[0].get('msg')}",
                              {'errors': json.loads(e.json())}) from e
        logger.debug(f"命令行覆盖: {changes}")
        return self._config

    def save(self, config: I2NConfig) -> None:
        """保存配置到 TOML 文件（每个键前写一行说明）"""
        if self.config_path is None:
            raise ConfigError('InvalidConfig', "未指定配置文件路径")
        self.config_path.parent.mkdir(parents=True, exist_ok=True)

        lines = ["# I2N 配置文件", "# 命令行参数优先于此文件；环境变量使用 I2N_ 前缀", ""]
        values = config.model_dump()
        for name, field in I2NConfig.model_fields.items():
            lines.append(f"# {field.description}")
            value = values[name]
            if value is None:
                lines.append(f"# {name} = ")
            else:
                lines.append(f"{name} = {_toml_value(value)}")
        with open(self.config_path, 'w', encoding='utf-8') as f:
            f.write('\n'.join(lines) + '\n')

        self._config = config
        self._update_cache_info()
        logger.info(f"配置已保存: {self.config_path}")

    def ensure_config_file(self) -> I2NConfig:
        """确保配置文件存在，不存在则写入默认配置"""
        if self.config_path is not None and not self.config_path.exists():
            logger.info("配置文件不存在，创建默认配置")
            default_config = I2NConfig()
            self.save(default_config)
            return default_config
        return self.load()


if __name__ == '__main__':
    import argparse

    parser = argparse.ArgumentParser(description='I2N 配置工具')
    parser.add_argument('--config', '-c', default='config/config.toml', help='配置文件路径')
    parser.add_argument('action', choices=['init', 'show'], help='init: 写默认配置; show: 打印配置与哈希')
    args = parser.parse_args()

    manager = ConfigManager(args.config)
    cfg = manager.ensure_config_file() if args.action == 'init' else manager.load()
    print(json.dumps(cfg.model_dump(mode='json'), indent=2, ensure_ascii=False))
    print(f"config_hash = {config_hash(cfg)}")
