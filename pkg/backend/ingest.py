#!/usr/bin/env python3
"""
I2N 输入解析模块
读取并校验投入产出表、企业规模分箱、行业对照表和工厂坐标，
生成归一化后的内存模型（IOTable / FirmPopulation / FactoryTable）。
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from utils.errors import I2NError
from utils.files import FLOAT_FORMAT, atomic_write_text, read_csv_artifact, require_file, write_csv_artifact
from utils.logger import get_logger
from utils.parallel import run_ordered
from utils.rng import Stage, stream

logger = get_logger()

DROP = None  # 对照表中的丢弃标记


class IngestError(I2NError):
    """输入数据错误"""
    stage = 'ingest'


@dataclass
class IOTable:
    """投入产出表：买方部门在行，卖方部门在列"""

    sectors: List[str]
    flows: np.ndarray
    max_norm: np.ndarray = field(init=False)
    row_share: np.ndarray = field(init=False)

    def __post_init__(self):
        self.flows = np.asarray(self.flows, dtype=np.float64)
        self.sectors = [str(s) for s in self.sectors]
        n = self.flows.shape[0]
        if self.flows.ndim != 2 or self.flows.shape[1] != n:
            raise IngestError('NonSquare', f"投入产出表不是方阵: {self.flows.shape}",
                              {'shape': list(self.flows.shape)})
        if len(self.sectors) != n:
            raise IngestError('NonSquare', f"部门数 {len(self.sectors)} 与矩阵维度 {n} 不一致",
                              {'shape': list(self.flows.shape), 'sectors': len(self.sectors)})
        if len(set(self.sectors)) != n:
            raise IngestError('DuplicateSector', "部门编号重复", {'sectors': self.sectors})
        if not np.all(np.isfinite(self.flows)):
            row, col = np.argwhere(~np.isfinite(self.flows))[0]
            raise IngestError('NonNumeric', f"投入产出表存在非有限值: ({row}, {col})",
                              {'cell': [int(row), int(col)]})
        negative = np.argwhere(self.flows < 0)
        if negative.size:
            row, col = negative[0]
            raise IngestError('NegativeEntry', f"投入产出表存在负值: ({row}, {col}) = {self.flows[row, col]}",
                              {'cell': [int(row), int(col)]})
        top = self.flows.max()
        if not top > 0:
            raise IngestError('AllZero', "投入产出表没有正值", {'shape': list(self.flows.shape)})

        # S: 按全表最大值归一化，最大元恰为 1
        self.max_norm = self.flows / top
        # I: 按买方行和归一化（全零行保持全零）
        row_sum = self.flows.sum(axis=1)
        self.row_share = np.zeros_like(self.flows)
        positive = row_sum > 0
        self.row_share[positive] = self.flows[positive] / row_sum[positive, None]

    @property
    def n_sectors(self) -> int:
        return self.flows.shape[0]

    @property
    def active(self) -> np.ndarray:
        """S_kl > 0 的部门对"""
        return self.max_norm > 0

    def active_pairs(self) -> List[Tuple[int, int]]:
        """按行优先顺序列出有流量的部门对"""
        return [(int(k), int(l)) for k, l in np.argwhere(self.active)]

    def index_of(self, label: str) -> int:
        try:
            return self._index[str(label)]
        except AttributeError:
            self._index = {s: i for i, s in enumerate(self.sectors)}
            return self.index_of(label)
        except KeyError:
            raise IngestError('UnknownSector', f"未知部门: {label}", {'sector': str(label)})


def load_io_table(path: Union[str, Path]) -> IOTable:
    """
    读取投入产出表 CSV

    首行为部门编号，其后 N_S 行 × N_S 列数值。

    Raises:
        IngestError: MissingInput / NonSquare / NonNumeric / NegativeEntry / AllZero
    """
    path = require_file(path, 'ingest', '投入产出表')
    frame = read_csv_artifact(path, dtype=str)
    sectors = [str(c).strip() for c in frame.columns]
    if frame.shape[0] != frame.shape[1]:
        raise IngestError('NonSquare', f"投入产出表为 {frame.shape[0]}×{frame.shape[1]}，不是方阵",
                          {'shape': [int(frame.shape[0]), int(frame.shape[1])]})
    values = frame.apply(lambda col: pd.to_numeric(col.str.strip(), errors='coerce'))
    bad = np.argwhere(values.isna().to_numpy())
    if bad.size:
        row, col = bad[0]
        raise IngestError('NonNumeric', f"投入产出表第 ({row}, {col}) 格不是数值",
                          {'cell': [int(row), int(col)]})
    io = IOTable(sectors, values.to_numpy(dtype=np.float64))
    logger.info(f"投入产出表加载完成: {io.n_sectors} 个部门, {int(io.active.sum())} 个正流量部门对")
    return io


def save_io_table(io: IOTable, path: Union[str, Path], config_hash: Optional[str] = None, seed: int = 0) -> Path:
    frame = pd.DataFrame(io.flows, columns=io.sectors)
    if config_hash is not None:
        return write_csv_artifact(path, frame, config_hash, seed)
    return atomic_write_text(path, frame.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator='\n'))


@dataclass
class FirmSizeBinTable:
    """企业规模分箱表：每行 (sector, bin_low, bin_high, count)"""

    frame: pd.DataFrame

    def __post_init__(self):
        required = ['sector', 'bin_low', 'bin_high', 'count']
        missing = [c for c in required if c not in self.frame.columns]
        if missing:
            raise IngestError('InvalidBins', f"分箱表缺少列: {missing}", {'missing': missing})
        frame = self.frame[required].copy()
        frame['sector'] = frame['sector'].astype(str).str.strip()
        for col in ('bin_low', 'bin_high', 'count'):
            frame[col] = pd.to_numeric(frame[col], errors='coerce')
        self.frame = frame.reset_index(drop=True)
        self.validate()

    def validate(self):
        frame = self.frame
        for row in range(len(frame)):
            low, high, count = frame.at[row, 'bin_low'], frame.at[row, 'bin_high'], frame.at[row, 'count']
            if not (np.isfinite(low) and np.isfinite(high)):
                raise IngestError('InvalidBins', f"第 {row} 行分箱端点必须是有限数（顶箱也要给出上限）",
                                  {'row': row})
            if not 0 <= low < high:
                raise IngestError('InvalidBins', f"第 {row} 行分箱端点无效: [{low}, {high}]", {'row': row})
            if not (np.isfinite(count) and count >= 0 and float(count).is_integer()):
                raise IngestError('InvalidBins', f"第 {row} 行企业数必须是非负整数: {count}", {'row': row})
        # 同一部门内分箱不重叠
        for sector, group in frame.groupby('sector', sort=False):
            ordered = group.sort_values('bin_low')
            lows = ordered['bin_low'].to_numpy()
            highs = ordered['bin_high'].to_numpy()
            overlap = np.nonzero(lows[1:] < highs[:-1])[0]
            if overlap.size:
                row = int(ordered.index[overlap[0] + 1])
                raise IngestError('InvalidBins', f"部门 {sector} 的分箱重叠（第 {row} 行）",
                                  {'row': row, 'sector': sector})

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def total_count(self) -> int:
        return int(self.frame['count'].sum())


def load_firm_bins(path: Union[str, Path]) -> FirmSizeBinTable:
    """读取企业规模分箱表 CSV（sector,bin_low,bin_high,count）"""
    path = require_file(path, 'ingest', '企业规模分箱表')
    frame = read_csv_artifact(path, dtype={'sector': str})
    table = FirmSizeBinTable(frame)
    logger.info(f"分箱表加载完成: {len(table)} 个单元格, 企业总数 {table.total_count}")
    return table


@dataclass
class FirmPopulation:
    """抽样企业：编号、部门索引、归一化规模 m_i ∈ (0,1]"""

    firm_id: np.ndarray
    sector: np.ndarray
    size: np.ndarray
    sector_labels: List[str]

    def __post_init__(self):
        self.firm_id = np.asarray(self.firm_id, dtype=np.int64)
        self.sector = np.asarray(self.sector, dtype=np.int64)
        self.size = np.asarray(self.size, dtype=np.float64)
        self.sector_labels = [str(s) for s in self.sector_labels]
        if not (len(self.firm_id) == len(self.sector) == len(self.size)):
            raise IngestError('InvalidPopulation', "企业字段长度不一致")
        if len(self.size):
            if np.any(self.size <= 0) or np.any(self.size > 1):
                raise IngestError('InvalidPopulation', "企业规模必须落在 (0,1] 内")
            if np.any(self.sector < 0) or np.any(self.sector >= len(self.sector_labels)):
                raise IngestError('UnknownSector', "企业部门索引越界")

    @property
    def n_firms(self) -> int:
        return len(self.firm_id)

    @property
    def n_sectors(self) -> int:
        return len(self.sector_labels)

    @property
    def sector_sizes(self) -> np.ndarray:
        """s_l = Σ_{π(i)=l} m_i"""
        return np.bincount(self.sector, weights=self.size, minlength=self.n_sectors)

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.sector == k)

    def subset(self, index: np.ndarray, renormalize: bool = True) -> 'FirmPopulation':
        """按下标取子集；renormalize 时按子集内最大企业重新归一化"""
        index = np.asarray(index, dtype=np.int64)
        size = self.size[index]
        if renormalize and size.size:
            size = size / size.max()
        return FirmPopulation(self.firm_id[index], self.sector[index], size, self.sector_labels)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'firm_id': self.firm_id,
            'sector': [self.sector_labels[k] for k in self.sector],
            'size': self.size,
        })


def cell_count(count: int, retain_fraction: float, rng: np.random.Generator,
               size: Optional[int] = None) -> Union[int, np.ndarray]:
    """
    单元格抽样数 ĉ = ⌊rc⌋ + Bernoulli(rc − ⌊rc⌋)

    size 不为 None 时返回 size 个独立抽样。
    """
    expected = retain_fraction * count
    base = math.floor(expected)
    frac = expected - base
    extra = rng.random(size) < frac
    if size is None:
        return base + int(extra)
    return base + extra.astype(np.int64)


def _sample_cell(args) -> np.ndarray:
    seed, sector_idx, bin_rank, low, high, count, retain_fraction = args
    rng = stream(seed, Stage.INGEST, sector_idx, bin_rank)
    n = cell_count(int(count), retain_fraction, rng)
    # 取 (low, high]，保证规模严格为正
    return high - rng.uniform(0.0, high - low, size=n)


def sample_firms(bins: FirmSizeBinTable, retain_fraction: float, seed: int,
                 sectors: Optional[Sequence[str]] = None, threads: int = 1) -> FirmPopulation:
    """
    按单元格抽样企业并归一化规模

    Args:
        bins: 分箱表
        retain_fraction: 保留比例 r ∈ (0,1]
        seed: 随机种子；每个 (部门, 分箱) 单元格独立建流
        sectors: 部门编号顺序（通常取自 IOTable），None 时按分箱表出现顺序
        threads: 线程数（结果与线程数无关）

    Raises:
        IngestError: EmptyTable / UnknownSector / InvalidBins
    """
    if not 0.0 < retain_fraction <= 1.0:
        raise IngestError('InvalidBins', f"retain_fraction 必须在 (0,1] 内: {retain_fraction}")
    if len(bins) == 0:
        raise IngestError('EmptyTable', "分箱表为空")

    frame = bins.frame
    labels = list(sectors) if sectors is not None else list(dict.fromkeys(frame['sector']))
    index = {str(s): i for i, s in enumerate(labels)}
    unknown = sorted(set(frame['sector']) - set(index))
    if unknown:
        raise IngestError('UnknownSector', f"分箱表引用了未知部门: {unknown[:5]}", {'sectors': unknown})

    cells = []
    for sector_label, group in frame.groupby('sector', sort=False):
        ordered = group.sort_values('bin_low')
        for rank, (_, row) in enumerate(ordered.iterrows()):
            cells.append((index[sector_label], rank, float(row['bin_low']), float(row['bin_high']),
                          int(row['count'])))
    cells.sort(key=lambda c: (c[0], c[1]))

    drawn = run_ordered(_sample_cell,
                        [(seed, s, b, low, high, count, retain_fraction) for s, b, low, high, count in cells],
                        threads)

    sector_of = np.concatenate([np.full(len(d), c[0], dtype=np.int64) for d, c in zip(drawn, cells)])
    raw = np.concatenate(drawn) if drawn else np.empty(0)
    if raw.size == 0:
        raise IngestError('EmptyTable', "抽样结果为空（所有单元格都没有企业）")

    population = FirmPopulation(np.arange(raw.size), sector_of, raw / raw.max(), labels)
    logger.info(f"企业抽样完成: {population.n_firms} 家企业 (r={retain_fraction}, 期望 "
                f"{retain_fraction * bins.total_count:.1f})")
    return population


def save_population(pop: FirmPopulation, path: Union[str, Path], config_hash: Optional[str] = None,
                    seed: int = 0) -> Path:
    if config_hash is not None:
        return write_csv_artifact(path, pop.to_frame(), config_hash, seed)
    return atomic_write_text(path, pop.to_frame().to_csv(index=False, float_format=FLOAT_FORMAT,
                                                         lineterminator='\n'))


def load_population(path: Union[str, Path], sectors: Optional[Sequence[str]] = None) -> FirmPopulation:
    """读取 population.csv（firm_id,sector,size）"""
    path = require_file(path, 'ingest', '企业表')
    frame = read_csv_artifact(path, dtype={'sector': str})
    labels = list(sectors) if sectors is not None else list(dict.fromkeys(frame['sector']))
    index = {str(s): i for i, s in enumerate(labels)}
    try:
        sector = np.array([index[s] for s in frame['sector']], dtype=np.int64)
    except KeyError as e:
        raise IngestError('UnknownSector', f"企业表引用了未知部门: {e.args[0]}", {'sector': e.args[0]})
    return FirmPopulation(frame['firm_id'].to_numpy(), sector, frame['size'].to_numpy(dtype=np.float64), labels)


@dataclass
class Concordance:
    """行业代码对照：source_code → 目标部门（None 表示丢弃）"""

    mapping: Dict[str, Optional[str]]

    def target(self, code: str) -> Optional[str]:
        return self.mapping.get(str(code), DROP)


def load_concordance(path: Union[str, Path], sectors: Optional[Sequence[str]] = None) -> Concordance:
    """读取对照表 CSV（source_code,target_sector；空目标=丢弃）"""
    path = require_file(path, 'ingest', '行业对照表')
    frame = read_csv_artifact(path, dtype=str, keep_default_na=False)
    mapping: Dict[str, Optional[str]] = {}
    valid = set(str(s) for s in sectors) if sectors is not None else None
    for row, (code, target) in enumerate(zip(frame['source_code'], frame['target_sector'])):
        code = code.strip()
        target = target.strip() or DROP
        if code in mapping:
            raise IngestError('DuplicateCode', f"对照表代码重复: {code}", {'row': row, 'code': code})
        if target is not None and valid is not None and target not in valid:
            raise IngestError('UnknownSector', f"对照表目标部门未知: {target}", {'row': row, 'sector': target})
        mapping[code] = target
    return Concordance(mapping)


def load_raw_firms(path: Union[str, Path]) -> pd.DataFrame:
    """读取原始企业表（firm_id,source_code,size；size 为货币单位）"""
    path = require_file(path, 'ingest', '原始企业表')
    return read_csv_artifact(path, dtype={'source_code': str})


def apply_concordance(raw: pd.DataFrame, conc: Concordance,
                      sectors: Sequence[str]) -> Tuple[FirmPopulation, int]:
    """
    按对照表映射行业代码，丢弃无法映射的企业

    Returns:
        (归一化后的企业群体, 丢弃数)
    """
    targets = [conc.target(code) for code in raw['source_code'].astype(str).str.strip()]
    keep = np.array([t is not None for t in targets], dtype=bool)
    dropped = int((~keep).sum())

    index = {str(s): i for i, s in enumerate(sectors)}
    kept_targets = [t for t in targets if t is not None]
    unknown = sorted(set(kept_targets) - set(index))
    if unknown:
        raise IngestError('UnknownSector', f"对照表目标部门未知: {unknown[:5]}", {'sectors': unknown})

    size = raw['size'].to_numpy(dtype=np.float64)[keep]
    if size.size and np.any(size <= 0):
        raise IngestError('InvalidPopulation', "企业规模必须为正")
    sector = np.array([index[t] for t in kept_targets], dtype=np.int64)
    scaled = size / size.max() if size.size else size
    population = FirmPopulation(raw['firm_id'].to_numpy()[keep], sector, scaled, list(sectors))

    if dropped:
        logger.warning(f"对照表丢弃 {dropped} 家无法映射的企业（保留 {population.n_firms}）")
    return population, dropped


@dataclass
class FactoryTable:
    """工厂坐标（弧度）"""

    frame: pd.DataFrame

    def __post_init__(self):
        frame = self.frame[['firm_id', 'factory_id', 'lat', 'lon']].copy()
        frame['firm_id'] = frame['firm_id'].astype(np.int64)
        frame['factory_id'] = frame['factory_id'].astype(np.int64)
        bad = frame.index[(frame['lat'].abs() > np.pi / 2) | (frame['lon'].abs() > np.pi)
                          | ~np.isfinite(frame['lat']) | ~np.isfinite(frame['lon'])]
        if len(bad):
            raise IngestError('InvalidCoordinates', f"工厂坐标越界（第 {int(bad[0])} 行）", {'row': int(bad[0])})
        if frame['factory_id'].duplicated().any():
            dup = int(frame.loc[frame['factory_id'].duplicated(), 'factory_id'].iloc[0])
            raise IngestError('DuplicateFactory', f"工厂编号重复: {dup}", {'factory_id': dup})
        self.frame = frame.sort_values(['firm_id', 'factory_id'], kind='mergesort').reset_index(drop=True)

    @classmethod
    def from_degrees(cls, firm_id, factory_id, lat_deg, lon_deg) -> 'FactoryTable':
        return cls(pd.DataFrame({
            'firm_id': np.asarray(firm_id),
            'factory_id': np.asarray(factory_id),
            'lat': np.radians(np.asarray(lat_deg, dtype=np.float64)),
            'lon': np.radians(np.asarray(lon_deg, dtype=np.float64)),
        }))

    @property
    def firms(self) -> np.ndarray:
        return np.unique(self.frame['firm_id'].to_numpy())

    def __len__(self) -> int:
        return len(self.frame)


def load_factories(path: Union[str, Path]) -> FactoryTable:
    """读取工厂坐标 CSV（firm_id,factory_id,lat_deg,lon_deg），度数转为弧度"""
    path = require_file(path, 'factory', '工厂坐标表')
    frame = read_csv_artifact(path)
    lat, lon = frame['lat_deg'].to_numpy(dtype=np.float64), frame['lon_deg'].to_numpy(dtype=np.float64)
    bad = np.flatnonzero((np.abs(lat) > 90) | (np.abs(lon) > 180))
    if bad.size:
        raise IngestError('InvalidCoordinates', f"工厂坐标越界（第 {int(bad[0])} 行）", {'row': int(bad[0])},
                          stage='factory')
    table = FactoryTable.from_degrees(frame['firm_id'], frame['factory_id'], lat, lon)
    logger.info(f"工厂表加载完成: {len(table)} 个工厂, {len(table.firms)} 家企业")
    return table
