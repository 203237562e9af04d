#!/usr/bin/env python3
"""输入解析：投入产出表、分箱表、企业抽样、对照表、工厂坐标"""

import numpy as np
import pandas as pd
import pytest

from conftest import TOY_DIR, write_text
from ingest import (Concordance, FactoryTable, FirmSizeBinTable, IngestError, IOTable, apply_concordance,
                    cell_count, load_concordance, load_factories, load_firm_bins, load_io_table,
                    load_population, sample_firms, save_io_table, save_population)
from utils.errors import I2NError
from utils.files import read_provenance
from utils.rng import stream


def _bins(rows):
    return FirmSizeBinTable(pd.DataFrame(rows, columns=['sector', 'bin_low', 'bin_high', 'count']))


class TestIOTable:
    def test_normalisations(self):
        io = IOTable(['A', 'B'], [[2.0, 6.0], [0.0, 4.0]])
        assert io.max_norm.max() == 1.0
        np.testing.assert_allclose(io.max_norm, [[1 / 3, 1.0], [0.0, 2 / 3]])
        np.testing.assert_allclose(io.row_share, [[0.25, 0.75], [0.0, 1.0]])
        assert io.active_pairs() == [(0, 0), (0, 1), (1, 1)]

    def test_zero_row_stays_zero(self):
        io = IOTable(['A', 'B'], [[1.0, 1.0], [0.0, 0.0]])
        np.testing.assert_array_equal(io.row_share[1], [0.0, 0.0])

    @pytest.mark.parametrize('flows, code', [
        ([[1.0, -1.0], [1.0, 1.0]], 'NegativeEntry'),
        ([[0.0, 0.0], [0.0, 0.0]], 'AllZero'),
        ([[1.0, np.nan], [1.0, 1.0]], 'NonNumeric'),
    ])
    def test_invalid_values(self, flows, code):
        with pytest.raises(IngestError) as exc:
            IOTable(['A', 'B'], flows)
        assert exc.value.code == code
        assert exc.value.stage == 'ingest'

    def test_duplicate_sector(self):
        with pytest.raises(IngestError) as exc:
            IOTable(['A', 'A'], [[1.0, 1.0], [1.0, 1.0]])
        assert exc.value.code == 'DuplicateSector'

    def test_unknown_label(self):
        io = IOTable(['A', 'B'], [[1.0, 1.0], [1.0, 1.0]])
        assert io.index_of('B') == 1
        with pytest.raises(IngestError) as exc:
            io.index_of('C')
        assert exc.value.code == 'UnknownSector'


class TestLoadIOTable:
    def test_toy_table(self):
        io = load_io_table(TOY_DIR / 'io_table.csv')
        assert io.sectors == ['AGR', 'MAN', 'SRV']
        assert io.flows[1, 1] == 120.0

    def test_missing_file(self, tmp_path):
        with pytest.raises(I2NError) as exc:
            load_io_table(tmp_path / 'absent.csv')
        assert exc.value.code == 'MissingInput'
        assert exc.value.stage == 'ingest'

    def test_non_square(self, tmp_path):
        path = write_text(tmp_path / 'io.csv', 'A,B\n1,2\n3,4\n5,6\n')
        with pytest.raises(IngestError) as exc:
            load_io_table(path)
        assert exc.value.code == 'NonSquare'

    def test_non_numeric_cell(self, tmp_path):
        path = write_text(tmp_path / 'io.csv', 'A,B\n1,x\n3,4\n')
        with pytest.raises(IngestError) as exc:
            load_io_table(path)
        assert exc.value.code == 'NonNumeric'
        assert exc.value.details['cell'] == [0, 1]

    def test_round_trip_is_bit_exact(self, tmp_path):
        io = IOTable(['A', 'B'], [[0.1 + 0.2, 1 / 3], [2.0 ** -40, 7.0]])
        path = save_io_table(io, tmp_path / 'io_table.csv', 'abcd', 5)
        assert read_provenance(path) == ('abcd', 5)
        back = load_io_table(path)
        np.testing.assert_array_equal(back.flows, io.flows)


class TestFirmBins:
    def test_toy_bins(self):
        bins = load_firm_bins(TOY_DIR / 'firm_bins.csv')
        assert len(bins) == 12
        assert bins.total_count == 300

    @pytest.mark.parametrize('rows', [
        [('A', 1, 5, 3), ('A', 4, 9, 2)],
        [('A', 5, 1, 3)],
        [('A', 1, 5, 2.5)],
        [('A', 1, np.inf, 2)],
        [('A', -1, 5, 2)],
    ])
    def test_invalid(self, rows):
        with pytest.raises(IngestError) as exc:
            _bins(rows)
        assert exc.value.code == 'InvalidBins'

    def test_missing_column(self):
        with pytest.raises(IngestError) as exc:
            FirmSizeBinTable(pd.DataFrame({'sector': ['A'], 'bin_low': [1]}))
        assert exc.value.code == 'InvalidBins'


class TestSampling:
    def test_cell_count_expectation(self):
        draws = cell_count(10, 0.35, stream(0, 99), size=200_000)
        assert set(np.unique(draws)) == {3, 4}
        assert abs(draws.mean() - 3.5) < 0.01

    def test_full_retention_keeps_counts(self):
        bins = _bins([('A', 1, 10, 7), ('A', 10, 100, 3), ('B', 1, 10, 5)])
        pop = sample_firms(bins, 1.0, seed=3, sectors=['A', 'B'])
        assert pop.n_firms == 15
        assert np.bincount(pop.sector).tolist() == [10, 5]
        assert pop.size.max() == 1.0
        assert np.all(pop.size > 0)

    def test_sizes_respect_bins(self):
        bins = _bins([('A', 1, 2, 50), ('A', 100, 200, 1)])
        pop = sample_firms(bins, 1.0, seed=1)
        # 顶箱唯一的企业归一化为 1，其余原始规模 ≤ 2、最大原始规模 ≥ 100
        assert np.sum(pop.size == 1.0) == 1
        rest = np.sort(pop.size)[:-1]
        assert rest.max() <= 2.0 / 100.0
        assert rest.min() > 1.0 / 200.0

    def test_independent_of_threads(self):
        bins = load_firm_bins(TOY_DIR / 'firm_bins.csv')
        one = sample_firms(bins, 0.6, seed=11, threads=1)
        four = sample_firms(bins, 0.6, seed=11, threads=4)
        np.testing.assert_array_equal(one.size, four.size)
        np.testing.assert_array_equal(one.sector, four.sector)

    def test_seed_changes_draw(self):
        bins = load_firm_bins(TOY_DIR / 'firm_bins.csv')
        a = sample_firms(bins, 1.0, seed=1)
        b = sample_firms(bins, 1.0, seed=2)
        assert not np.array_equal(a.size, b.size)

    def test_invalid_fraction(self):
        bins = _bins([('A', 1, 10, 7)])
        with pytest.raises(IngestError) as exc:
            sample_firms(bins, 0.0, seed=0)
        assert exc.value.code == 'InvalidBins'

    def test_unknown_sector(self):
        bins = _bins([('Z', 1, 10, 7)])
        with pytest.raises(IngestError) as exc:
            sample_firms(bins, 1.0, seed=0, sectors=['A'])
        assert exc.value.code == 'UnknownSector'

    def test_empty_draw(self):
        bins = _bins([('A', 1, 10, 0)])
        with pytest.raises(IngestError) as exc:
            sample_firms(bins, 1.0, seed=0)
        assert exc.value.code == 'EmptyTable'

    def test_population_round_trip(self, tmp_path):
        bins = load_firm_bins(TOY_DIR / 'firm_bins.csv')
        pop = sample_firms(bins, 1.0, seed=4, sectors=['AGR', 'MAN', 'SRV'])
        path = save_population(pop, tmp_path / 'population.csv', 'ffff', 4)
        back = load_population(path, ['AGR', 'MAN', 'SRV'])
        np.testing.assert_array_equal(back.size, pop.size)
        np.testing.assert_array_equal(back.sector, pop.sector)
        np.testing.assert_array_equal(back.firm_id, pop.firm_id)

    def test_subset_keeps_or_rescales_sizes(self, pop60):
        index = np.array([3, 5, 8])
        kept = pop60.subset(index, renormalize=False)
        np.testing.assert_array_equal(kept.size, pop60.size[index])
        rescaled = pop60.subset(index)
        assert rescaled.size.max() == 1.0


class TestConcordance:
    def test_drop_and_map(self, tmp_path):
        path = write_text(tmp_path / 'conc.csv', 'source_code,target_sector\n111,A\n112,A\n999,\n')
        conc = load_concordance(path, ['A', 'B'])
        assert conc.target('112') == 'A'
        assert conc.target('999') is None
        assert conc.target('000') is None

        raw = pd.DataFrame({'firm_id': [10, 11, 12, 13], 'source_code': ['111', '999', '112', '555'],
                            'size': [5.0, 3.0, 10.0, 1.0]})
        pop, dropped = apply_concordance(raw, conc, ['A', 'B'])
        assert dropped == 2
        assert pop.firm_id.tolist() == [10, 12]
        np.testing.assert_allclose(pop.size, [0.5, 1.0])

    def test_duplicate_code(self, tmp_path):
        path = write_text(tmp_path / 'conc.csv', 'source_code,target_sector\n111,A\n111,B\n')
        with pytest.raises(IngestError) as exc:
            load_concordance(path, ['A', 'B'])
        assert exc.value.code == 'DuplicateCode'

    def test_unknown_target(self, tmp_path):
        path = write_text(tmp_path / 'conc.csv', 'source_code,target_sector\n111,Q\n')
        with pytest.raises(IngestError) as exc:
            load_concordance(path, ['A', 'B'])
        assert exc.value.code == 'UnknownSector'

    def test_mapping_is_plain_dict(self):
        conc = Concordance({'1': 'A'})
        assert conc.target('1') == 'A'


class TestFactories:
    def test_degrees_become_radians(self):
        table = FactoryTable.from_degrees([1, 0], [7, 3], [90.0, 0.0], [180.0, -90.0])
        assert table.frame['firm_id'].tolist() == [0, 1]
        np.testing.assert_allclose(table.frame['lat'], [0.0, np.pi / 2])
        np.testing.assert_allclose(table.frame['lon'], [-np.pi / 2, np.pi])

    def test_toy_factories(self):
        table = load_factories(TOY_DIR / 'factories.csv')
        assert len(table.firms) == 300

    def test_out_of_range(self, tmp_path):
        path = write_text(tmp_path / 'f.csv', 'firm_id,factory_id,lat_deg,lon_deg\n0,0,95.0,10.0\n')
        with pytest.raises(IngestError) as exc:
            load_factories(path)
        assert exc.value.code == 'InvalidCoordinates'
        assert exc.value.stage == 'factory'

    def test_duplicate_factory(self):
        with pytest.raises(IngestError) as exc:
            FactoryTable.from_degrees([0, 1], [4, 4], [0.0, 1.0], [0.0, 1.0])
        assert exc.value.code == 'DuplicateFactory'
