from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rachpred.analysis import (
    ArchDescriptor, arch_of, complexity_ratio, cost_report, empirical_cost, evaluation_flops,
    flops_per_step, param_count, reference_arch,
)
from rachpred.nn import ModelParams
from rachpred.predict import FLSP, ROLLING, StreamingConfig, run_stream


def test_reference_parameter_counts():
    assert param_count(reference_arch("lstm")) == 81_322_502
    assert param_count(reference_arch("gru")) == 62_557_502


def test_single_unit_lstm_count():
    assert param_count(ArchDescriptor("lstm", 1, (1,))) == 16


def test_toy_lstm_flops_by_hand():
    arch = ArchDescriptor("lstm", 2, (4,), (2,), (4,))
    cfg = StreamingConfig(l_hist=1, l_f=1, l_p=1, l_buff=0, allow_equal=True)
    per_eval = 8 * 4 * (2 + 4) + 29 * 4 + 2 * 2 * 4
    assert evaluation_flops(arch) == per_eval == 324
    assert flops_per_step(arch, cfg, FLSP) == 648
    assert flops_per_step(arch, cfg, ROLLING) == 324


def test_reference_ratio():
    cfg = StreamingConfig(l_f=100, l_p=200, l_buff=200)
    for kind in ("lstm", "gru"):
        arch = reference_arch(kind)
        r = flops_per_step(arch, cfg, FLSP) / flops_per_step(arch, cfg, ROLLING)
        assert r == Fraction(3, 4) == complexity_ratio(100, 200, 200)


def test_gru_flops_formula():
    arch = ArchDescriptor("gru", 3, (5, 7), (4, 2), (7, 11))
    expect = (6 * 5 * (3 + 5) + 22 * 5) + (6 * 7 * (5 + 7) + 22 * 7) + 2 * 4 * 7 + 2 * 2 * 11
    assert evaluation_flops(arch) == expect


def test_cnn_synthetic_descriptor():
    arch = ArchDescriptor("cnn1d", 2, (), (8, 2), (16, 8), window=64, channels=(2, 4, 8), kernels=(3, 5))
    cfg = StreamingConfig(l_f=10, l_p=20, l_buff=64)
    conv = Fraction(64, 2) * 4 * (2 * 2 * 3 + Fraction(1, 2)) + Fraction(64, 4) * 8 * (2 * 4 * 5 + Fraction(1, 2))
    fc = (2 * 8 * 16 + 8) + (2 * 2 * 8 + 2) - 2
    assert flops_per_step(arch, cfg, ROLLING) == (conv + fc) / 10
    assert param_count(arch) == 4 * (2 * 3 + 1) + 8 * (4 * 5 + 1) + 8 * 17 + 2 * 9
    with pytest.raises(ValueError):
        flops_per_step(arch, cfg, FLSP)
    rep = cost_report(arch, cfg)
    assert rep.flops_flsp is None and rep.ratio is None


def test_descriptor_validation():
    with pytest.raises(ValueError):
        ArchDescriptor("rnn", 2, (4,))
    with pytest.raises(ValueError):
        ArchDescriptor("lstm", 2, (0,))
    with pytest.raises(ValueError):
        ArchDescriptor("lstm", 2, (4,), (2,), ())
    with pytest.raises(ValueError):
        ArchDescriptor("cnn1d", 2, window=10, channels=(2, 4), kernels=())


arch_st = st.builds(
    lambda kind, d, hs, m: ArchDescriptor(kind, d, tuple(hs), (m, 2), (hs[-1], hs[-1] + m)),
    st.sampled_from(["lstm", "gru"]), st.integers(1, 8), st.lists(st.integers(1, 64), min_size=1, max_size=3),
    st.integers(1, 32),
)


@given(arch_st, st.integers(1, 200), st.integers(0, 300), st.integers(0, 400))
def test_flsp_never_costs_more(arch, l_f, extra_p, extra_b):
    l_p, l_buff = l_f + 1 + extra_p, l_f + extra_b
    cfg = StreamingConfig(l_f=l_f, l_p=l_p, l_buff=l_buff)
    f, r = flops_per_step(arch, cfg, FLSP), flops_per_step(arch, cfg, ROLLING)
    assert f <= r
    assert (f == r) == (l_buff == l_f)
    assert f / r == complexity_ratio(l_f, l_p, l_buff)


def test_roundtrip_descriptor_dict():
    a = reference_arch("gru")
    assert ArchDescriptor.from_dict(a.to_dict()) == a


@pytest.mark.parametrize("kind", ["lstm", "gru"])
def test_empirical_cost_matches_formula(kind):
    m = ModelParams.init(kind, 2, (5, 3), (4, 2), ((0,), (0, 1)), rng=np.random.default_rng(0))
    cfg = StreamingConfig(l_hist=20, l_f=4, l_p=9, l_buff=6)
    feats = np.random.default_rng(1).poisson(5, size=(20 + 6 * 4, 2)).astype(float)
    arch = arch_of(m)
    for driver in (FLSP, ROLLING):
        sess = run_stream(m, feats, cfg, driver)
        emp = empirical_cost(sess)
        assert emp.flops_per_evaluation == evaluation_flops(arch)
        assert emp.flops_per_output == flops_per_step(arch, cfg, driver)
    sess = run_stream(m, feats, cfg, FLSP)
    assert sess.evaluations == 20 + 6 * (4 + 9)


def test_report_table_and_json():
    rep = cost_report(reference_arch("lstm"), StreamingConfig())
    d = rep.to_dict()
    assert d["param_count"] == 81_322_502 and d["ratio_exact"] == "3/4"
    assert "81,322,502" in rep.table()
