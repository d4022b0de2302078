from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from s2fl.device_sim import (
    QUALITY_FLOPS,
    QUALITY_RATE,
    DeviceProfile,
    ServerProfile,
    make_fleet,
    portion_round_time,
    preset_fleet,
    round_time,
)
from s2fl.errors import ConfigError
from s2fl.nn_core import build_model, split_model


def test_round_time_worked_example():
    # p*fc/Comp_c = 10 and p*fs/Comp_s = 10
    dev = DeviceProfile(0, flops=1.0, transfer_rate=100.0)
    srv = ServerProfile(flops=1.0)
    t = round_time(1000, 10, 20, dev, fc=1.0, fs=1.0, server=srv, bytes_per_real=1)
    assert t.comm_seconds == 24.0
    assert t.client_compute_seconds == 10.0
    assert t.server_compute_seconds == 10.0
    assert t.total_seconds == 44.0
    assert t.bytes == 2400


def test_infinite_rate_leaves_compute_only():
    dev = DeviceProfile(0, flops=2.0, transfer_rate=1e300)
    t = round_time(1000, 10, 20, dev, 3.0, 5.0, ServerProfile(flops=4.0))
    assert t.total_seconds == pytest.approx(10 * 3.0 / 2.0 + 10 * 5.0 / 4.0, rel=1e-12)


def test_doubling_device_flops_halves_client_compute():
    srv = ServerProfile()
    a = round_time(100, 7, 3, DeviceProfile(0, 1e9, 1e6), 123.0, 5.0, srv)
    b = round_time(100, 7, 3, DeviceProfile(0, 2e9, 1e6), 123.0, 5.0, srv)
    assert b.client_compute_seconds == a.client_compute_seconds / 2


positive = st.floats(1.0, 1e4)


@given(wc=st.integers(1, 10**6), p=st.integers(1, 1000), q=st.integers(1, 100),
       flops=positive, rate=positive, sflops=positive, fc=positive, fs=positive)
def test_round_time_monotonicity(wc, p, q, flops, rate, sflops, fc, fs):
    def T(wc=wc, p=p, q=q, flops=flops, rate=rate, sflops=sflops, fc=fc, fs=fs):
        return round_time(wc, p, q, DeviceProfile(0, flops, rate), fc, fs, ServerProfile(sflops)).total_seconds

    base = T()
    assert T(rate=rate * 2) < base
    assert T(flops=flops * 2) < base
    assert T(sflops=sflops * 2) < base
    assert T(wc=wc * 2) > base
    assert T(p=p * 2) > base
    assert T(q=q * 2) > base
    assert T(fc=fc * 2) > base
    assert T(fs=fs * 2) > base


def test_smaller_split_never_increases_client_compute():
    model = build_model([20, 64, 64, 64, 5], (1, 2, 3), np.random.default_rng(0))
    dev, srv = DeviceProfile(0, 5e9, 1e6), ServerProfile()
    compute = []
    for s in model.split_candidates:
        client, server = split_model(model, s)
        compute.append(portion_round_time(client, server, 32, dev, srv, 20, s).client_compute_seconds)
    assert compute == sorted(compute)


def test_uniform_preset_covers_all_nine_kinds():
    fleet = preset_fleet("paper-uniform", 20, seed=0)
    kinds = Counter((d.flops, d.transfer_rate) for d in fleet)
    assert len(kinds) == 9
    assert set(f for f, _ in kinds) == set(QUALITY_FLOPS.values())
    assert set(r for _, r in kinds) == set(QUALITY_RATE.values())
    assert [d.client_id for d in fleet] == list(range(20))


def test_table_values():
    assert QUALITY_FLOPS == {"low": 5e9, "mid": 1e10, "high": 2e10}
    assert QUALITY_RATE == {"low": 1e6, "mid": 2e6, "high": 5e6}
    assert ServerProfile().flops == 5e10 and ServerProfile().transfer_rate == 1e7


@pytest.mark.parametrize("name,mix", [("conf1", (5, 3, 2)), ("conf2", (2, 3, 5))])
def test_composition_presets(name, mix):
    fleet = preset_fleet(name, 10, seed=4)
    flops = Counter(d.flops for d in fleet)
    rates = Counter(d.transfer_rate for d in fleet)
    high, mid, low = mix
    assert flops == {2e10: high, 1e10: mid, 5e9: low}
    assert rates == {5e6: high, 2e6: mid, 1e6: low}


def test_single_device_fleet():
    fleet = make_fleet([(1e9, 1e6, 1)], seed=0)
    assert fleet == [DeviceProfile(0, 1e9, 1e6)]


def test_fleet_errors():
    with pytest.raises(ConfigError):
        make_fleet([], seed=0)
    with pytest.raises(ConfigError):
        make_fleet([(1e9, 1e6, 0)], seed=0)
    with pytest.raises(ConfigError):
        preset_fleet("nope", 3, seed=0)
    with pytest.raises(ConfigError):
        DeviceProfile(0, 0.0, 1.0)


def test_fleet_layout_depends_on_seed_only():
    a = preset_fleet("paper-uniform", 18, seed=1)
    assert a == preset_fleet("paper-uniform", 18, seed=1)
    assert a != preset_fleet("paper-uniform", 18, seed=2)
