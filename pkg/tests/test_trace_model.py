import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from screamfuse.trace_model import (BadMagicError, ChannelMeta, Trace, TraceFormatError, TraceSet,
                                    TruncatedPayloadError, VersionMismatchError, read_trace_set,
                                    trace_set_from_traces, write_trace_set)

META = ChannelMeta(2.464e9, "f2464")
HEADER_SIZE = struct.calcsize("<4sHHQIIdH")


def random_set(rng, n=5, ns=8, keys=True, td=1):
    return TraceSet(META, rng.normal(size=(n, ns)), rng.integers(0, 256, (n, 16)),
                    rng.integers(0, 256, (n, 16)) if keys else None, td)


def test_channel_meta_rejects_nonpositive_frequency():
    with pytest.raises(ValueError):
        ChannelMeta(0.0, "x")
    with pytest.raises(ValueError):
        ChannelMeta(-1.0, "x")


def test_trace_plaintext_must_be_16_bytes():
    with pytest.raises(ValueError):
        Trace(np.zeros(4), b"\x00" * 15)
    with pytest.raises(ValueError):
        Trace(np.zeros(4), b"\x00" * 16, key=b"\x01")


def test_trace_set_validates_shapes(rng):
    with pytest.raises(ValueError):
        TraceSet(META, np.zeros((2, 4)), np.zeros((3, 16)))
    with pytest.raises(ValueError):
        TraceSet(META, np.zeros((2, 4)), np.zeros((2, 16)), n_samples=5)
    with pytest.raises(ValueError):
        TraceSet(META, np.zeros((2, 4)), np.zeros((2, 16)), time_diversity=0)
    with pytest.raises(ValueError):
        trace_set_from_traces(META, [Trace(np.zeros(4), bytes(16)), Trace(np.zeros(5), bytes(16))], 4)


def test_trace_set_is_read_only(rng):
    ts = random_set(rng)
    with pytest.raises(ValueError):
        ts.samples[0, 0] = 1.0


def test_trace_set_from_traces_matches_arrays(rng):
    ts = random_set(rng)
    again = trace_set_from_traces(META, list(ts.traces), ts.n_samples)
    assert again == ts


def test_mixed_keys_rejected():
    t1 = Trace(np.zeros(4), bytes(16), bytes(16))
    t2 = Trace(np.zeros(4), bytes(16))
    with pytest.raises(ValueError):
        trace_set_from_traces(META, [t1, t2], 4)


def test_empty_set_round_trips(tmp_path):
    ts = TraceSet(META, np.zeros((0, 8)), np.zeros((0, 16)), n_samples=8)
    p = tmp_path / "empty.scrm"
    write_trace_set(ts, p)
    assert p.stat().st_size == HEADER_SIZE + len(META.label)
    back = read_trace_set(p)
    assert back.n_traces == 0 and back.n_samples == 8
    assert back == ts


def test_file_size_matches_layout(tmp_path, rng):
    # two traces of four samples, no keys: 16 plaintext bytes + 4 float32 per trace
    ts = random_set(rng, n=2, ns=4, keys=False)
    p = tmp_path / "two.scrm"
    write_trace_set(ts, p)
    assert p.stat().st_size == HEADER_SIZE + len(META.label) + 2 * (16 + 4 * 4)


def test_key_flag_and_round_trip(tmp_path, rng):
    ts = random_set(rng, keys=True)
    p = tmp_path / "k.scrm"
    write_trace_set(ts, p)
    flags = struct.unpack_from("<4sHH", p.read_bytes())[2]
    assert flags & 1
    back = read_trace_set(p)
    np.testing.assert_array_equal(back.keys, ts.keys)


def test_bad_magic(tmp_path, rng):
    p = tmp_path / "x.scrm"
    write_trace_set(random_set(rng), p)
    data = bytearray(p.read_bytes())
    data[:4] = b"NOPE"
    p.write_bytes(bytes(data))
    with pytest.raises(BadMagicError):
        read_trace_set(p)


def test_version_mismatch(tmp_path, rng):
    p = tmp_path / "x.scrm"
    write_trace_set(random_set(rng), p)
    data = bytearray(p.read_bytes())
    data[4:6] = (99).to_bytes(2, "little")
    p.write_bytes(bytes(data))
    with pytest.raises(VersionMismatchError):
        read_trace_set(p)


def test_truncated_mid_trace(tmp_path, rng):
    p = tmp_path / "x.scrm"
    write_trace_set(random_set(rng), p)
    p.write_bytes(p.read_bytes()[:-7])
    with pytest.raises(TruncatedPayloadError):
        read_trace_set(p)


def test_trailing_bytes_rejected(tmp_path, rng):
    p = tmp_path / "x.scrm"
    write_trace_set(random_set(rng), p)
    p.write_bytes(p.read_bytes() + b"\x00")
    with pytest.raises(TraceFormatError):
        read_trace_set(p)


def test_subset_scaled_without_keys(rng):
    ts = random_set(rng, n=6)
    sub = ts.subset([4, 1])
    np.testing.assert_array_equal(sub.samples, ts.samples[[4, 1]])
    np.testing.assert_array_equal(sub.keys, ts.keys[[4, 1]])
    np.testing.assert_array_equal(ts.scaled(-1).samples, -ts.samples)
    assert ts.without_keys().keys is None


@given(n=st.integers(0, 6), ns=st.integers(1, 9), keys=st.booleans(), td=st.integers(1, 3),
       seed=st.integers(0, 2**32 - 1), label=st.text(max_size=12))
def test_round_trip_property(tmp_path_factory, n, ns, keys, td, seed, label):
    rng = np.random.default_rng(seed)
    samples = rng.normal(size=(n, ns)) * 10 ** rng.uniform(-3, 3)
    ts = TraceSet(ChannelMeta(float(rng.uniform(1, 1e10)), label), samples,
                  rng.integers(0, 256, (n, 16)), rng.integers(0, 256, (n, 16)) if keys else None,
                  td, ns)
    p = tmp_path_factory.mktemp("rt") / "t.scrm"
    write_trace_set(ts, p)
    back = read_trace_set(p)
    assert back == ts
    assert back.samples.tobytes() == ts.samples.tobytes()
