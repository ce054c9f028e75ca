import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dpm.config import ConfigError, ExperimentConfig, load_config, parse_config
from dpm.grid import GridSpec
from dpm.io import RecordError, Snapshot, pack_record, read_snapshot, unpack_record, write_snapshot


def make_snapshot(rng, kind="dns"):
    return Snapshot(kind, GridSpec(4), 0.125, 0.01, 1.0,
                    {"u": rng.standard_normal((3, 4, 4, 4)), "p": rng.standard_normal((4, 4, 4))},
                    case_id="mu1p000", seed=7, config_hash="abc", meta={"t_l0": 1.5, "index": 3})


class TestRecords:
    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(0, 4), st.integers(1, 3)),
                  elements=st.floats(allow_nan=True, allow_infinity=True, width=64)))
    def test_round_trip_bitwise(self, a):
        header, back = unpack_record(pack_record(b"TESTREC1", {"x": 1}, {"a": a}), b"TESTREC1")
        assert header["x"] == 1
        assert back["a"].tobytes() == np.ascontiguousarray(a).tobytes()

    def test_rejections(self):
        blob = pack_record(b"TESTREC1", {}, {"a": np.arange(3.0)})
        with pytest.raises(RecordError, match="magic"):
            unpack_record(blob, b"OTHERREC")
        with pytest.raises(RecordError):
            unpack_record(blob[:10], b"TESTREC1")
        with pytest.raises(RecordError, match="payload"):
            unpack_record(blob[:-1], b"TESTREC1")
        bad = bytearray(blob)
        bad[-1] ^= 1
        with pytest.raises(RecordError, match="checksum"):
            unpack_record(bytes(bad), b"TESTREC1")
        bad = bytearray(blob)
        bad[8] = 9
        with pytest.raises(RecordError, match="version"):
            unpack_record(bytes(bad), b"TESTREC1")
        with pytest.raises(ValueError):
            pack_record(b"SHORT", {}, {})


class TestSnapshot:
    def test_file_round_trip(self, tmp_path, rng):
        snap = make_snapshot(rng)
        path = tmp_path / "a" / "s.dpms"
        write_snapshot(snap, path)
        back = read_snapshot(path)
        assert back.grid == snap.grid and back.meta == snap.meta and back.seed == 7
        for k in snap.arrays:
            assert np.array_equal(back.arrays[k], snap.arrays[k])
        assert back.to_bytes() == path.read_bytes()
        assert not list(tmp_path.rglob("*.part"))

    def test_kind_checked(self, rng):
        with pytest.raises(ValueError):
            make_snapshot(rng, kind="raw")


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert cfg.les_n == 16
        assert cfg.cases.train == [0.5, 1.0, 2.0]
        assert cfg.grid.domain_length == pytest.approx(2 * math.pi)

    def test_parse_values(self):
        cfg = parse_config("""
[grid]
dns_n = 32
[cases]
train = 0.5, 1.0
test = 1.5
heldout = 1.5
[training]
divergence_free = off
iterations = 10
""")
        assert cfg.grid.dns_n == 32 and cfg.les_n == 8
        assert cfg.cases.train == [0.5, 1.0]
        assert cfg.training.divergence_free is False and cfg.training.iterations == 10

    @pytest.mark.parametrize("text,match", [
        ("[bogus]\nx = 1\n", "unknown section"),
        ("[grid]\nresolution = 3\n", "unknown key 'resolution'"),
        ("[grid]\ndns_n = many\n", "invalid value"),
        ("[filter]\nratio = 3\n", "filter.ratio"),
        ("[training]\nmode = magic\n", "training.mode"),
        ("[cases]\nheldout = 9.0\n", "heldout"),
        ("[model]\noutput_scale = -2\n", "output_scale"),
        ("[evaluation]\nclosures = no_model, wale\n", "wale"),
        ("[training]\ndivergence_free = maybe\n", "invalid value"),
        ("not an ini", "malformed"),
    ])
    def test_errors_name_the_entry(self, text, match):
        with pytest.raises(ConfigError, match=match):
            parse_config(text)

    def test_ini_round_trip_and_hashes(self, tmp_path):
        cfg = parse_config("[training]\niterations = 7\n[experiment]\noutput_dir = elsewhere\n")
        path = tmp_path / "c.ini"
        path.write_text(cfg.to_ini())
        back = load_config(path)
        assert back.to_dict() == cfg.to_dict()
        assert back.config_hash() == ExperimentConfig(**{
            k: v for k, v in vars(parse_config("[training]\niterations = 7\n")).items()}).config_hash()
        # training settings do not change the data hash
        assert cfg.data_hash() == ExperimentConfig().data_hash()
        assert cfg.config_hash() != ExperimentConfig().config_hash()

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "none.ini")
