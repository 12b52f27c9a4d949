import numpy as np
import pytest

from csskit.bench import (BenchmarkError, BusyWaitPipeline, SweepEntry, cost_sweep, count_params,
                          enumerate_params, format_table, make_probe, measure_rtf, rtf_from_time)
from csskit.separator import SeparatorConfig
from csskit.separator.model import SEPARATOR_PRESETS, SEPARATOR_REPORTED_PARAMS_M
from csskit.ssl_encoder import EncoderConfig
from csskit.ssl_encoder.model import ENCODER_PRESETS, ENCODER_REPORTED_PARAMS_M


def test_rtf_definition():
    assert rtf_from_time(0.504) == pytest.approx(0.21)
    assert rtf_from_time(2.4) == 1.0


def test_busy_wait_rtf():
    rep = measure_rtf(BusyWaitPipeline(0.24), runs=5, warmup=1)
    assert rep.mean_rtf == pytest.approx(0.10, abs=0.01)
    assert rep.runs == len(rep.times) == 5
    assert rep.mean_rtf == pytest.approx(np.mean(rep.times) / rep.probe_duration)
    assert rep.probe_duration == pytest.approx(2.4)


def test_environment_descriptor():
    rep = measure_rtf(BusyWaitPipeline(0.001), runs=2)
    env = rep.environment
    assert env["torch_threads"] == 1 and env["warmup_runs"] == 3
    assert {"os", "cpu", "cores", "pinned", "boundary"} <= env.keys()


def test_failure_discards_timings():
    calls = []

    def flaky(audio):
        calls.append(1)
        if len(calls) > 5:
            raise RuntimeError("boom")

    with pytest.raises(BenchmarkError, match="discarded"):
        measure_rtf(flaky, runs=10)
    with pytest.raises(ValueError):
        measure_rtf(BusyWaitPipeline(0), runs=0)


def test_repeat_measurement_is_stable():
    pipe = SweepEntry("mid", SeparatorConfig(n_layers=4, n_heads=4, model_dim=128, ff_dim=256)).build()
    a = measure_rtf(pipe).mean_rtf
    b = measure_rtf(pipe).mean_rtf
    assert abs(a - b) <= 0.1 * max(a, b)


# ---------------------------------------------------------------- parameter accounting

@pytest.mark.parametrize("cfg", [
    SeparatorConfig(n_layers=0, n_heads=1, model_dim=4, ff_dim=8),
    SeparatorConfig(n_layers=3, n_heads=2, model_dim=16, ff_dim=24, embed_dim=12, conv_kernel=7),
    SeparatorConfig(n_layers=1, n_heads=4, model_dim=64, ff_dim=32, n_outputs=3),
    SeparatorConfig.preset("SS-59"),
    EncoderConfig(n_layers=0, n_heads=1, model_dim=4, ff_dim=8, vocab_k=3),
    EncoderConfig(n_layers=2, n_heads=2, model_dim=32, ff_dim=64),
    EncoderConfig.preset("large"),
])
def test_closed_form_matches_enumeration(cfg):
    assert count_params(cfg) == enumerate_params(cfg)


def test_zero_layer_hand_counts():
    sep = SeparatorConfig(n_layers=0, n_heads=1, model_dim=4, ff_dim=8)
    # input LayerNorm(257) + Linear(257->4) + two mask heads Linear(4->257)
    assert count_params(sep) == 2 * 257 + (257 * 4 + 4) + 2 * (4 * 257 + 257)
    enc = EncoderConfig(n_layers=0, n_heads=1, model_dim=4, ff_dim=8, vocab_k=3)
    # input LayerNorm(40) + Linear(40->4) + mask embedding + final LayerNorm(4) + label head Linear(4->3)
    assert count_params(enc) == 2 * 40 + (40 * 4 + 4) + 4 + 2 * 4 + (4 * 3 + 3)


def test_count_params_rejects_other_types():
    with pytest.raises(TypeError):
        count_params({"n_layers": 2})


def within(count, reported_m, tol=0.15):
    return abs(count / 1e6 - reported_m) <= tol * reported_m


@pytest.mark.parametrize("name", ["SS-9.5", "SS-59", "SS-79", "SS-92"])
def test_separator_presets_match_table(name):
    assert within(count_params(SeparatorConfig.preset(name)), SEPARATOR_REPORTED_PARAMS_M[name])


@pytest.mark.parametrize("name", ["base", "large"])
def test_encoder_presets_match_table(name):
    assert within(count_params(EncoderConfig.preset(name)), ENCODER_REPORTED_PARAMS_M[name])


def test_table_rows_are_not_jointly_linear_in_layers():
    # SS-9.5 and SS-26 share every width and differ only in depth (8 vs 16 layers);
    # any count of the form a + b * n_layers with a >= 0 is at most twice the
    # 8-layer count at 16 layers, so both rows cannot fit within 15%
    assert SEPARATOR_PRESETS["SS-9.5"][1:] == SEPARATOR_PRESETS["SS-26"][1:]
    small = count_params(SeparatorConfig.preset("SS-9.5"))
    big = count_params(SeparatorConfig.preset("SS-26"))
    assert big <= 2 * small
    assert 2 * 9.5 * 1.15 < 26 * 0.85
    # WavLM Small at its listed dims lands far below the listed total
    assert count_params(EncoderConfig.preset("small")) < 0.5 * ENCODER_REPORTED_PARAMS_M["small"] * 1e6
    assert ENCODER_PRESETS["small"] == (12, 12, 384, 1536)


# ---------------------------------------------------------------- sweeps

def test_empty_sweep():
    records, table = cost_sweep([], runs=1)
    assert records == []
    assert table.split() == ["config", "ss_params", "ssl_params", "rtf"]


def test_sweep_sorts_by_rtf():
    small = SeparatorConfig(n_layers=1, n_heads=2, model_dim=16, ff_dim=32)
    big = SeparatorConfig(n_layers=4, n_heads=2, model_dim=64, ff_dim=128)
    enc = EncoderConfig(n_layers=2, n_heads=2, model_dim=16, ff_dim=32)
    entries = [SweepEntry("big", big), SweepEntry("small", small), SweepEntry("ssl", small, enc, use_layers=1)]
    records, table = cost_sweep(entries, probe=make_probe(1.0), runs=3)
    rtfs = [r["rtf"] for r in records]
    assert rtfs == sorted(rtfs)
    assert records[-1]["config"] == "big"
    ssl = next(r for r in records if r["config"] == "ssl")
    assert ssl["ssl_params"] == count_params(EncoderConfig(n_layers=1, n_heads=2, model_dim=16, ff_dim=32))
    assert len(table.splitlines()) == 4 and "x " in table


def test_format_table_columns():
    text = format_table([{"config": "B1", "ss_params": 26e6, "ssl_params": None, "rtf": 0.21}])
    assert text.splitlines()[1].split() == ["B1", "26.00M", "-", "x", "0.210"]
