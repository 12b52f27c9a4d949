import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from csskit.css import (align_permutation, css_run, extract_chunk, merge_single_speaker, plan_chunks,
                        stitch)
from csskit.dsp import AudioBuffer, si_sdr, stft

from _tones import HIGH_BAND, LOW_BAND, SR, tone


# ---------------------------------------------------------------- planning

def test_eight_seconds_gives_five_chunks():
    plan = plan_chunks(8 * SR)
    assert len(plan) == 5
    assert [c.cur_start / SR for c in plan.chunks] == pytest.approx([0, 1.6, 3.2, 4.8, 6.4])
    assert all(c.span == int(2.4 * SR) for c in plan.chunks)
    assert plan.chunks[0].hist_start == -int(0.7 * SR)


@pytest.mark.parametrize("n, k", [(SR, 1), (int(1.6 * SR), 1), (int(3.2 * SR), 2), (int(16 * SR), 10), (int(1.6 * SR) + 1, 2)])
def test_chunk_counts(n, k):
    plan = plan_chunks(n)
    assert len(plan) == k
    assert plan.chunks[-1].cur_end == n


def test_plan_errors():
    with pytest.raises(ValueError):
        plan_chunks(100, t_c=0)
    with pytest.raises(ValueError):
        plan_chunks(0)


@given(st.integers(1, 20 * SR), st.floats(0, 1), st.floats(0.05, 2), st.floats(0, 0.5))
def test_current_regions_tile(n, t_h, t_c, t_f):
    plan = plan_chunks(n, SR, t_h, t_c, t_f)
    covered = np.zeros(n, int)
    for c in plan.chunks:
        covered[c.cur_start:c.cur_end] += 1
        assert c.span == c.fut_end - c.hist_start
    assert np.all(covered == 1)
    assert all(a.cur_end == b.cur_start for a, b in zip(plan.chunks, plan.chunks[1:]))


def test_extract_zero_pads_boundaries():
    x = np.arange(1, 2 * SR + 1, dtype=float)
    plan = plan_chunks(len(x))
    first, last = extract_chunk(x, plan.chunks[0]), extract_chunk(x, plan.chunks[-1])
    h = int(0.7 * SR)
    assert not np.any(first[:h]) and first[h] == 1.0
    assert last[-1] == 0.0 and np.count_nonzero(last) == len(x) - plan.chunks[-1].hist_start


# ---------------------------------------------------------------- alignment

def test_align_identity_swap_and_empty(rng):
    a, b = rng.standard_normal(4000), rng.standard_normal(4000)
    assert align_permutation([a, b], [a, b])[0] == (0, 1)
    assert align_permutation([a, b], [b, a])[0] == (1, 0)
    perm, info = align_permutation([a[:0], b[:0]], [a[:0], b[:0]])
    assert perm == (0, 1) and info["empty_overlap"]
    # equal energy, no content: tie goes to identity
    z = np.zeros(4000)
    assert align_permutation([z, z], [z, z])[0] == (0, 1)


@given(st.integers(0, 2**31 - 1), st.integers(2, 3))
def test_align_matches_brute_force(seed, n):
    r = np.random.default_rng(seed)
    prev = [r.standard_normal(1200) for _ in range(n)]
    cur = [r.standard_normal(1200) for _ in range(n)]
    mags_p = [np.abs(stft(AudioBuffer(x, SR)).frames) for x in prev]
    mags_c = [np.abs(stft(AudioBuffer(x, SR)).frames) for x in cur]
    oracle = min(itertools.permutations(range(n)),
                 key=lambda p: sum(np.sum((mags_p[i] - mags_c[p[i]]) ** 2) for i in range(n)))
    assert align_permutation(prev, cur)[0] == oracle


# ---------------------------------------------------------------- stitching

def chunked(streams, plan, sigmas):
    """Head h of chunk k carries ground-truth stream sigmas[k][h]."""
    return [[extract_chunk(streams[sig[h]], c) for h in range(len(sig))] for c, sig in zip(plan.chunks, sigmas)]


def test_single_chunk_is_current_region(rng):
    x = rng.standard_normal(SR)
    plan = plan_chunks(len(x))
    outs = [[extract_chunk(x, plan.chunks[0]), extract_chunk(-x, plan.chunks[0])]]
    streams, state = stitch(outs, plan)
    assert np.array_equal(streams[0].samples, x) and np.array_equal(streams[1].samples, -x)
    assert state.local == []


def test_echo_model_reproduces_input(rng):
    x = rng.standard_normal(7 * SR + 123)
    plan = plan_chunks(len(x))
    outs = [[extract_chunk(x, c), np.zeros(c.span)] for c in plan.chunks]
    streams, state = stitch(outs, plan)
    assert np.array_equal(streams[0].samples, x) and not np.any(streams[1].samples)
    assert state.flips == 0


def test_alternating_swaps_recover_streams_exactly(rng):
    g = [rng.standard_normal(8 * SR), rng.standard_normal(8 * SR)]
    plan = plan_chunks(8 * SR)
    sigmas = [(0, 1) if k % 2 == 0 else (1, 0) for k in range(len(plan))]
    streams, state = stitch(chunked(g, plan, sigmas), plan)
    assert all(np.array_equal(s.samples, t) for s, t in zip(streams, g))
    assert state.flips == len(plan) - 1


def test_stitch_errors(rng):
    plan = plan_chunks(4 * SR)
    outs = chunked([rng.standard_normal(4 * SR)] * 2, plan, [(0, 1)] * len(plan))
    with pytest.raises(ValueError):
        stitch(outs[:-1], plan)
    outs[1] = [o[:-1] for o in outs[1]]
    with pytest.raises(ValueError):
        stitch(outs, plan)


@given(st.integers(0, 2**31 - 1), st.integers(2, 3), st.integers(2, 6))
def test_running_permutation_is_composition(seed, n, n_chunks):
    r = np.random.default_rng(seed)
    length = int(n_chunks * 0.4 * SR)
    g = [r.standard_normal(length) for _ in range(n)]
    plan = plan_chunks(length, SR, 0.1, 0.4, 0.05)
    sigmas = [tuple(r.permutation(n)) for _ in plan.chunks]
    streams, state = stitch(chunked(g, plan, sigmas), plan)
    inverse = lambda p: tuple(int(np.argsort(p)[s]) for s in range(n))
    composed = tuple(range(n))  # stream s is head s of the first chunk
    for k, local in enumerate(state.local, start=1):
        assert local == tuple(inverse(sigmas[k])[sigmas[k - 1][i]] for i in range(n))
        composed = tuple(local[composed[s]] for s in range(n))
    assert state.running == composed == tuple(inverse(sigmas[-1])[sigmas[0][s]] for s in range(n))
    for s in range(n):
        assert np.array_equal(streams[s].samples, g[sigmas[0][s]])


# ---------------------------------------------------------------- single-speaker merger

def test_merge_zero_stream_is_noop(rng):
    x = AudioBuffer(rng.standard_normal(3 * SR), SR)
    out, merged = merge_single_speaker([x, AudioBuffer(np.zeros(3 * SR), SR)])
    assert np.allclose(out[0].samples, x.samples) and not np.any(out[1].samples)
    assert merged


def test_merge_equal_energy_untouched(rng):
    a, b = (AudioBuffer(rng.standard_normal(3 * SR), SR) for _ in range(2))
    out, merged = merge_single_speaker([a, b])
    assert merged == []
    assert np.array_equal(out[0].samples, a.samples) and np.array_equal(out[1].samples, b.samples)


def test_merge_quiet_stream_folded_in(rng):
    a = rng.standard_normal(4 * SR)
    b = 10 ** (-30 / 20) * rng.standard_normal(4 * SR)
    out, merged = merge_single_speaker([AudioBuffer(a, SR), AudioBuffer(b, SR)])
    assert len(merged) == len(range(0, 4 * SR - int(0.8 * SR) + int(0.4 * SR), int(0.4 * SR)))
    assert all(w == 0 for _, w in merged)
    assert not np.any(out[1].samples)
    assert np.allclose(out[0].samples, a + b)


@given(st.integers(0, 2**31 - 1), st.floats(-40, 0), st.floats(1.0, 5.0))
def test_merge_conserves_energy(seed, level_db, seconds):
    r = np.random.default_rng(seed)
    n = int(seconds * SR)
    a = r.standard_normal(n)
    b = 10 ** (level_db / 20) * r.standard_normal(n) * (np.arange(n) > n // 2)
    out, _ = merge_single_speaker([AudioBuffer(a, SR), AudioBuffer(b, SR)])
    before = np.sum(a ** 2) + np.sum(b ** 2)
    after = sum(np.sum(o.samples ** 2) for o in out)
    assert 0.98 * before <= after <= 1.02 * before


# ---------------------------------------------------------------- end to end

def echo(seg):
    return [seg, AudioBuffer(np.zeros(len(seg)), seg.sample_rate)]


def test_silence_gives_silent_streams():
    res = css_run(echo, AudioBuffer(np.zeros(3 * SR), SR))
    assert all(not np.any(s.samples) for s in res.streams)
    assert res.report["chunks"] == 2 and res.report["chunk_span_s"] == pytest.approx(2.4)


@pytest.mark.parametrize("seconds", [0.3, 1.6, 2.05, 5.0])
def test_lengths_match_input(seconds, rng):
    x = AudioBuffer(0.05 * rng.standard_normal(int(seconds * SR)), SR)
    res = css_run(echo, x)
    assert all(len(s) == len(x) for s in res.streams)
    assert {"chunks", "permutation_flips", "merged_windows", "wall_time_s"} <= res.report.keys()


def long_tones(rng, seconds=8.0, segment=2.0):
    lo, hi = [], []
    for _ in range(int(seconds / segment)):
        n = int(segment * SR)
        lo.append(tone(rng, LOW_BAND, n, 0.05))
        hi.append(tone(rng, HIGH_BAND, n, 0.05))
    return np.concatenate(lo), np.concatenate(hi)


def test_css_separates_long_tone_recording(tone_model):
    model, _ = tone_model
    lo, hi = long_tones(np.random.default_rng(3))
    res = css_run(model, AudioBuffer(lo + hi, SR))
    scores = max(([si_sdr(res.streams[p[j]], ref) for j, ref in enumerate((lo, hi))]
                  for p in itertools.permutations(range(2))), key=sum)
    assert min(scores) > 10, scores


def test_css_is_deterministic(tone_model):
    model, _ = tone_model
    lo, hi = long_tones(np.random.default_rng(4), seconds=4.0)
    a = css_run(model, AudioBuffer(lo + hi, SR))
    b = css_run(model, AudioBuffer(lo + hi, SR))
    assert all(np.array_equal(x.samples, y.samples) for x, y in zip(a.streams, b.streams))
    assert a.report["local_permutations"] == b.report["local_permutations"]
