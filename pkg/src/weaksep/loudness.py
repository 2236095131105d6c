"""Integrated loudness (ITU-R BS.1770 / EBU R128) for mono clips.

K-weighting coefficients are derived from the analog prototype for any
sample rate (the 48 kHz table in the standard is one instance), followed by
400 ms gating blocks with 75% overlap, an absolute gate at -70 LUFS and a
relative gate 10 LU below the absolutely-gated level.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.signal import lfilter

from .dsp import AudioClip

UNDEFINED_LOUDNESS = float("-inf")

BLOCK_S = 0.4
BLOCK_OVERLAP = 0.75
ABSOLUTE_GATE = -70.0
RELATIVE_GATE = -10.0


def k_weighting_filters(sample_rate: int):
    """Return ``[(b, a), (b, a)]`` for the shelving and high-pass stages."""
    # pre-filter: high-frequency shelf modelling the head
    f0, gain_db, q = 1681.974450955533, 3.999843853973347, 0.7071752369554196
    k = math.tan(math.pi * f0 / sample_rate)
    vh = 10.0 ** (gain_db / 20.0)
    vb = vh ** 0.4996667741545416
    a0 = 1.0 + k / q + k * k
    shelf_b = np.array([(vh + vb * k / q + k * k) / a0, 2.0 * (k * k - vh) / a0, (vh - vb * k / q + k * k) / a0])
    shelf_a = np.array([1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0])
    # RLB high-pass
    f0, q = 38.13547087602444, 0.5003270373238773
    k = math.tan(math.pi * f0 / sample_rate)
    a0 = 1.0 + k / q + k * k
    hp_b = np.array([1.0, -2.0, 1.0])
    hp_a = np.array([1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0])
    return [(shelf_b, shelf_a), (hp_b, hp_a)]


def _block_powers(samples: np.ndarray, sample_rate: int) -> np.ndarray:
    y = samples
    for b, a in k_weighting_filters(sample_rate):
        y = lfilter(b, a, y)
    block = int(round(BLOCK_S * sample_rate))
    step = int(round(BLOCK_S * (1.0 - BLOCK_OVERLAP) * sample_rate))
    if len(y) < block:
        # shorter than one gating block: treat the whole clip as a single block
        return np.array([np.mean(y ** 2)])
    csum = np.concatenate([[0.0], np.cumsum(y ** 2)])
    starts = np.arange(0, len(y) - block + 1, step)
    return (csum[starts + block] - csum[starts]) / block


def _to_lufs(power):
    return -0.691 + 10.0 * np.log10(power)


def measure_loudness(clip: AudioClip) -> float:
    """Integrated loudness in LUFS, or ``UNDEFINED_LOUDNESS`` for digital silence.

    A nonzero clip whose blocks all fall below the absolute gate is given its
    ungated level instead, so quiet recordings can still be normalized.
    """
    powers = _block_powers(clip.samples, clip.sample_rate)
    if not np.any(powers > 0):
        return UNDEFINED_LOUDNESS
    with np.errstate(divide="ignore"):
        levels = _to_lufs(powers)
    gated = powers[levels > ABSOLUTE_GATE]
    if gated.size == 0:
        return float(_to_lufs(powers.mean()))
    threshold = _to_lufs(gated.mean()) + RELATIVE_GATE
    gated = powers[(levels > ABSOLUTE_GATE) & (levels > threshold)]
    return float(_to_lufs(gated.mean()))


def loudness_gain(clip: AudioClip, target: float) -> float:
    """Linear gain that brings ``clip`` to ``target`` LUFS."""
    current = measure_loudness(clip)
    if current == UNDEFINED_LOUDNESS:
        raise ValueError("cannot normalize a silent clip: loudness is undefined")
    gain = 10.0 ** ((target - current) / 20.0)
    # the absolute gate is not scale-invariant; one correction pass settles it
    after = measure_loudness(AudioClip(clip.samples * gain, clip.sample_rate))
    if after != UNDEFINED_LOUDNESS:
        gain *= 10.0 ** ((target - after) / 20.0)
    return gain


def normalize_loudness(clip: AudioClip, target: float) -> AudioClip:
    return AudioClip(clip.samples * loudness_gain(clip, target), clip.sample_rate)
