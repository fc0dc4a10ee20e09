"""Constants of the Bark-domain simultaneous-masking model.

Kept in one place so an alternative psychoacoustic model can be dropped in
by editing this file only.
"""

import numpy as np

# Loudest PSD bin of the original signal is mapped to this SPL.
REFERENCE_SPL_DB = 96.0

# Absolute threshold of hearing clamp (normalized dB scale).
ATH_MIN_DB = -30.0
ATH_MAX_DB = 96.0

# Tonal masker: local maximum exceeding its neighbourhood by this margin.
TONALITY_MARGIN_DB = 7.0
# Neighbourhood half-widths in Hz as (upper frequency edge, width). These are
# the classic 2/3/6-bin ranges of a 512-point FFT at 44.1 kHz.
TONAL_NEIGHBOURHOOD_HZ = (
    (5500.0, 2 * 44100.0 / 512),
    (11000.0, 3 * 44100.0 / 512),
    (np.inf, 6 * 44100.0 / 512),
)

# Maskers closer than this are merged (the stronger survives).
MASKER_PRUNE_BARK = 0.5

# Masking index: offset = a + b * z (z in Bark).
TONAL_INDEX = (-6.025, -0.275)
NOISE_INDEX = (-2.025, -0.175)

# Two-slope spreading function, dB per Bark.
LOWER_SLOPE_DB = 27.0
UPPER_SLOPE_BASE_DB = 24.0
UPPER_SLOPE_FREQ_HZ = 230.0  # adds 230 / f_masker dB/Bark at low masker frequencies
UPPER_SLOPE_LEVEL = 0.2  # loud maskers spread further upward

# Critical band edges (Hz), Zwicker.
CRITICAL_BAND_EDGES_HZ = np.array(
    [0, 100, 200, 300, 400, 510, 630, 770, 920, 1080, 1270, 1480, 1720, 2000,
     2320, 2700, 3150, 3700, 4400, 5300, 6400, 7700, 9500, 12000, 15500, 22050],
    dtype=np.float64,
)
