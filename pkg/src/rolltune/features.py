"""Per-note input features for the recurrent model.

Every (note, step) cell of a piano roll expands to an 80-wide vector:

  [ 0]      MIDI number of the note, scaled by 1/128
  [ 1..12]  one-hot pitch class (0 = C)
  [13..62]  vicinity: the (play, articulate) pairs of the 25 notes from
            an octave below to an octave above, ascending, zeros past
            the edges of the roll
  [63..74]  count of sounding notes in each pitch class at this step
  [75..78]  position within the measure as 4 binary digits of
            (step mod 16), least significant first
  [79]      constant zero pad

The expansion has no parameters and depends only on the step's own
column plus the step index, which lets generation and the tuner expand
single columns on the fly.
"""

from __future__ import annotations

import numpy as np

from .midiio import NoteStateMatrix

FEATURE_WIDTH = 80
VICINITY_RADIUS = 12
_VICINITY = 2 * VICINITY_RADIUS + 1
_BEAT_PERIOD = 16


def expand_columns(columns: np.ndarray, note_low: int,
                   positions: np.ndarray) -> np.ndarray:
    """Expand a batch of single-step columns.

    columns has shape (R, N, 2) and positions (R,), giving each column's
    absolute step index (negative values wrap, so a column seeded one
    step before a piece starts sits at the last beat of a measure).
    Returns (R, N, FEATURE_WIDTH) float64.
    """
    columns = np.asarray(columns, dtype=np.float64)
    r, n, _ = columns.shape
    out = np.zeros((r, n, FEATURE_WIDTH))
    midi = note_low + np.arange(n)
    out[:, :, 0] = midi / 128.0
    pitch_class = midi % 12
    out[:, np.arange(n), 1 + pitch_class] = 1.0

    padded = np.zeros((r, n + 2 * VICINITY_RADIUS, 2))
    padded[:, VICINITY_RADIUS:VICINITY_RADIUS + n] = columns
    for k in range(_VICINITY):
        out[:, :, 13 + 2 * k] = padded[:, k:k + n, 0]
        out[:, :, 14 + 2 * k] = padded[:, k:k + n, 1]

    counts = np.zeros((r, 12))
    for pc in range(12):
        counts[:, pc] = columns[:, pitch_class == pc, 0].sum(axis=1)
    out[:, :, 63:75] = counts[:, None, :]

    beat = np.mod(np.asarray(positions, dtype=np.int64), _BEAT_PERIOD)
    for bit in range(4):
        out[:, :, 75 + bit] = ((beat >> bit) & 1)[:, None]
    return out


def expand(matrix: NoteStateMatrix) -> np.ndarray:
    """Expand a whole piano roll to (N, T, FEATURE_WIDTH).

    Step 0 of the matrix is taken to sit on a measure boundary.
    """
    cols = np.transpose(matrix.data, (1, 0, 2))       # (T, N, 2)
    feats = expand_columns(cols, matrix.note_low,
                           np.arange(matrix.n_steps))
    return np.transpose(feats, (1, 0, 2))             # (N, T, 80)


def expand_batch(batch: np.ndarray, note_low: int) -> np.ndarray:
    """Expand a batch of rolls (B, N, T, 2) to (B, N, T, FEATURE_WIDTH);
    every segment is assumed to start on a measure boundary."""
    b, n, t, _ = batch.shape
    cols = np.transpose(batch, (0, 2, 1, 3)).reshape(b * t, n, 2)
    positions = np.tile(np.arange(t), b)
    feats = expand_columns(cols, note_low, positions)
    return np.transpose(feats.reshape(b, t, n, FEATURE_WIDTH), (0, 2, 1, 3))
