"""Polyphonic piano-roll modeling toolkit.

Trains a two-axis (time x note) LSTM on quantized MIDI, refines a
monophonic melody policy with a DQN whose reward blends the trained
model's log-probabilities with music-theory rules, and scores the
results with a quantitative metric suite.
"""

__version__ = "0.1.0"
