"""Bidirectional Cyrillic/Traditional Mongolian word conversion toolkit.

Three interchangeable model families over a shared pipeline: a joint
graphone n-gram baseline, a BiLSTM encoder-decoder (with or without
attention), and a self-attention encoder-decoder.  See the ``cli`` module
for the train/convert/eval/sweep entry points.
"""

__version__ = "0.1.0"
