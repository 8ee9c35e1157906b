"""Two-stage detection and classification of primate calls in long recordings.

Stage 1 scores every 10 ms MFCC frame with a bidirectional LSTM and decodes the
posteriors into call segments; stage 2 labels each segment as a clean call, a
call with non-linear phenomena, or a false alarm.
"""

__version__ = "0.1.0"
