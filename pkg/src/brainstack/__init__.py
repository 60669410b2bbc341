"""Neuro mixture-of-experts EEG decoding: regional CNets, a CTNet global expert, a softmax routing gate and a scheduled multi-objective loss."""
