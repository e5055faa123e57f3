"""Rare fold-pattern detection with a convolutional beta-VAE on distance-map crops."""
