"""Spatio-temporal deformable video instance segmentation at toy scale."""
