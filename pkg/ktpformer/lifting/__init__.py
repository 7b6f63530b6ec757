"""
Pose-lifting library: a float64 reverse-mode tensor engine, skeleton and
trajectory topologies, prior attention modules, the spatio-temporal
transformer, training, evaluation and the file formats around them.
"""
