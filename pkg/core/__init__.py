"""
VerifScope - Core Module
Contains numerics, the transformer, weight I/O and the stage pipeline
"""
