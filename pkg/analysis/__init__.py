"""
VerifScope - Analysis Module
Contains the logit lens, probes, GLU and head analyses and embedding maps
"""
