"""
VerifScope - Traces Module
Contains activation capture, the chunked trace store and probe datasets
"""
