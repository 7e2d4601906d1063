"""
VerifScope - CountDown Module
Contains the arithmetic, solver, tokenizer, transcript parser and corpus
"""
