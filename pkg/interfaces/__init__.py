"""
VerifScope - Interfaces Module
Contains the command line interface
"""
