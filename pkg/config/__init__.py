"""
VerifScope - Configuration Module
Contains run configuration management
"""
