"""
VerifScope - Test Suite
"""
