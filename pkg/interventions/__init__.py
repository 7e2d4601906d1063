"""
VerifScope - Interventions Module
Contains intervention plans, outcome grading and experiments
"""
