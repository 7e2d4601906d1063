"""
VerifScope - Training Module
Contains manual backpropagation, the gradient check and the trainer
"""
