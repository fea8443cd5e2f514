"""
rasnet - recurrent channel attention for pre-activation ResNets on a numpy autodiff core.
"""

__version__ = "1.0.0"
