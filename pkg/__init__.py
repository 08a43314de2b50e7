# This file makes the 'mcaesthetics' directory a Python package.
__version__ = "0.1.0"
