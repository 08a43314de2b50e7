# Test package initialization
from __init__ import __version__
