# Command line interface package.
