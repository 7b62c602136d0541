"""Hot-kernel implementations, one module per backend.

lanedetect.backend picks which module serves the package; import the
modules here directly only to compare them against each other.
"""
