"""Analysis-by-synthesis capture of articulated animal pose, shape and texture."""

__version__ = "0.1.0"
