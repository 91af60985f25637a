try:
    from ._tandepth import *  # installed package layout
except ImportError:
    from _tandepth import *  # in-tree build on PYTHONPATH
