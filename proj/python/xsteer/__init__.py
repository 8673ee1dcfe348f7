"""Cross-architecture activation steering on toy transformers."""

try:
    from ._xsteer import *  # noqa: F401,F403
except ImportError:  # extension built outside the package, e.g. in a CMake tree
    from _xsteer import *  # noqa: F401,F403
