"""Head-level causal analysis of modality-conflict hallucination.

Thin Python surface over the C++ core: run-config handling, the pipeline
stages, artifact readers, and the agreement/ranking metrics.
"""

try:
    from ._core import *  # noqa: F401,F403  (installed wheel layout)
    from ._core import __version__  # noqa: F401
except ImportError:  # in-tree CMake build: _core.so sits on sys.path
    from _core import *  # noqa: F401,F403
    from _core import __version__  # noqa: F401
