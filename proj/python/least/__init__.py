"""Masked-autoencoder pretraining for multi-lead physiological signals.

Thin re-export of the compiled extension. The extension lives inside this
package in installed wheels and on the raw import path for in-tree builds.
"""

try:
    from ._least import *  # noqa: F401,F403
    from ._least import __version__  # noqa: F401
except ImportError:
    from _least import *  # noqa: F401,F403
    from _least import __version__  # noqa: F401
