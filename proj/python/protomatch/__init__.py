"""Training-free prototype matching for instance detection.

Class ids are plain ints and embeddings are sequences of floats. Library
failures raise :class:`Error`, whose ``code`` attribute names the error
family (for example ``"DuplicateClass"``).
"""

from ._protomatch import *  # noqa: F401,F403
from ._protomatch import Error, __doc__ as _native_doc  # noqa: F401

__version__ = "0.1.0"
