"""Turn a textual REPL into a full Jupyter kernel.

The package is split along the seams of the problem:

- ``wire``: ZeroMQ channel plumbing, message framing and HMAC signing.
- ``protocol``: the language-independent request dispatcher and the
  interface a language backend has to implement.
- ``registry``: kernelspec generation, installation and environment checks.
- ``highlight``: declarative syntax modes compiled to CodeMirror scripts.
- ``calc``: a small arithmetic language used as the built-in example.
- ``client``: a headless client for driving kernels from scripts and tests.
"""

__version__ = "0.1.0"
