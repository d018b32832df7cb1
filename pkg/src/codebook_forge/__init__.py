"""Iterative, human-in-the-loop codebook development and LM-assisted annotation.

The package is organized around the refinement loop: a corpus of free-text
case narratives (`corpus`), batch sampling over sentence embeddings
(`embeddings`), a chat-completion gateway with structured-output parsing
(`gateway`), versioned guideline sets (`codebook`), agreement statistics
(`metrics`), the refinement loop itself (`engine`), durable run storage
(`runstore`), an HTTP service for expert feedback (`service`), and an
offline synthetic world for closed-loop testing (`synth`).
"""

__version__ = "0.1.0"

API_KEY_ENV_VAR = "CODEBOOK_FORGE_API_KEY"


class CodebookForgeError(Exception):
    """Base class for all errors raised by this package."""
