"""Human-in-the-loop qualitative coding toolkit.

Library for applying hierarchical codebooks to text corpora with LLM
assistance: corpus ingestion and segmentation, codebook generation,
code application with confidence scoring, agreement benchmarking
against human gold labels, and codebook-to-codebook similarity.
"""

__version__ = "0.1.0"

from .models import (  # noqa: F401
    Annotation,
    Code,
    Codebook,
    Document,
    DocumentKind,
    ErrorCategory,
    Excerpt,
    Run,
    SpeakerRole,
)
from .store import Project, load_project, save_project  # noqa: F401
from .gateway import Gateway  # noqa: F401
