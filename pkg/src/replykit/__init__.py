"""replykit: retrieval-based canned-reply suggestion engine.

From an unlabelled dialogue corpus to a served suggestion API: corpus prep
and synthetic generation, a hierarchical contrastive matching model (with
binary and multi-class alternatives) on a small reverse-mode autodiff core,
canned-list curation with weak labelling, recall evaluation, and a cached,
threshold-gated suggestion service.
"""

__version__ = "0.1.0"
