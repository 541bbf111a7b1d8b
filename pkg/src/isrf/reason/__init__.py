from .clients import (EntitySpec, FileEncoder, FileReasoner, GenerationReport, HttpEncoder, HttpReasoner,
                      MissingEntry, SemanticRecord, TransportError, encode_texts, generate_descriptions,
                      load_store, with_retry)
from .prompts import PromptError, render_item_prompt, render_user_prompt, sample_history, template_version

__all__ = [
    "EntitySpec", "FileEncoder", "FileReasoner", "GenerationReport", "HttpEncoder", "HttpReasoner",
    "MissingEntry", "SemanticRecord", "TransportError", "encode_texts", "generate_descriptions",
    "load_store", "with_retry", "PromptError", "render_item_prompt", "render_user_prompt",
    "sample_history", "template_version",
]
