"""Synthetic concepts, prompt rewriting and dataset construction."""

from .concepts import (
    BENIGN_CATEGORIES,
    CONCEPTS,
    IMAGE_SHAPE,
    UNSAFE_CATEGORIES,
    ConceptSpec,
    concept_of,
    is_unsafe_prompt,
    prototype,
    render,
)
from .datasets import (
    DatasetPair,
    Manifest,
    build_base_corpus,
    build_benign_dataset,
    build_pair_dataset,
    make_panel,
    panel_exclusions,
    read_dataset,
    sample_benign_prompts,
    sample_prompts,
    select_safe_image,
    write_dataset,
)
from .rewriter import RewriterClient, RuleRewriter, SubprocessRewriter, rewrite_unsafe_prompt
from .vocab import NO_OP, PromptTokens, SafetyCondition, parse_condition, parse_prompt
