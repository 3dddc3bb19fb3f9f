from .bpe import BPEVocab, TokenSequence, build_vocab, detokenize, tokenize, tokenize_batch
from .encoder import PromptRefiner, TextEncoder
from .manifest import PromptManifest, generic_manifest, load_manifest, trento_manifest

__all__ = [
    "BPEVocab", "TokenSequence", "build_vocab", "detokenize", "tokenize", "tokenize_batch",
    "PromptRefiner", "TextEncoder",
    "PromptManifest", "generic_manifest", "load_manifest", "trento_manifest",
]
