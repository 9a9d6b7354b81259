"""Cross-view geo-localization retrieval and trainable image+text reranking."""

__version__ = "0.1.0"
