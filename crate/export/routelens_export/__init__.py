"""Rewrite Hugging Face GPT-2 / Llama checkpoints into the routelens layout.

The output directory holds ``model.safetensors`` (F32 unless ``keep_dtype``),
``model.toml``, ``vocab.json``, ``merges.txt`` and ``export_manifest.json``.
"""

from .export import ExportError, ExportManifest, export, load_source, spot_check

__all__ = ["ExportError", "ExportManifest", "export", "load_source", "spot_check"]
__version__ = "0.1.0"
