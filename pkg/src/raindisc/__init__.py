"""Swath-to-full-disc precipitation retrieval on synthetic multimodal scenes.

Subpackages cover the whole pipeline: seeded scene generation (synthdata),
flat-binary persistence (gridio), the teacher/student networks and their
masked wavelet encoder blocks (models, blocks, masks, wavelets), the two
training stages (training, finetune, lora), verification metrics (metrics)
and the config-driven experiment harness (config, harness, cli).
"""

__version__ = "0.1.0"
