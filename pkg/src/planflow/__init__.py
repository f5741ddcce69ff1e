"""Masked semantic planner + flow-matching renderer over procedural toy videos.

The package trains a small bidirectional planner that infills masked target
embeddings, a velocity-field renderer over toy latents with segment-aware
rotary positions and multi-branch classifier-free guidance, and verifies both
against programmatic oracles on generated editing tasks.
"""

__version__ = "0.1.0"
