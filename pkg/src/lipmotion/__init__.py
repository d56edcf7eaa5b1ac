"""Two-stage lip sync on a procedural talking-face corpus.

Stage 1 diffuses lower-face landmarks from speech; stage 2 regenerates the lip
region of each frame from the landmarks and masked reference frames.
"""
__version__ = "0.1.0"
