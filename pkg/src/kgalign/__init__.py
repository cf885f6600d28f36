"""Action recognition by aligning video, action and body-movement
embeddings through a multi-modal knowledge graph."""

__version__ = "0.1.0"
