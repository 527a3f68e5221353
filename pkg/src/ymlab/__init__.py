"""Yang-Mills and Hermitian-Yang-Mills gradient flows on flat lattice tori."""

__version__ = "0.1.0"
