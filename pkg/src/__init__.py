"""
Chunkwise - MoE training memory planner and chunked dispatch simulator
"""

__version__ = "1.0.0"
__author__ = "Chunkwise Team"
