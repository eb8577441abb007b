"""Calibrationless parallel-MRI laboratory.

Locally low-rank (CLEAR) reconstruction solved by IRLS, and a small unrolled
image-domain network trained jointly with a tissue-segmentation head, all on
seeded synthetic multi-coil phantoms.
"""
__version__ = "0.1.0"
