"""
refaudio - customized text-to-audio generation at desk scale
"""

__version__ = "0.1.0"
__author__ = "greenantix"
__description__ = "Reference-conditioned text-to-audio generation with rectified flow matching"
