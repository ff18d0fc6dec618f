"""sigmap: RF signal-strength mapping from building data.

Three interchangeable path-gain engines (closed-form channel models, a
shooting-and-bouncing-rays tracer, a cascaded U-Net trained on synthetic
maps) plus dataset synthesis and evaluation against sparse measurements.
"""

__version__ = "0.1.0"
