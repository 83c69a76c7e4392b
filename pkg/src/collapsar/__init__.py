"""collapsar - dynamical wave-function reduction toolkit (GRW, QMUPL, CSL)"""

__version__ = "0.1.0"
