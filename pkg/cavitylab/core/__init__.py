"""
CavityLab Core Package

Volume codec, multi-scale filtering, the three loss families, optimizers,
phantom generation, metrics and the experiment drivers.
"""
