"""
eigensplat: Gaussian splatting with eigenvalue shape-feature regularization.
"""
__version__ = '1.0.0'
