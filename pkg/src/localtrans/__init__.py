"""Multiscale local-attention homography estimation.

Subpackages: ``tensor`` (autodiff core and layers), ``homography``
(geometry, resampling, metrics, grid stitching).  Modules: ``lak`` (local
attention kernel), ``network`` (the cascade), ``data`` (synthetic pairs),
``train``, ``bench`` and ``cli``.
"""
__version__ = "0.1.0"
