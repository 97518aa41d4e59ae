"""Transformer-based LiDAR-camera fusion into a bird's-eye-view map, at desk scale.

Modules, bottom up: ``numerics`` (kernels with manual backward),
``attention`` (deformable attention), ``geometry`` (frames and
projections), ``branches`` (sensor encoders), ``mmfe`` (fusion encoder),
``tfe`` (temporal encoder), ``head`` (set-prediction head), and the
harness: ``scene``, ``model``, ``training``, ``evaluation``, ``ablation``,
``config``, ``viz``, ``cli``.
"""

__version__ = "0.1.0"
