"""Multi-modal 3D tumor segmentation: three UNet-family networks, ensemble
pseudo-labeling of an unlabeled pool, and student distillation, runnable at
desk scale on synthetic phantom cases."""

__version__ = "0.1.0"
