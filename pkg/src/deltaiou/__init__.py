"""Flag suspicious negative predictions of a binary defect classifier by
comparing class-specific (Grad-CAM) and class-agnostic (FullGrad) heatmaps."""

__version__ = "0.1.0"
