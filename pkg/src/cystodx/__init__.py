"""cystodx: multi-task cystoscopic image analysis.

Tumor classification, lesion segmentation, and molecular-marker subtyping with
attention-augmented CNNs, plus saliency explanations and an HTTP inference
service. Quantitative behavior is exercised on synthetic desk-scale corpora.
"""

__version__ = "0.1.0"
