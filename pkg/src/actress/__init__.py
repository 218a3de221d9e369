"""Pseudo-label curation for visual grounding at desk scale.

Modules: ``geometry`` (boxes, IoU, quantization), ``synthdata`` (scenes,
queries, splits), ``model`` (numpy transformer with manual backprop),
``attribution`` (relevance propagation), ``curation`` (scores, fusion,
selection), ``trainer`` (burn-in, active stages, baseline), ``evalreport``
(curves, ablations), ``estimators`` (scikit-learn wrappers) and ``cli``.
"""

__version__ = "0.1.0"
