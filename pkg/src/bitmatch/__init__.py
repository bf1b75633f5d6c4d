"""Cross-modality patch-matching retrieval at desk scale.

Subpackages: ``diffcore`` (taped f64 tensors), ``nn`` (layers + AdamW),
``synthdata`` (synthetic visible/infrared dataset), ``encoder`` (toy
backbone + stage-1 losses), ``bci`` (bi-directional cross-interaction
decoder), ``qascore`` (reciprocal patch matching + scoring head),
``retrieval`` (CMC/mAP and two-stage inference), ``cli`` (commands).
"""

__version__ = "0.1.0"
