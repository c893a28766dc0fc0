"""Payload-byte intrusion detection: denoising autoencoder, deep embedded
clustering and gradient-boosted trees, with transfer-learning scenarios and
uncertainty quantification (score-based and metamodel-based).
"""

from .config import RunConfig
from .gbdt import BoostParams, TreeEnsemble
from .payload import PayloadSet
from .stopping import EarlyStop

__all__ = ["BoostParams", "EarlyStop", "PayloadSet", "RunConfig", "TreeEnsemble"]
__version__ = "0.1.0"
