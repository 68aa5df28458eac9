from ..nn.model import Network
from ..schemas import Method, Mode, PredictionSet, Tensor


def predict_baseline(model: Network, x: Tensor) -> PredictionSet:
    """One deterministic eval-mode forward pass."""
    return PredictionSet(method=Method.baseline, probs=model.forward(x, Mode.eval))
